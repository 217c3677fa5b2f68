//! The `cdp` command line: training runs, sampling, diagnostic reports and
//! penalty-weight sweeps.
//!
//! Every command writes into a single output directory. See `docs/` for the
//! config grammar, the checkpoint layout and the CSV schemas.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use cdp_core::checkpoint::Checkpoint;
use cdp_core::config::ConfigDoc;
use cdp_core::diagnostics::{self, EvalSpec, SamplingSpec, Table};
use cdp_core::sampler::SamplerKind;
use cdp_core::toyworld::GmmTask;
use cdp_core::train::{self, rng_stream, TrainConfig, TrainOutput};

mod report;

pub use report::ReportKind;

#[derive(Debug, Parser)]
#[command(name = "cdp", version, about = "Contractive diffusion policies on toy conditional action tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a score network from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw actions from a checkpoint and write them as CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples per state.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value = "dpm2m")]
        sampler: String,
        #[arg(long, default_value_t = 15)]
        steps: usize,
        /// Only this state; all states otherwise.
        #[arg(long)]
        state: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        /// Use the raw parameters instead of the EMA copy.
        #[arg(long)]
        raw: bool,
    },
    /// Run a diagnostic report and write CSV (and SVG) files.
    Report(report::ReportArgs),
    /// Train and score one model per penalty weight and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated penalty weights.
        #[arg(long, default_value = "0.001,0.01,0.1,1,10,100")]
        gammas: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

/// How sweep models are scored.
#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    /// Sampler used for scoring.
    #[arg(id = "eval_sampler", long = "eval-sampler", default_value = "dpm2m")]
    pub sampler: String,
    #[arg(id = "eval_steps", long = "eval-steps", default_value_t = 25)]
    pub steps: usize,
    #[arg(id = "eval_n", long = "eval-n", default_value_t = 1000)]
    pub n: usize,
    #[arg(id = "eval_grid", long = "eval-grid", default_value_t = 9)]
    pub grid: usize,
    #[arg(id = "eval_seed", long = "eval-seed", default_value_t = 12345)]
    pub seed: u64,
}

impl EvalArgs {
    pub fn spec(&self) -> Result<EvalSpec> {
        Ok(EvalSpec {
            sampling: SamplingSpec {
                kind: self.sampler.parse()?,
                steps: self.steps,
            },
            n_samples: self.n,
            grid_size: self.grid,
            seed: self.seed,
        })
    }
}

/// Applies `CDL_THREADS` (0 or unset: one worker per core).
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CDL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("CDL_THREADS must be a non-negative integer, got `{v}`"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Sample {
            checkpoint,
            n,
            sampler,
            steps,
            state,
            seed,
            out,
            raw,
        } => cmd_sample(&checkpoint, n, &sampler, steps, state, seed, &out, raw),
        Command::Report(args) => report::cmd_report(&args),
        Command::Sweep {
            config,
            out,
            gammas,
            seeds,
            seed,
            eval,
        } => {
            let (cfg, task) = load_config(&config, seed)?;
            let gammas = parse_list::<f64>("--gammas", &gammas)?;
            let seeds = match seeds {
                Some(s) => parse_list::<u64>("--seeds", &s)?,
                None => vec![cfg.rng_seed],
            };
            report::run_gamma_sweep(&cfg, &task, &gammas, &seeds, &eval.spec()?, &out, true)
        }
    }
}

pub fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|item| {
            let item = item.trim();
            item.parse::<T>()
                .map_err(|e| anyhow::anyhow!("{flag}: cannot parse `{item}`: {e}"))
        })
        .collect()
}

/// Reads a config file, applies the seed override and resolves the task
/// relative to the config's directory.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<(TrainConfig, GmmTask)> {
    let doc = ConfigDoc::load(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = TrainConfig::from_doc(&doc).with_context(|| format!("invalid config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    let task = train::resolve_task(&cfg.task, path.parent())?;
    Ok((cfg, task))
}

/// One directory holding every artifact of a run.
#[derive(Debug, Clone)]
pub struct RunDirectory {
    pub path: PathBuf,
}

impl RunDirectory {
    pub const CONFIG: &'static str = "config.txt";
    pub const TASK: &'static str = "task.json";
    pub const RUNLOG: &'static str = "runlog.jsonl";
    pub const TIMING: &'static str = "timing.jsonl";
    pub const CHECKPOINT: &'static str = "checkpoint.ckpt";
    pub const CHECKPOINT_JSON: &'static str = "checkpoint.json";

    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDirectory { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_table(&self, name: &str, table: &Table) -> Result<PathBuf> {
        self.write(name, table.to_csv())
    }

    pub fn write_config(&self, cfg: &TrainConfig, task: &GmmTask) -> Result<()> {
        self.write(Self::CONFIG, cfg.to_doc().to_canonical_string())?;
        self.write(Self::TASK, task.to_json_string())?;
        Ok(())
    }

    pub fn write_checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
        self.write(name, ckpt.to_bytes()?)
    }

    pub fn write_training(&self, out: &TrainOutput) -> Result<()> {
        self.write(Self::RUNLOG, out.log.to_jsonl())?;
        let mut timing = String::new();
        for t in &out.timings {
            timing.push_str(&serde_json::to_string(t)?);
            timing.push('\n');
        }
        self.write(Self::TIMING, timing)?;
        self.write_checkpoint(Self::CHECKPOINT, &out.checkpoint)?;
        self.write(Self::CHECKPOINT_JSON, out.checkpoint.to_json_string()?)?;
        Ok(())
    }
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (cfg, task) = load_config(config, seed)?;
    let dir = RunDirectory::create(out)?;
    dir.write_config(&cfg, &task)?;
    let result = train::train_with(&cfg, &task, &mut |ckpt| {
        dir.write_checkpoint(&format!("checkpoints/step_{:07}.ckpt", ckpt.header.step), ckpt)
            .map_err(|e| cdp_core::Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(())
    });
    let output = match result {
        Ok(o) => o,
        Err(cdp_core::Error::Diverged { step, what, last_good }) => {
            let p = dir.write_checkpoint("last_good.ckpt", &last_good)?;
            bail!(
                "training diverged at step {step}: non-finite {what}; last good state saved to {}",
                p.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    dir.write_training(&output)?;
    if let Some(last) = output.log.records.last() {
        println!(
            "trained {} steps: dsm {:.6}, contraction {:.6}, config {}",
            last.step,
            last.dsm_loss,
            last.contraction_loss,
            cfg.hash()
        );
    }
    println!("checkpoint written to {}", dir.file(RunDirectory::CHECKPOINT).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    checkpoint: &Path,
    n: usize,
    sampler: &str,
    steps: usize,
    state: Option<usize>,
    seed: u64,
    out: &Path,
    raw: bool,
) -> Result<()> {
    let kind: SamplerKind = sampler.parse()?;
    if steps < 2 {
        bail!("--steps must be at least 2, got {steps}");
    }
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let net = if raw { ckpt.network()? } else { ckpt.ema_network()? };
    let task = &ckpt.header.task;
    let sched = ckpt.header.schedule;
    let states: Vec<usize> = match state {
        Some(si) if si >= task.states.len() => {
            bail!("--state {si} out of range: the task has {} states", task.states.len())
        }
        Some(si) => vec![si],
        None => (0..task.states.len()).collect(),
    };
    let d = task.d_a;
    let mut header = vec!["state_id".to_string()];
    header.extend((1..=d).map(|i| format!("seed_{i}")));
    header.extend((1..=d).map(|i| format!("action_{i}")));
    let mut csv = header.join(",");
    csv.push('\n');
    let spec = SamplingSpec { kind, steps };
    for si in states {
        let mut seed_rng = rng_stream(seed, 30 + si as u64);
        let seeds: Vec<Vec<f64>> = (0..n).map(|_| diagnostics::standard_normal_vec(d, &mut seed_rng)).collect();
        let s = &task.states[si].state;
        let rows: Vec<Vec<f64>> = seeds
            .par_iter()
            .enumerate()
            .map(|(i, z)| {
                let mut noise_rng = rng_stream(seed, ((si as u64 + 1) << 32) | i as u64);
                diagnostics::sample_one(&net, &sched, s, z, spec, &mut noise_rng)
            })
            .collect::<cdp_core::Result<_>>()?;
        for (z, a) in seeds.iter().zip(&rows) {
            let cells: Vec<String> = std::iter::once(si.to_string())
                .chain(z.iter().chain(a).map(|x| x.to_string()))
                .collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
