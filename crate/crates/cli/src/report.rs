//! `cdp report <kind>`: drives the diagnostics and writes `<kind>.csv` plus an
//! optional `<kind>.svg` into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use cdp_core::checkpoint::Checkpoint;
use cdp_core::diagnostics::{self, EvalSpec, RunMeta, SamplingSpec, SweepReport};
use cdp_core::plot::{Mark, Plot};
use cdp_core::sampler::SamplerKind;
use cdp_core::toyworld::GmmTask;
use cdp_core::train::{TrainConfig, TrainOutput};
use cdp_core::{EpsField, ScoreNetwork};

use crate::{load_config, parse_list, EvalArgs, RunDirectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Contraction,
    SeedSensitivity,
    SolverSweep,
    GammaSweep,
    DataFraction,
    PiBench,
}

impl ReportKind {
    pub const ALL: [ReportKind; 6] = [
        ReportKind::Contraction,
        ReportKind::SeedSensitivity,
        ReportKind::SolverSweep,
        ReportKind::GammaSweep,
        ReportKind::DataFraction,
        ReportKind::PiBench,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::Contraction => "contraction",
            ReportKind::SeedSensitivity => "seed_sensitivity",
            ReportKind::SolverSweep => "solver_sweep",
            ReportKind::GammaSweep => "gamma_sweep",
            ReportKind::DataFraction => "data_fraction",
            ReportKind::PiBench => "pi_bench",
        }
    }
}

impl FromStr for ReportKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match ReportKind::ALL.iter().find(|k| k.as_str() == s) {
            Some(k) => Ok(*k),
            None => {
                let valid: Vec<&str> = ReportKind::ALL.iter().map(|k| k.as_str()).collect();
                bail!("unknown report kind `{s}`; valid kinds: {}", valid.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct ReportArgs {
    /// One of contraction, seed_sensitivity, solver_sweep, gamma_sweep,
    /// data_fraction, pi_bench.
    pub kind: String,
    /// Checkpoint(s) to inspect; solver_sweep accepts several.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Training config for gamma_sweep and data_fraction.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "dpm2m")]
    pub sampler: String,
    /// Sampler steps; a comma-separated list for solver_sweep.
    #[arg(long)]
    pub steps: Option<String>,
    /// Pairs (seed_sensitivity) or samples per step count (solver_sweep).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub state: Option<usize>,
    /// Grid points per action dimension and along time.
    #[arg(long, default_value_t = 9)]
    pub grid: usize,
    /// Replaces the `-f/h` threshold in the contraction report.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// RK4 steps of the Gronwall audit; 0 skips it.
    #[arg(long, default_value_t = 200)]
    pub gronwall_steps: usize,
    #[arg(long)]
    pub gammas: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub fractions: Option<String>,
    /// Penalty weight of the contractive model in data_fraction.
    #[arg(long)]
    pub contractive_gamma: Option<f64>,
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub ks: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Skip SVG output.
    #[arg(long)]
    pub no_plot: bool,
    /// Use raw parameters instead of the EMA copy.
    #[arg(long)]
    pub raw: bool,
    #[command(flatten)]
    pub eval: EvalArgs,
}

struct Loaded {
    name: String,
    ckpt: Checkpoint,
    net: ScoreNetwork,
}

fn load_checkpoints(args: &ReportArgs) -> Result<Vec<Loaded>> {
    if args.checkpoint.is_empty() {
        bail!("report `{}` needs --checkpoint", args.kind);
    }
    args.checkpoint
        .iter()
        .map(|p| {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let net = if args.raw { ckpt.network()? } else { ckpt.ema_network()? };
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .filter(|_| p.file_name().is_some_and(|f| f == RunDirectory::CHECKPOINT))
                .or_else(|| p.file_stem())
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok(Loaded { name, ckpt, net })
        })
        .collect()
}

fn single_steps(args: &ReportArgs, default: usize) -> Result<usize> {
    match &args.steps {
        None => Ok(default),
        Some(s) => s
            .trim()
            .parse()
            .with_context(|| format!("--steps: expected one integer, got `{s}`")),
    }
}

fn config_for(args: &ReportArgs) -> Result<(TrainConfig, GmmTask)> {
    let path = args
        .config
        .as_deref()
        .with_context(|| format!("report `{}` needs --config", args.kind))?;
    load_config(path, None)
}

fn write_plot(dir: &RunDirectory, args: &ReportArgs, name: &str, plot: Plot) -> Result<()> {
    if !args.no_plot {
        dir.write(name, plot.to_svg())?;
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let kind: ReportKind = args.kind.parse()?;
    let sampler: SamplerKind = args.sampler.parse()?;
    let dir = RunDirectory::create(&args.out)?;
    match kind {
        ReportKind::Contraction => {
            let m = &load_checkpoints(args)?[0];
            let rep = diagnostics::contraction_report(
                &m.net,
                &m.ckpt.header.schedule,
                &m.ckpt.header.task,
                args.grid,
                args.threshold,
            )?;
            let meta = RunMeta::new(m.ckpt.header.config_hash.clone(), m.ckpt.header.seed);
            dir.write_table("contraction.csv", &rep.to_table(&meta))?;
            let mut threshold: BTreeMap<u64, f64> = BTreeMap::new();
            for p in &rep.points {
                threshold.insert(p.t.to_bits(), p.threshold);
            }
            let plot = Plot::new("Largest eigenvalue of sym J over the grid", "t", "lambda_max")
                .add("eps network", rep.points.iter().map(|p| (p.t, p.lambda_eps)).collect(), Mark::Points)
                .add("flow", rep.points.iter().map(|p| (p.t, p.lambda_flow)).collect(), Mark::Points)
                .add(
                    "threshold",
                    threshold.iter().map(|(t, v)| (f64::from_bits(*t), *v)).collect(),
                    Mark::Line,
                );
            write_plot(&dir, args, "contraction.svg", plot)?;
            println!(
                "contraction: mean lambda_eps {:.6}, satisfied fraction {:.4}, flow contracting fraction {:.4}",
                rep.mean_lambda_eps, rep.satisfied_fraction, rep.flow_contracting_fraction
            );
        }
        ReportKind::SeedSensitivity => {
            let m = &load_checkpoints(args)?[0];
            let task = &m.ckpt.header.task;
            let si = args.state.unwrap_or(0);
            if si >= task.states.len() {
                bail!("--state {si} out of range: the task has {} states", task.states.len());
            }
            let spec = SamplingSpec {
                kind: sampler,
                steps: single_steps(args, 50)?,
            };
            let rep = diagnostics::seed_sensitivity(
                &m.net,
                &m.ckpt.header.schedule,
                task,
                si,
                args.n.unwrap_or(200),
                spec,
                args.gronwall_steps,
                args.seed,
            )?;
            let meta = RunMeta::new(m.ckpt.header.config_hash.clone(), args.seed);
            dir.write_table("seed_sensitivity.csv", &rep.to_table(&meta))?;
            let plot = Plot::new("Seed sensitivity", "initial seed distance", "terminal action distance").add(
                "pairs",
                rep.seed_distances.iter().copied().zip(rep.distances.iter().copied()).collect(),
                Mark::Points,
            );
            write_plot(&dir, args, "seed_sensitivity.svg", plot)?;
            println!(
                "seed_sensitivity: median distance {:.6}, within-mode variance {:.6}",
                rep.median_distance, rep.within_mode_variance
            );
        }
        ReportKind::SolverSweep => {
            let models = load_checkpoints(args)?;
            let steps = match &args.steps {
                Some(s) => parse_list::<usize>("--steps", s)?,
                None => vec![5, 15, 50],
            };
            let first = &models[0].ckpt.header;
            let fields: Vec<(&str, &(dyn EpsField + Sync))> = models
                .iter()
                .map(|m| (m.name.as_str(), &m.net as &(dyn EpsField + Sync)))
                .collect();
            let rep = diagnostics::solver_sweep(
                &fields,
                &first.schedule,
                &first.task,
                &steps,
                sampler,
                args.n.unwrap_or(1000),
                args.seed,
            )?;
            let meta = RunMeta::new(first.config_hash.clone(), args.seed);
            dir.write_table("solver_sweep.csv", &rep.to_table(&meta))?;
            let mut plot = Plot::new("Energy distance against sampler steps", "steps", "energy distance").log_x();
            for m in &models {
                let pts = rep
                    .rows
                    .iter()
                    .filter(|r| r.model == m.name)
                    .map(|r| (r.steps as f64, r.energy_distance))
                    .collect();
                plot = plot.add(&m.name, pts, Mark::Line);
            }
            write_plot(&dir, args, "solver_sweep.svg", plot)?;
            for (model, d) in &rep.degradation {
                match d {
                    Some(d) => println!("solver_sweep: {model} degradation {d:.6}"),
                    None => println!("solver_sweep: {model} (single step count)"),
                }
            }
        }
        ReportKind::GammaSweep => {
            let (cfg, task) = config_for(args)?;
            let gammas = match &args.gammas {
                Some(g) => parse_list::<f64>("--gammas", g)?,
                None => vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0],
            };
            let seeds = seeds_or(args, &cfg)?;
            run_gamma_sweep(&cfg, &task, &gammas, &seeds, &args.eval.spec()?, &args.out, !args.no_plot)?;
        }
        ReportKind::DataFraction => {
            let (cfg, task) = config_for(args)?;
            let fractions = match &args.fractions {
                Some(f) => parse_list::<f64>("--fractions", f)?,
                None => vec![0.1, 1.0],
            };
            let seeds = seeds_or(args, &cfg)?;
            let gamma = args
                .contractive_gamma
                .unwrap_or(if cfg.contraction.gamma > 0.0 { cfg.contraction.gamma } else { 0.1 });
            let sink = cell_sink(&args.out);
            let rep = diagnostics::data_fraction_sweep(
                &task,
                &fractions,
                &cfg,
                gamma,
                &seeds,
                &args.eval.spec()?,
                Some(&sink),
            )?;
            dir.write_table("data_fraction.csv", &rep.to_table())?;
            let mut plot = Plot::new("Energy distance against data fraction", "fraction of data", "energy distance").log_x();
            for model in ["baseline", "contractive"] {
                plot = plot.add(model, axis_means(&rep, model), Mark::Line);
            }
            write_plot(&dir, args, "data_fraction.svg", plot)?;
            print_cells(&rep);
        }
        ReportKind::PiBench => {
            let dims = match &args.dims {
                Some(d) => parse_list::<usize>("--dims", d)?,
                None => vec![2, 4, 8, 16, 32, 64],
            };
            let ks = match &args.ks {
                Some(k) => parse_list::<usize>("--ks", k)?,
                None => vec![1, 2, 4, 8, 16, 32],
            };
            let rows = diagnostics::power_iteration_benchmark(&dims, &ks, args.reps, args.seed)?;
            let meta = RunMeta::new("-", args.seed);
            let (acc, timing) = diagnostics::pi_bench_tables(&rows, &meta);
            dir.write_table("pi_bench.csv", &acc)?;
            dir.write_table("pi_bench_timing.csv", &timing)?;
            let mut plot = Plot::new("Power iteration error", "iterations K", "max abs error").log_x();
            for &d in &dims {
                let pts = rows.iter().filter(|r| r.dim == d).map(|r| (r.k as f64, r.power_error)).collect();
                plot = plot.add(&format!("dim {d}"), pts, Mark::Line);
            }
            write_plot(&dir, args, "pi_bench.svg", plot)?;
            println!("pi_bench: {} rows", rows.len());
        }
    }
    Ok(())
}

fn seeds_or(args: &ReportArgs, cfg: &TrainConfig) -> Result<Vec<u64>> {
    match &args.seeds {
        Some(s) => parse_list::<u64>("--seeds", s),
        None => Ok(vec![cfg.rng_seed]),
    }
}

/// Directory of one sweep cell under `<out>/runs`.
pub fn cell_dir(out: &Path, cfg: &TrainConfig, model: &str) -> PathBuf {
    let axis = if model == "gamma" {
        cfg.contraction.gamma
    } else {
        cfg.data_fraction
    };
    out.join("runs").join(format!("{model}_{axis}_seed{}", cfg.rng_seed))
}

fn cell_sink(out: &Path) -> impl Fn(&TrainConfig, &str, &TrainOutput) -> cdp_core::Result<()> + Sync + '_ {
    move |cfg, model, output| {
        let save = || -> Result<()> {
            let dir = RunDirectory::create(&cell_dir(out, cfg, model))?;
            dir.write(RunDirectory::CONFIG, cfg.to_doc().to_canonical_string())?;
            dir.write(RunDirectory::TASK, output.checkpoint.header.task.to_json_string())?;
            dir.write_training(output)
        };
        save().map_err(|e| cdp_core::Error::Io(std::io::Error::other(format!("{e:#}"))))
    }
}

fn axis_means(rep: &SweepReport, model: &str) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for c in rep.cells.iter().filter(|c| c.model == model) {
        if let Ok(s) = &c.result {
            let e = acc.entry(c.axis.to_bits()).or_default();
            e.0 += s.energy_distance;
            e.1 += 1;
        }
    }
    let mut pts: Vec<(f64, f64)> = acc.into_iter().map(|(a, (s, n))| (f64::from_bits(a), s / n as f64)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

fn print_cells(rep: &SweepReport) {
    for c in &rep.cells {
        match &c.result {
            Ok(s) => println!(
                "{} {} {} seed {}: energy distance {:.6}, mean lambda_eps {:.6}",
                rep.axis_name, c.axis, c.model, c.seed, s.energy_distance, s.mean_lambda_eps
            ),
            Err(e) => println!("{} {} {} seed {}: failed: {e}", rep.axis_name, c.axis, c.model, c.seed),
        }
    }
}

/// Trains every `(gamma, seed)` cell into `<out>/runs/...` and writes
/// `gamma_sweep.csv`.
pub fn run_gamma_sweep(
    cfg: &TrainConfig,
    task: &GmmTask,
    gammas: &[f64],
    seeds: &[u64],
    eval: &EvalSpec,
    out: &Path,
    plot: bool,
) -> Result<()> {
    let dir = RunDirectory::create(out)?;
    dir.write(RunDirectory::CONFIG, cfg.to_doc().to_canonical_string())?;
    let sink = cell_sink(out);
    let rep = diagnostics::gamma_sweep(task, gammas, cfg, seeds, eval, Some(&sink))?;
    dir.write_table("gamma_sweep.csv", &rep.to_table())?;
    if plot {
        let p = Plot::new("Energy distance against penalty weight", "gamma", "energy distance")
            .log_x()
            .add("mean over seeds", axis_means(&rep, "gamma"), Mark::Line);
        dir.write("gamma_sweep.svg", p.to_svg())?;
    }
    print_cells(&rep);
    Ok(())
}
