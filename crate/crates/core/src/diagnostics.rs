//! Experiment procedures: contraction grids, seed sensitivity, solver and
//! hyperparameter sweeps, and the power-iteration benchmark. Every report is a
//! CSV table whose rows carry the config hash, seed and code version.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contraction;
use crate::error::{Error, Result};
use crate::field::EpsField;
use crate::linalg;
use crate::sampler::{self, GronwallRecord, SamplerKind};
use crate::schedule::NoiseSchedule;
use crate::toyworld::{energy_distance, GmmTask};
use crate::train::{self, rng_stream, TrainConfig};

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Run identity appended to every report row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl RunMeta {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        RunMeta {
            config_hash: config_hash.into(),
            seed,
            code_version: crate::CODE_VERSION.to_string(),
        }
    }

    pub const COLUMNS: [&'static str; 3] = ["config_hash", "seed", "code_version"];

    fn cells(&self) -> [String; 3] {
        [self.config_hash.clone(), self.seed.to_string(), self.code_version.clone()]
    }
}

fn header_with_meta(cols: &[&str]) -> Table {
    let mut all: Vec<&str> = cols.to_vec();
    all.extend(RunMeta::COLUMNS);
    Table::new(&all)
}

fn with_meta(mut row: Vec<String>, meta: &RunMeta) -> Vec<String> {
    row.extend(meta.cells());
    row
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// One-sided sign test: the trend holds in at least 80% of seeds (4 of 5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub n: usize,
    pub passed: bool,
    /// Mean of the per-seed differences (positive favours the trend).
    pub mean_effect: f64,
    pub median_effect: f64,
}

impl SignTest {
    /// `differences[i] > 0` means seed `i` shows the trend.
    pub fn from_differences(differences: &[f64]) -> Self {
        let n = differences.len();
        let wins = differences.iter().filter(|d| **d > 0.0).count();
        SignTest {
            wins,
            n,
            passed: n > 0 && wins * 5 >= 4 * n,
            mean_effect: mean(differences),
            median_effect: median(differences),
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{}/{} seeds (mean effect {:.4e}, median {:.4e})",
            self.wins, self.n, self.mean_effect, self.median_effect
        )
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        f64::NAN
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Regular grid covering each state's mode means padded by three standard
/// deviations.
pub fn action_grid(task: &GmmTask, state_index: usize, per_dim: usize) -> Vec<Vec<f64>> {
    let comps = &task.states[state_index].components;
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..task.d_a)
        .map(|d| {
            let lo = comps.iter().map(|c| c.mean[d] - 3.0 * c.variance[d].sqrt()).fold(f64::INFINITY, f64::min);
            let hi = comps.iter().map(|c| c.mean[d] + 3.0 * c.variance[d].sqrt()).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .unzip();
    let coord = |d: usize, i: usize| {
        if per_dim == 1 {
            0.5 * (lo[d] + hi[d])
        } else {
            lo[d] + (hi[d] - lo[d]) * i as f64 / (per_dim - 1) as f64
        }
    };
    let total = per_dim.pow(task.d_a as u32);
    (0..total)
        .map(|mut flat| {
            (0..task.d_a)
                .map(|d| {
                    let i = flat % per_dim;
                    flat /= per_dim;
                    coord(d, i)
                })
                .collect()
        })
        .collect()
}

/// `n` points uniform on `[t_eps, 1 - t_eps]`.
pub fn time_grid(sched: &NoiseSchedule, n: usize) -> Vec<f64> {
    let (lo, hi) = (sched.t_eps, 1.0 - sched.t_eps);
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionPoint {
    pub state_index: usize,
    pub t: f64,
    pub action: Vec<f64>,
    pub lambda_eps: f64,
    pub threshold: f64,
    pub lambda_flow: f64,
}

impl ContractionPoint {
    pub fn satisfied(&self) -> bool {
        self.lambda_eps < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub points: Vec<ContractionPoint>,
    pub mean_lambda_eps: f64,
    pub mean_lambda_flow: f64,
    /// Fraction of grid points where `lambda_max(sym J_eps) < -f/h`.
    pub satisfied_fraction: f64,
    /// Fraction of grid points where `lambda_max(sym J_F) < 0`.
    pub flow_contracting_fraction: f64,
}

impl ContractionReport {
    pub fn to_table(&self, meta: &RunMeta) -> Table {
        let mut t = header_with_meta(&[
            "state_index",
            "t",
            "action",
            "lambda_max_eps",
            "threshold",
            "satisfied",
            "lambda_max_flow",
            "satisfied_fraction",
        ]);
        for p in &self.points {
            let action: Vec<String> = p.action.iter().map(|x| num(*x)).collect();
            t.push(with_meta(
                vec![
                    p.state_index.to_string(),
                    num(p.t),
                    action.join(" "),
                    num(p.lambda_eps),
                    num(p.threshold),
                    (p.satisfied() as u8).to_string(),
                    num(p.lambda_flow),
                    num(self.satisfied_fraction),
                ],
                meta,
            ));
        }
        t
    }
}

/// Exact `lambda_max` of `sym J_eps` and `sym J_F` over an action grid
/// (`grid_size` points per dimension, every state) times `grid_size` times.
pub fn contraction_report<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    task: &GmmTask,
    grid_size: usize,
    threshold_override: Option<f64>,
) -> Result<ContractionReport> {
    if grid_size == 0 {
        return Err(Error::InvalidArgument("grid size must be positive".into()));
    }
    let times = time_grid(sched, grid_size);
    let mut jobs = Vec::new();
    for si in 0..task.states.len() {
        for a in action_grid(task, si, grid_size) {
            for &t in &times {
                jobs.push((si, t, a.clone()));
            }
        }
    }
    let points = jobs
        .into_par_iter()
        .map(|(si, t, a)| {
            let s = &task.states[si].state;
            let j = field.eps_jacobian(&a, s, t)?;
            let lambda_eps = linalg::sym_eigmax(&j.view())?;
            let jf = sampler::ode_jacobian(field, sched, &a, s, t)?;
            Ok(ContractionPoint {
                state_index: si,
                t,
                action: a,
                lambda_eps,
                threshold: threshold_override.unwrap_or_else(|| sched.contraction_threshold(t)),
                lambda_flow: linalg::sym_eigmax(&jf.view())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = points.len() as f64;
    Ok(ContractionReport {
        mean_lambda_eps: points.iter().map(|p| p.lambda_eps).sum::<f64>() / n,
        mean_lambda_flow: points.iter().map(|p| p.lambda_flow).sum::<f64>() / n,
        satisfied_fraction: points.iter().filter(|p| p.satisfied()).count() as f64 / n,
        flow_contracting_fraction: points.iter().filter(|p| p.lambda_flow < 0.0).count() as f64 / n,
        points,
    })
}

/// How terminal actions are produced from seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub kind: SamplerKind,
    pub steps: usize,
}

pub fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Runs one flow from `seed`; DDPM draws its step noise from `rng`.
pub fn sample_one<F: EpsField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    s: &[f64],
    seed: &[f64],
    spec: SamplingSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let flow = match spec.kind {
        SamplerKind::Ddpm => {
            let d = sched.discretize(spec.steps)?;
            let noises: Vec<Vec<f64>> = (0..spec.steps).map(|_| standard_normal_vec(seed.len(), rng)).collect();
            sampler::sample_ddpm(field, &d, s, seed, &noises, false)?
        }
        kind => sampler::sample_deterministic(kind, field, sched, s, seed, spec.steps)?,
    };
    Ok(flow.terminal().to_vec())
}

/// Samples `n` `(state_index, terminal action)` pairs; states follow the task
/// weights. The stream of seeds depends only on `seed`, so different fields
/// are compared on identical seeds.
pub fn sample_field<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    task: &GmmTask,
    n: usize,
    spec: SamplingSpec,
    seed: u64,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rng = rng_stream(seed, 10);
    let jobs: Vec<(usize, Vec<f64>, u64)> = (0..n)
        .map(|i| {
            let si = task.sample_pair(&mut rng).state_index;
            (si, standard_normal_vec(task.d_a, &mut rng), i as u64)
        })
        .collect();
    jobs.into_par_iter()
        .map(|(si, z, i)| {
            let mut noise_rng = rng_stream(seed ^ 0x5eed_0000_0000_0000, 11 + i);
            let a = sample_one(field, sched, &task.states[si].state, &z, spec, &mut noise_rng)?;
            Ok((si, a))
        })
        .collect()
}

/// Reference samples from the task with the same state draws as
/// [`sample_field`] at the same seed.
pub fn sample_task(task: &GmmTask, n: usize, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut state_rng = rng_stream(seed, 10);
    let mut rng = rng_stream(seed, 12);
    (0..n)
        .map(|_| {
            let si = task.sample_pair(&mut state_rng).state_index;
            let _ = standard_normal_vec(task.d_a, &mut state_rng);
            (si, task.sample_action(si, &mut rng))
        })
        .collect()
}

/// Energy distance per state, weighted by the task's state weights.
pub fn weighted_energy_distance(
    task: &GmmTask,
    model: &[(usize, Vec<f64>)],
    reference: &[(usize, Vec<f64>)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for (si, st) in task.states.iter().enumerate() {
        let x: Vec<Vec<f64>> = model.iter().filter(|(s, _)| *s == si).map(|(_, a)| a.clone()).collect();
        let y: Vec<Vec<f64>> = reference.iter().filter(|(s, _)| *s == si).map(|(_, a)| a.clone()).collect();
        if x.is_empty() || y.is_empty() {
            continue;
        }
        total += st.weight * energy_distance(&x, &y)?;
        weight += st.weight;
    }
    if weight == 0.0 {
        return Err(Error::InvalidArgument("no state has both model and reference samples".into()));
    }
    Ok(total / weight)
}

/// Fraction of task modes that receive at least 1% of their state's samples.
pub fn mode_coverage(task: &GmmTask, samples: &[(usize, Vec<f64>)]) -> f64 {
    let mut covered = 0;
    for (si, st) in task.states.iter().enumerate() {
        let mut counts = vec![0usize; st.components.len()];
        let mut n = 0usize;
        for (_, a) in samples.iter().filter(|(s, _)| *s == si) {
            counts[task.nearest_mode(a, si).0] += 1;
            n += 1;
        }
        covered += counts.iter().filter(|&&c| n > 0 && c * 100 >= n).count();
    }
    covered as f64 / task.num_modes() as f64
}

/// Per mode, the mean squared distance of the samples assigned to it from the
/// mode mean; the median over modes that received samples.
pub fn within_mode_variance(task: &GmmTask, samples: &[(usize, Vec<f64>)]) -> f64 {
    let mut per_mode = Vec::new();
    for (si, st) in task.states.iter().enumerate() {
        let mut sums = vec![(0.0, 0usize); st.components.len()];
        for (_, a) in samples.iter().filter(|(s, _)| *s == si) {
            let (k, d) = task.nearest_mode(a, si);
            sums[k].0 += d * d;
            sums[k].1 += 1;
        }
        per_mode.extend(sums.iter().filter(|(_, c)| *c > 0).map(|(s, c)| s / *c as f64));
    }
    median(&per_mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSensitivity {
    /// `||a_0^1 - a_0^2||` for each pair.
    pub distances: Vec<f64>,
    /// `||a_1^1 - a_1^2||` for each pair.
    pub seed_distances: Vec<f64>,
    pub median_distance: f64,
    pub within_mode_variance: f64,
    pub gronwall: Vec<GronwallRecord>,
    /// Linearized growth of each pair's seed difference.
    pub observed_ratios: Vec<f64>,
}

/// Pairs of independent seeds at the fixed state `s`. With `gronwall_steps > 0`
/// each pair also gets a Gronwall audit along the first flow in the direction
/// of the seed difference.
#[allow(clippy::too_many_arguments)]
pub fn seed_sensitivity<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    task: &GmmTask,
    state_index: usize,
    n_pairs: usize,
    spec: SamplingSpec,
    gronwall_steps: usize,
    seed: u64,
) -> Result<SeedSensitivity> {
    let s = task.states[state_index].state.clone();
    let mut rng = rng_stream(seed, 20);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n_pairs)
        .map(|_| (standard_normal_vec(task.d_a, &mut rng), standard_normal_vec(task.d_a, &mut rng)))
        .collect();
    let results = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (z1, z2))| {
            let mut r = rng_stream(seed, 21 + i as u64);
            let a1 = sample_one(field, sched, &s, z1, spec, &mut r)?;
            let a2 = sample_one(field, sched, &s, z2, spec, &mut r)?;
            let audit = if gronwall_steps > 0 {
                let delta: Vec<f64> = z2.iter().zip(z1).map(|(x, y)| x - y).collect();
                Some(sampler::gronwall_audit(field, sched, &s, z1, &delta, gronwall_steps)?)
            } else {
                None
            };
            Ok((a1, a2, audit))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut distances = Vec::new();
    let mut seed_distances = Vec::new();
    let mut terminals = Vec::new();
    let mut gronwall = Vec::new();
    let mut observed_ratios = Vec::new();
    for ((a1, a2, audit), (z1, z2)) in results.into_iter().zip(&pairs) {
        let d: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x - y).collect();
        let dz: Vec<f64> = z1.iter().zip(z2).map(|(x, y)| x - y).collect();
        distances.push(linalg::norm2(&d));
        seed_distances.push(linalg::norm2(&dz));
        terminals.push((state_index, a1));
        terminals.push((state_index, a2));
        if let Some(a) = audit {
            gronwall.push(a.record);
            observed_ratios.push(a.observed_ratio);
        }
    }
    Ok(SeedSensitivity {
        median_distance: median(&distances),
        within_mode_variance: within_mode_variance(task, &terminals),
        distances,
        seed_distances,
        gronwall,
        observed_ratios,
    })
}

impl SeedSensitivity {
    pub fn to_table(&self, meta: &RunMeta) -> Table {
        let mut t = header_with_meta(&[
            "pair",
            "seed_distance",
            "terminal_distance",
            "bound_factor",
            "observed_ratio",
            "eta_effective",
            "within_mode_variance",
        ]);
        for i in 0..self.distances.len() {
            let g = self.gronwall.get(i);
            t.push(with_meta(
                vec![
                    i.to_string(),
                    num(self.seed_distances[i]),
                    num(self.distances[i]),
                    g.map_or(String::new(), |g| num(g.bound_factor)),
                    self.observed_ratios.get(i).map_or(String::new(), |r| num(*r)),
                    g.map_or(String::new(), |g| num(g.eta_effective)),
                    num(self.within_mode_variance),
                ],
                meta,
            ));
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRow {
    pub model: String,
    pub steps: usize,
    pub energy_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSweep {
    pub rows: Vec<SolverRow>,
    /// `metric(min steps) - metric(max steps)` per model, when two or more
    /// step counts were run.
    pub degradation: Vec<(String, Option<f64>)>,
}

impl SolverSweep {
    pub fn degradation_of(&self, model: &str) -> Option<f64> {
        self.degradation.iter().find(|(m, _)| m == model).and_then(|(_, d)| *d)
    }

    pub fn to_table(&self, meta: &RunMeta) -> Table {
        let mut t = header_with_meta(&["model", "steps", "energy_distance", "degradation"]);
        for r in &self.rows {
            let deg = self.degradation_of(&r.model).map_or(String::new(), num);
            t.push(with_meta(vec![r.model.clone(), r.steps.to_string(), num(r.energy_distance), deg], meta));
        }
        t
    }
}

/// Energy distance to fresh task samples at each step count, for each named
/// field, all on the same seeds.
pub fn solver_sweep(
    fields: &[(&str, &(dyn EpsField + Sync))],
    sched: &NoiseSchedule,
    task: &GmmTask,
    steps_list: &[usize],
    kind: SamplerKind,
    n_samples: usize,
    seed: u64,
) -> Result<SolverSweep> {
    if steps_list.is_empty() {
        return Err(Error::InvalidArgument("empty step list".into()));
    }
    let reference = sample_task(task, n_samples, seed);
    let mut rows = Vec::new();
    let mut degradation = Vec::new();
    let lo = *steps_list.iter().min().expect("non-empty");
    let hi = *steps_list.iter().max().expect("non-empty");
    for (name, field) in fields {
        let mut at = std::collections::BTreeMap::new();
        for &steps in steps_list {
            let model = sample_field(*field, sched, task, n_samples, SamplingSpec { kind, steps }, seed)?;
            let ed = weighted_energy_distance(task, &model, &reference)?;
            at.insert(steps, ed);
            rows.push(SolverRow {
                model: name.to_string(),
                steps,
                energy_distance: ed,
            });
        }
        degradation.push((name.to_string(), (lo != hi).then(|| at[&lo] - at[&hi])));
    }
    Ok(SolverSweep { rows, degradation })
}

/// How a trained model is scored in the sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub sampling: SamplingSpec,
    pub n_samples: usize,
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            sampling: SamplingSpec {
                kind: SamplerKind::Dpm2m,
                steps: 25,
            },
            n_samples: 1000,
            grid_size: 9,
            seed: 12345,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub energy_distance: f64,
    pub mean_lambda_eps: f64,
    pub coverage: f64,
    pub within_mode_variance: f64,
}

pub fn score_model<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    task: &GmmTask,
    eval: &EvalSpec,
) -> Result<ModelScore> {
    let samples = sample_field(field, sched, task, eval.n_samples, eval.sampling, eval.seed)?;
    let reference = sample_task(task, eval.n_samples, eval.seed);
    let report = contraction_report(field, sched, task, eval.grid_size, None)?;
    Ok(ModelScore {
        energy_distance: weighted_energy_distance(task, &samples, &reference)?,
        mean_lambda_eps: report.mean_lambda_eps,
        coverage: mode_coverage(task, &samples),
        within_mode_variance: within_mode_variance(task, &samples),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// `gamma` for gamma sweeps, the data fraction for data sweeps.
    pub axis: f64,
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    /// `Err` text when training or scoring failed.
    pub result: std::result::Result<ModelScore, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis_name: String,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn to_table(&self) -> Table {
        let mut t = header_with_meta(&[
            &self.axis_name,
            "model",
            "energy_distance",
            "mean_lambda_eps",
            "mode_coverage",
            "within_mode_variance",
            "status",
        ]);
        for c in &self.cells {
            let meta = RunMeta::new(c.config_hash.clone(), c.seed);
            let cells = match &c.result {
                Ok(s) => vec![
                    num(s.energy_distance),
                    num(s.mean_lambda_eps),
                    num(s.coverage),
                    num(s.within_mode_variance),
                    "ok".to_string(),
                ],
                Err(e) => vec![String::new(), String::new(), String::new(), String::new(), format!("failed: {}", e.replace(',', ";"))],
            };
            let mut row = vec![num(c.axis), c.model.clone()];
            row.extend(cells);
            t.push(with_meta(row, &meta));
        }
        t
    }

    pub fn score(&self, axis: f64, model: &str, seed: u64) -> Option<&ModelScore> {
        self.cells
            .iter()
            .find(|c| c.axis == axis && c.model == model && c.seed == seed)
            .and_then(|c| c.result.as_ref().ok())
    }
}

/// Receives every trained sweep cell: its config, model label and output.
pub type RunSink<'a> = &'a (dyn Fn(&TrainConfig, &str, &train::TrainOutput) -> Result<()> + Sync);

fn run_cell(
    cfg: &TrainConfig,
    model: &str,
    task: &GmmTask,
    eval: &EvalSpec,
    sink: Option<RunSink>,
) -> std::result::Result<ModelScore, String> {
    let out = train::train(cfg, task).map_err(|e| e.to_string())?;
    if let Some(sink) = sink {
        sink(cfg, model, &out).map_err(|e| e.to_string())?;
    }
    let net = out.checkpoint.ema_network().map_err(|e| e.to_string())?;
    score_model(&net, &cfg.schedule, task, eval).map_err(|e| e.to_string())
}

/// Trains and scores one model per `(gamma, seed)`; failures are recorded in
/// their cell and the sweep continues.
pub fn gamma_sweep(
    task: &GmmTask,
    gammas: &[f64],
    cfg: &TrainConfig,
    seeds: &[u64],
    eval: &EvalSpec,
    sink: Option<RunSink>,
) -> Result<SweepReport> {
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("empty gamma list".into()));
    }
    let jobs: Vec<(f64, u64)> = gammas.iter().flat_map(|&g| seeds.iter().map(move |&s| (g, s))).collect();
    let cells = jobs
        .into_par_iter()
        .map(|(g, seed)| {
            let c = TrainConfig {
                rng_seed: seed,
                ..train::with_gamma(cfg, g)
            };
            SweepCell {
                axis: g,
                model: "gamma".into(),
                seed,
                config_hash: c.hash(),
                result: run_cell(&c, "gamma", task, eval, sink),
            }
        })
        .collect();
    Ok(SweepReport {
        axis_name: "gamma".into(),
        cells,
    })
}

/// Baseline (`gamma = 0`) and contractive (`contractive_gamma`) models per
/// `(fraction, seed)`.
pub fn data_fraction_sweep(
    task: &GmmTask,
    fractions: &[f64],
    cfg: &TrainConfig,
    contractive_gamma: f64,
    seeds: &[u64],
    eval: &EvalSpec,
    sink: Option<RunSink>,
) -> Result<SweepReport> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::InvalidArgument("fractions must be non-empty and lie in (0, 1]".into()));
    }
    let mut jobs = Vec::new();
    for &f in fractions {
        for &seed in seeds {
            jobs.push((f, "baseline", 0.0, seed));
            jobs.push((f, "contractive", contractive_gamma, seed));
        }
    }
    let cells = jobs
        .into_par_iter()
        .map(|(f, model, g, seed)| {
            let c = TrainConfig {
                rng_seed: seed,
                data_fraction: f,
                ..train::with_gamma(cfg, g)
            };
            SweepCell {
                axis: f,
                model: model.into(),
                seed,
                config_hash: c.hash(),
                result: run_cell(&c, model, task, eval, sink),
            }
        })
        .collect();
    Ok(SweepReport {
        axis_name: "fraction".into(),
        cells,
    })
}

/// Random orthogonal matrix by modified Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    loop {
        let mut q = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(rng));
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = q.column(j).dot(&q.column(k));
                let qk = q.column(k).to_owned();
                q.column_mut(j).scaled_add(-dot, &qk);
            }
            let norm: f64 = q.column(j).dot(&q.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).mapv_inplace(|x| x / norm);
        }
        if ok {
            return q;
        }
    }
}

/// `Q diag(values) Q^T`, symmetrized exactly.
pub fn symmetric_with_spectrum<R: Rng + ?Sized>(values: &[f64], rng: &mut R) -> Array2<f64> {
    let n = values.len();
    let q = random_orthogonal(n, rng);
    let d = Array2::from_diag(&ndarray::Array1::from(values.to_vec()));
    let m = q.dot(&d).dot(&q.t());
    (&m + &m.t()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiBenchRow {
    pub dim: usize,
    pub k: usize,
    pub power_error: f64,
    pub eigensolve_error: f64,
    pub power_seconds: f64,
    pub eigensolve_seconds: f64,
}

/// Shifted power iteration with `K` steps against the Jacobi eigensolver on
/// random symmetric matrices with known spectra (uniform on `[-1, 0.5]`, top
/// eigenvalue 1). Errors are maxima over `reps` matrices; times are totals.
pub fn power_iteration_benchmark(dims: &[usize], k_list: &[usize], reps: usize, seed: u64) -> Result<Vec<PiBenchRow>> {
    if dims.iter().any(|&d| d == 0 || d > 64) {
        return Err(Error::InvalidArgument("benchmark dimensions must lie in [1, 64]".into()));
    }
    let mut rows = Vec::new();
    for &dim in dims {
        let mut rng = rng_stream(seed, dim as u64);
        let mats: Vec<(Array2<f64>, f64)> = (0..reps)
            .map(|_| {
                let mut vals: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..0.5)).collect();
                vals[0] = 1.0;
                (symmetric_with_spectrum(&vals, &mut rng), 1.0)
            })
            .collect();
        let clock = Instant::now();
        let mut eig_err: f64 = 0.0;
        for (m, exact) in &mats {
            eig_err = eig_err.max((linalg::exact_eigmax(&m.view())? - exact).abs());
        }
        let eig_secs = clock.elapsed().as_secs_f64();
        for &k in k_list {
            let mut pi_rng = rng_stream(seed, 1000 + dim as u64 * 100 + k as u64);
            let clock = Instant::now();
            let mut err: f64 = 0.0;
            for (m, exact) in &mats {
                let est = contraction::lambda_max_estimate(&m.view(), k, &mut pi_rng)?;
                err = err.max((est.lambda_hat - exact).abs());
            }
            rows.push(PiBenchRow {
                dim,
                k,
                power_error: err,
                eigensolve_error: eig_err,
                power_seconds: clock.elapsed().as_secs_f64(),
                eigensolve_seconds: eig_secs,
            });
        }
    }
    Ok(rows)
}

/// Accuracy table (deterministic) and timing table (wall clock) for the
/// benchmark rows.
pub fn pi_bench_tables(rows: &[PiBenchRow], meta: &RunMeta) -> (Table, Table) {
    let mut acc = header_with_meta(&["dim", "k", "power_iteration_error", "eigensolve_error"]);
    let mut time = header_with_meta(&["dim", "k", "power_iteration_seconds", "eigensolve_seconds"]);
    for r in rows {
        acc.push(with_meta(
            vec![r.dim.to_string(), r.k.to_string(), num(r.power_error), num(r.eigensolve_error)],
            meta,
        ));
        time.push(with_meta(
            vec![r.dim.to_string(), r.k.to_string(), num(r.power_seconds), num(r.eigensolve_seconds)],
            meta,
        ));
    }
    (acc, time)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}
