//! Denoising score matching with the contraction penalty, Adam, EMA and run
//! logging.
//!
//! Randomness is split into independent ChaCha streams derived from one seed
//! (network init, data and noise, power iteration, data pool, logging), so a
//! run with `gamma = 0` consumes exactly the same data and noise as a run that
//! never heard of the penalty.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::ConfigDoc;
use crate::contraction::{self, ContractionConfig};
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, ScoreNetwork};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::toyworld::GmmTask;

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_POWER: u64 = 2;
const STREAM_POOL: u64 = 3;
const STREAM_LOG: u64 = 4;

/// Independent random stream `id` of `seed`.
pub fn rng_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Built-in task name or path to a task file.
    pub task: String,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_rate: f64,
    pub rng_seed: u64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub eval_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Fraction of `data_pool_size` kept as a fixed training pool; 1 streams
    /// fresh samples every step.
    pub data_fraction: f64,
    pub data_pool_size: usize,
    pub contraction: ContractionConfig,
    pub schedule: NoiseSchedule,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: "t2".into(),
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_rate: 0.999,
            rng_seed: 0,
            grad_clip: 10.0,
            eval_every: 100,
            checkpoint_every: 0,
            data_fraction: 1.0,
            data_pool_size: 10_000,
            contraction: ContractionConfig::default(),
            schedule: NoiseSchedule::default(),
            network: NetworkConfig::default(),
        }
    }
}

/// Every key understood by [`TrainConfig::from_doc`].
pub const CONFIG_KEYS: &[&str] = &[
    "task",
    "schedule.kind",
    "schedule.beta_min",
    "schedule.beta_max",
    "schedule.t_eps",
    "network.hidden",
    "network.time_embed_dim",
    "network.activation",
    "network.residual",
    "network.zero_init_output",
    "contraction.gamma",
    "contraction.beta",
    "contraction.loss_type",
    "contraction.num_pi",
    "contraction.contr_steps",
    "contraction.threshold_override",
    "train.steps",
    "train.batch_size",
    "train.learning_rate",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.ema_rate",
    "train.seed",
    "train.grad_clip",
    "train.eval_every",
    "train.checkpoint_every",
    "data.fraction",
    "data.pool_size",
];

impl TrainConfig {
    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        doc.reject_unknown(CONFIG_KEYS)?;
        let d = TrainConfig::default();
        let kind: ScheduleKind = doc.parse_or("schedule.kind", d.schedule.kind)?;
        let base = match kind {
            ScheduleKind::LinearVp => NoiseSchedule::default(),
            ScheduleKind::CosineVp => NoiseSchedule::cosine(),
        };
        let schedule = NoiseSchedule {
            kind,
            beta_min: doc.parse_or("schedule.beta_min", base.beta_min)?,
            beta_max: doc.parse_or("schedule.beta_max", base.beta_max)?,
            t_eps: doc.parse_or("schedule.t_eps", base.t_eps)?,
        };
        let network = NetworkConfig {
            hidden: doc.list_or("network.hidden", d.network.hidden.clone())?,
            time_embed_dim: doc.parse_or("network.time_embed_dim", d.network.time_embed_dim)?,
            activation: doc.parse_or("network.activation", d.network.activation)?,
            residual: doc.parse_or("network.residual", d.network.residual)?,
            zero_init_output: doc.parse_or("network.zero_init_output", d.network.zero_init_output)?,
        };
        let contraction = ContractionConfig {
            gamma: doc.parse_or("contraction.gamma", d.contraction.gamma)?,
            beta: doc.parse_or("contraction.beta", d.contraction.beta)?,
            loss_type: doc.parse_or("contraction.loss_type", d.contraction.loss_type)?,
            num_pi: doc.parse_or("contraction.num_pi", d.contraction.num_pi)?,
            contr_steps: doc.parse_or("contraction.contr_steps", d.contraction.contr_steps)?,
            threshold_override: doc.parse_opt("contraction.threshold_override")?,
        };
        let cfg = TrainConfig {
            task: doc.get("task").unwrap_or(&d.task).to_string(),
            steps: doc.parse_or("train.steps", d.steps)?,
            batch_size: doc.parse_or("train.batch_size", d.batch_size)?,
            learning_rate: doc.parse_or("train.learning_rate", d.learning_rate)?,
            adam_beta1: doc.parse_or("train.adam_beta1", d.adam_beta1)?,
            adam_beta2: doc.parse_or("train.adam_beta2", d.adam_beta2)?,
            adam_eps: doc.parse_or("train.adam_eps", d.adam_eps)?,
            ema_rate: doc.parse_or("train.ema_rate", d.ema_rate)?,
            rng_seed: doc.parse_or("train.seed", d.rng_seed)?,
            grad_clip: doc.parse_or("train.grad_clip", d.grad_clip)?,
            eval_every: doc.parse_or("train.eval_every", d.eval_every)?,
            checkpoint_every: doc.parse_or("train.checkpoint_every", d.checkpoint_every)?,
            data_fraction: doc.parse_or("data.fraction", d.data_fraction)?,
            data_pool_size: doc.parse_or("data.pool_size", d.data_pool_size)?,
            contraction,
            schedule,
            network,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config as a document that [`from_doc`](Self::from_doc) parses back
    /// to an equal value.
    pub fn to_doc(&self) -> ConfigDoc {
        let mut doc = ConfigDoc::default();
        let hidden: Vec<String> = self.network.hidden.iter().map(|h| h.to_string()).collect();
        doc.set("task", self.task.clone());
        doc.set("schedule.kind", self.schedule.kind.as_str());
        doc.set("schedule.beta_min", self.schedule.beta_min.to_string());
        doc.set("schedule.beta_max", self.schedule.beta_max.to_string());
        doc.set("schedule.t_eps", self.schedule.t_eps.to_string());
        doc.set("network.hidden", hidden.join(", "));
        doc.set("network.time_embed_dim", self.network.time_embed_dim.to_string());
        doc.set("network.activation", self.network.activation.as_str());
        doc.set("network.residual", self.network.residual.to_string());
        doc.set("network.zero_init_output", self.network.zero_init_output.to_string());
        doc.set("contraction.gamma", self.contraction.gamma.to_string());
        doc.set("contraction.beta", self.contraction.beta.to_string());
        doc.set("contraction.loss_type", self.contraction.loss_type.as_str());
        doc.set("contraction.num_pi", self.contraction.num_pi.to_string());
        doc.set("contraction.contr_steps", self.contraction.contr_steps.to_string());
        if let Some(th) = self.contraction.threshold_override {
            doc.set("contraction.threshold_override", th.to_string());
        }
        doc.set("train.steps", self.steps.to_string());
        doc.set("train.batch_size", self.batch_size.to_string());
        doc.set("train.learning_rate", self.learning_rate.to_string());
        doc.set("train.adam_beta1", self.adam_beta1.to_string());
        doc.set("train.adam_beta2", self.adam_beta2.to_string());
        doc.set("train.adam_eps", self.adam_eps.to_string());
        doc.set("train.ema_rate", self.ema_rate.to_string());
        doc.set("train.seed", self.rng_seed.to_string());
        doc.set("train.grad_clip", self.grad_clip.to_string());
        doc.set("train.eval_every", self.eval_every.to_string());
        doc.set("train.checkpoint_every", self.checkpoint_every.to_string());
        doc.set("data.fraction", self.data_fraction.to_string());
        doc.set("data.pool_size", self.data_pool_size.to_string());
        doc
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.contraction.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("train.adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("train.adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be > 0"));
        }
        if !(0.9..1.0).contains(&self.ema_rate) {
            return Err(Error::config("train.ema_rate", "must lie in [0.9, 1)"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be positive"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::config("data.fraction", "must lie in (0, 1]"));
        }
        if self.data_fraction < 1.0 && self.data_pool_size == 0 {
            return Err(Error::config("data.pool_size", "must be positive when data.fraction < 1"));
        }
        Ok(())
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_doc().to_canonical_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Size of the fixed training pool, or `None` for streaming data.
    pub fn pool_len(&self) -> Option<usize> {
        (self.data_fraction < 1.0)
            .then(|| ((self.data_fraction * self.data_pool_size as f64).round() as usize).max(1))
    }
}

/// Resolves a task name (`t1`, `t2`, `t3`) or a task-file path relative to `base`.
pub fn resolve_task(spec: &str, base: Option<&Path>) -> Result<GmmTask> {
    if let Some(task) = GmmTask::builtin(spec) {
        return Ok(task);
    }
    let path = match base {
        Some(b) if Path::new(spec).is_relative() => b.join(spec),
        _ => Path::new(spec).to_path_buf(),
    };
    if !path.exists() {
        return Err(Error::config(
            "task",
            format!("`{spec}` is neither a built-in task (t1, t2, t3) nor an existing file"),
        ));
    }
    GmmTask::load(&path)
}

/// A batch of clean pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub a0: Array2<f64>,
    pub s: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.a0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a0.nrows() == 0
    }

    pub fn sample<R: Rng + ?Sized>(task: &GmmTask, n: usize, rng: &mut R) -> Self {
        let mut a0 = Array2::zeros((n, task.d_a));
        let mut s = Array2::zeros((n, task.d_s));
        for i in 0..n {
            let p = task.sample_pair(rng);
            a0.row_mut(i).assign(&ndarray::ArrayView1::from(&p.action));
            s.row_mut(i).assign(&ndarray::ArrayView1::from(&p.state));
        }
        Batch { a0, s }
    }

    /// Rows `idx` of `self`.
    pub fn select(&self, idx: &[usize]) -> Self {
        Batch {
            a0: self.a0.select(Axis(0), idx),
            s: self.s.select(Axis(0), idx),
        }
    }
}

/// Diffusion times and Gaussian noise for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<f64>,
    pub eps: Array2<f64>,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(sched: &NoiseSchedule, n: usize, d_a: usize, rng: &mut R) -> Self {
        let (lo, hi) = (sched.t_eps, 1.0 - sched.t_eps);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let eps = Array2::from_shape_fn((n, d_a), |_| StandardNormal.sample(rng));
        NoiseDraw { t, eps }
    }

    /// `a_t = alpha_t a0 + sigma_t eps`, row by row.
    pub fn perturb(&self, sched: &NoiseSchedule, a0: &Array2<f64>) -> Array2<f64> {
        let mut out = a0.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (alpha, sigma) = sched.alpha_sigma(self.t[i]);
            row *= alpha;
            row.scaled_add(sigma, &self.eps.row(i));
        }
        out
    }
}

fn require_nonempty(batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    Ok(())
}

/// Denoising loss with an explicit noise draw.
pub fn dsm_loss_with(net: &ScoreNetwork, sched: &NoiseSchedule, batch: &Batch, noise: &NoiseDraw) -> Result<f64> {
    require_nonempty(batch)?;
    let a_t = noise.perturb(sched, &batch.a0);
    let pred = net.forward_batch(&a_t.view(), &batch.s.view(), &noise.t)?;
    let loss = (&pred - &noise.eps).mapv(|x| x * x).sum() / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    Ok(loss)
}

/// `mean ||eps_hat(alpha a0 + sigma eps, s, t) - eps||^2` with fresh `t`, `eps`.
pub fn dsm_loss<R: Rng + ?Sized>(net: &ScoreNetwork, sched: &NoiseSchedule, batch: &Batch, rng: &mut R) -> Result<f64> {
    let noise = NoiseDraw::sample(sched, batch.len(), net.d_a, rng);
    dsm_loss_with(net, sched, batch, &noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dsm: f64,
    pub contraction: f64,
    pub total: f64,
    /// Mean estimated `lambda_max(sym J_eps)` over the gated samples.
    pub mean_lambda_hat: Option<f64>,
    pub gated: usize,
}

/// Total loss and its parameter gradient on a fixed batch and noise draw.
/// The power-iteration stream is touched only when `gamma > 0`.
pub fn loss_and_grad<R: Rng + ?Sized>(
    net: &ScoreNetwork,
    sched: &NoiseSchedule,
    batch: &Batch,
    noise: &NoiseDraw,
    cfg: &ContractionConfig,
    pi_rng: &mut R,
) -> Result<(LossBreakdown, Vec<f64>)> {
    require_nonempty(batch)?;
    let b = batch.len() as f64;
    let a_t = noise.perturb(sched, &batch.a0);
    let penalize = cfg.gamma > 0.0;
    let ev = net.evaluate(&a_t.view(), &batch.s.view(), &noise.t, penalize)?;
    let resid = &ev.values - &noise.eps;
    let dsm = resid.mapv(|x| x * x).sum() / b;
    let value_bar = resid * (2.0 / b);
    let mut out = LossBreakdown {
        dsm,
        contraction: 0.0,
        total: dsm,
        mean_lambda_hat: None,
        gated: 0,
    };
    let mut tangent_bar = Vec::new();
    if penalize {
        let jacs: Vec<Array2<f64>> = (0..ev.batch_size()).map(|i| ev.jacobian(i)).collect();
        let terms = contraction::contraction_terms(&jacs, &noise.t, sched, cfg, pi_rng)?;
        out.contraction = terms.loss;
        out.total = dsm + cfg.gamma * terms.loss;
        out.gated = terms.gated;
        out.mean_lambda_hat = (terms.gated > 0).then(|| terms.mean_lambda_hat());
        // tangent k holds column k of each Jacobian
        tangent_bar = (0..net.d_a)
            .map(|k| {
                let mut m = Array2::zeros((ev.batch_size(), net.d_a));
                for (i, bar) in terms.jacobian_bars.iter().enumerate() {
                    for r in 0..net.d_a {
                        m[[i, r]] = cfg.gamma * bar[[r, k]];
                    }
                }
                m
            })
            .collect();
    }
    if !out.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grad = net.backward(&ev, &value_bar, &tangent_bar)?;
    Ok((out, grad))
}

/// `dsm + gamma * contraction` with fresh noise from `rng`.
pub fn total_loss<R: Rng + ?Sized, P: Rng + ?Sized>(
    net: &ScoreNetwork,
    sched: &NoiseSchedule,
    batch: &Batch,
    cfg: &ContractionConfig,
    rng: &mut R,
    pi_rng: &mut P,
) -> Result<LossBreakdown> {
    let noise = NoiseDraw::sample(sched, batch.len(), net.d_a, rng);
    let dsm = dsm_loss_with(net, sched, batch, &noise)?;
    if cfg.gamma == 0.0 {
        return Ok(LossBreakdown {
            dsm,
            contraction: 0.0,
            total: dsm,
            mean_lambda_hat: None,
            gated: 0,
        });
    }
    let a_t = noise.perturb(sched, &batch.a0);
    let terms = contraction::batch_contraction_loss(net, &a_t.view(), &batch.s.view(), &noise.t, sched, cfg, pi_rng)?;
    Ok(LossBreakdown {
        dsm,
        contraction: terms.loss,
        total: dsm + cfg.gamma * terms.loss,
        mean_lambda_hat: (terms.gated > 0).then(|| terms.mean_lambda_hat()),
        gated: terms.gated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    crate::field::check_dim(params.len(), grads.len(), "adam gradient")?;
    crate::field::check_dim(params.len(), state.m.len(), "adam state")?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// `ema <- rate ema + (1 - rate) params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], rate: f64) -> Result<()> {
    crate::field::check_dim(ema.len(), params.len(), "ema parameters")?;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("ema rate {rate} outside [0, 1)")));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        *e = rate * *e + (1.0 - rate) * p;
    }
    Ok(())
}

/// Rescales `grads` to global norm `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub dsm_loss: f64,
    pub contraction_loss: f64,
    pub total_loss: f64,
    pub mean_lambda_hat: Option<f64>,
    pub gated: usize,
    pub grad_norm: f64,
    /// Clipping events since the previous record.
    pub clipped: usize,
}

/// Per-step records in step order. Wall time is kept separately in
/// [`TrainOutput::timings`] so that the log itself is reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn push(&mut self, rec: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < rec.step));
        self.records.push(rec);
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(RunLog { records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub step: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    pub timings: Vec<Timing>,
}

pub fn train(cfg: &TrainConfig, task: &GmmTask) -> Result<TrainOutput> {
    train_with(cfg, task, &mut |_| Ok(()))
}

/// Trains from scratch; `on_checkpoint` receives every intermediate
/// checkpoint (every `checkpoint_every` steps).
pub fn train_with(
    cfg: &TrainConfig,
    task: &GmmTask,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    task.validate()?;
    let sched = cfg.schedule;
    let mut init_rng = rng_stream(cfg.rng_seed, STREAM_INIT);
    let mut net = ScoreNetwork::with_rng(task.d_a, task.d_s, &cfg.network, &mut init_rng)?;
    let mut data_rng = rng_stream(cfg.rng_seed, STREAM_DATA);
    let mut pi_rng = rng_stream(cfg.rng_seed, STREAM_POWER);
    let mut log_rng = rng_stream(cfg.rng_seed, STREAM_LOG);
    let pool = cfg
        .pool_len()
        .map(|n| Batch::sample(task, n, &mut rng_stream(cfg.rng_seed, STREAM_POOL)));

    let hash = cfg.hash();
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let mut params = net.params_flat();
    let mut ema = params.clone();
    let mut state = AdamState::new(params.len());
    let mut log = RunLog::default();
    let mut timings = Vec::new();
    let mut clipped = 0usize;
    let started = Instant::now();

    let snapshot = |net: &ScoreNetwork, ema: &[f64], step: usize| {
        Checkpoint::from_parts(net, ema.to_vec(), sched, task.clone(), step, cfg.rng_seed, hash.clone())
    };

    for step in 1..=cfg.steps {
        let batch = match &pool {
            Some(p) => {
                let idx: Vec<usize> = (0..cfg.batch_size).map(|_| data_rng.random_range(0..p.len())).collect();
                p.select(&idx)
            }
            None => Batch::sample(task, cfg.batch_size, &mut data_rng),
        };
        let noise = NoiseDraw::sample(&sched, cfg.batch_size, task.d_a, &mut data_rng);
        let diverged = |what| Error::Diverged {
            step,
            what,
            last_good: Box::new(snapshot(&net, &ema, step - 1).expect("finite parameters")),
        };
        let (mut losses, mut grads) = match loss_and_grad(&net, &sched, &batch, &noise, &cfg.contraction, &mut pi_rng) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(diverged("loss")),
            Err(e) => return Err(e),
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged("gradient"));
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            clipped += 1;
        }
        adam_step(&mut params, &grads, &mut state, &adam)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(diverged("parameters"));
        }
        net.set_params_flat(&params)?;
        ema_update(&mut ema, &params, cfg.ema_rate)?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            if cfg.contraction.gamma == 0.0 {
                // the penalty is off, so estimate lambda_hat on the logged batch only
                let a_t = noise.perturb(&sched, &batch.a0);
                let probe = ContractionConfig { gamma: 1.0, ..cfg.contraction };
                let terms = contraction::batch_contraction_loss(
                    &net,
                    &a_t.view(),
                    &batch.s.view(),
                    &noise.t,
                    &sched,
                    &probe,
                    &mut log_rng,
                )?;
                losses.mean_lambda_hat = (terms.gated > 0).then(|| terms.mean_lambda_hat());
                losses.gated = terms.gated;
            }
            log.push(StepRecord {
                step,
                dsm_loss: losses.dsm,
                contraction_loss: losses.contraction,
                total_loss: losses.total,
                mean_lambda_hat: losses.mean_lambda_hat,
                gated: losses.gated,
                grad_norm,
                clipped,
            });
            clipped = 0;
            timings.push(Timing {
                step,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            on_checkpoint(&snapshot(&net, &ema, step)?)?;
        }
    }
    Ok(TrainOutput {
        checkpoint: snapshot(&net, &ema, cfg.steps)?,
        log,
        timings,
    })
}

/// `cfg` with the penalty weight replaced.
pub fn with_gamma(cfg: &TrainConfig, gamma: f64) -> TrainConfig {
    TrainConfig {
        contraction: ContractionConfig { gamma, ..cfg.contraction },
        ..cfg.clone()
    }
}
