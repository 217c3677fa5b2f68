//! Toy conditional action distributions with closed-form perturbed scores.
//!
//! For each state the clean action density is a mixture of Gaussians with
//! diagonal covariances. A VP forward kernel maps component `k` to
//! `N(alpha_t mu_k, alpha_t^2 Sigma_k + sigma_t^2 I)`, so the noisy density,
//! its score and the score Jacobian are all available in closed form.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dim, EpsField};
use crate::schedule::NoiseSchedule;

pub const TASK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub state: Vec<f64>,
    /// Probability of drawing this state.
    pub weight: f64,
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmTask {
    pub version: u32,
    pub name: String,
    pub d_a: usize,
    pub d_s: usize,
    pub states: Vec<TaskState>,
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub action: Vec<f64>,
    pub state: Vec<f64>,
    pub state_index: usize,
}

fn component(weight: f64, mean: &[f64], std: f64) -> Component {
    Component {
        weight,
        mean: mean.to_vec(),
        variance: vec![std * std; mean.len()],
    }
}

impl GmmTask {
    /// T1: one-dimensional Gaussian per state, two states.
    pub fn t1() -> Self {
        GmmTask {
            version: TASK_FORMAT_VERSION,
            name: "t1_gaussian_1d".into(),
            d_a: 1,
            d_s: 1,
            states: vec![
                TaskState {
                    state: vec![0.0],
                    weight: 0.5,
                    components: vec![component(1.0, &[-0.5], 0.3)],
                },
                TaskState {
                    state: vec![1.0],
                    weight: 0.5,
                    components: vec![component(1.0, &[1.0], 0.25)],
                },
            ],
        }
    }

    /// T2: four-mode two-dimensional mixture, single state.
    pub fn t2() -> Self {
        let modes = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        GmmTask {
            version: TASK_FORMAT_VERSION,
            name: "t2_four_modes_2d".into(),
            d_a: 2,
            d_s: 1,
            states: vec![TaskState {
                state: vec![0.0],
                weight: 1.0,
                components: modes.iter().map(|m| component(0.25, m, 0.15)).collect(),
            }],
        }
    }

    /// T3: two-mode two-dimensional mixture whose mode weights depend on the state.
    pub fn t3() -> Self {
        let left = [-1.0, 0.0];
        let right = [1.0, 0.0];
        GmmTask {
            version: TASK_FORMAT_VERSION,
            name: "t3_state_weighted_2d".into(),
            d_a: 2,
            d_s: 1,
            states: vec![
                TaskState {
                    state: vec![0.0],
                    weight: 0.5,
                    components: vec![component(0.8, &left, 0.2), component(0.2, &right, 0.2)],
                },
                TaskState {
                    state: vec![1.0],
                    weight: 0.5,
                    components: vec![component(0.2, &left, 0.2), component(0.8, &right, 0.2)],
                },
            ],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "t1" | "t1_gaussian_1d" => Some(Self::t1()),
            "t2" | "t2_four_modes_2d" => Some(Self::t2()),
            "t3" | "t3_state_weighted_2d" => Some(Self::t3()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TASK_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported task format version {}",
                self.version
            )));
        }
        if self.states.is_empty() {
            return Err(Error::InvalidArgument("task has no states".into()));
        }
        let total: f64 = self.states.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("state weights sum to {total}")));
        }
        for st in &self.states {
            check_dim(self.d_s, st.state.len(), "task state vector")?;
            let w: f64 = st.components.iter().map(|c| c.weight).sum();
            if st.components.is_empty() || (w - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "component weights of state {:?} sum to {w}",
                    st.state
                )));
            }
            for c in &st.components {
                check_dim(self.d_a, c.mean.len(), "component mean")?;
                check_dim(self.d_a, c.variance.len(), "component variance")?;
                if c.variance.iter().any(|v| !(*v > 0.0)) || c.weight < 0.0 {
                    return Err(Error::InvalidArgument(
                        "component variances must be positive and weights non-negative".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let task: GmmTask = serde_json::from_str(text)?;
        task.validate()?;
        Ok(task)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("task serializes")
    }

    /// Index of the state vector closest to `s`.
    pub fn state_index(&self, s: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, st) in self.states.iter().enumerate() {
            let d: f64 = st.state.iter().zip(s).map(|(x, y)| (x - y).powi(2)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn modes(&self, state_index: usize) -> Vec<Vec<f64>> {
        self.states[state_index].components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn num_modes(&self) -> usize {
        self.states.iter().map(|s| s.components.len()).sum()
    }

    fn pick<R: Rng + ?Sized>(weights: impl Iterator<Item = f64>, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, w) in weights.enumerate() {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Pair {
        let si = Self::pick(self.states.iter().map(|s| s.weight), rng);
        let action = self.sample_action(si, rng);
        Pair {
            action,
            state: self.states[si].state.clone(),
            state_index: si,
        }
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state_index: usize, rng: &mut R) -> Vec<f64> {
        let st = &self.states[state_index];
        let c = &st.components[Self::pick(st.components.iter().map(|c| c.weight), rng)];
        c.mean
            .iter()
            .zip(&c.variance)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }

    /// Per-component `(log weight + log N(a; m, C), gradient of the log
    /// normal, inverse variances)` of the noisy mixture.
    fn noisy_terms(
        &self,
        sched: &NoiseSchedule,
        a: &[f64],
        state_index: usize,
        t: f64,
    ) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
        let (alpha, sigma) = sched.alpha_sigma(t);
        self.states[state_index]
            .components
            .iter()
            .map(|c| {
                let mut logp = c.weight.ln();
                let mut grad = Vec::with_capacity(self.d_a);
                let mut inv = Vec::with_capacity(self.d_a);
                for i in 0..self.d_a {
                    let var = alpha * alpha * c.variance[i] + sigma * sigma;
                    let diff = a[i] - alpha * c.mean[i];
                    logp += -0.5 * (diff * diff / var + var.ln() + (2.0 * std::f64::consts::PI).ln());
                    grad.push(-diff / var);
                    inv.push(1.0 / var);
                }
                (logp, grad, inv)
            })
            .collect()
    }

    fn responsibilities(terms: &[(f64, Vec<f64>, Vec<f64>)]) -> (Vec<f64>, f64) {
        let m = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = terms.iter().map(|t| (t.0 - m).exp()).collect();
        let z: f64 = w.iter().sum();
        (w.iter().map(|x| x / z).collect(), m + z.ln())
    }

    /// `log p_t(a | s)`.
    pub fn log_density(&self, sched: &NoiseSchedule, a: &[f64], state_index: usize, t: f64) -> f64 {
        Self::responsibilities(&self.noisy_terms(sched, a, state_index, t)).1
    }

    /// `grad_a log p_t(a | s)`.
    pub fn oracle_score(&self, sched: &NoiseSchedule, a: &[f64], state_index: usize, t: f64) -> Vec<f64> {
        let terms = self.noisy_terms(sched, a, state_index, t);
        let (r, _) = Self::responsibilities(&terms);
        let mut score = vec![0.0; self.d_a];
        for (rk, (_, g, _)) in r.iter().zip(&terms) {
            for i in 0..self.d_a {
                score[i] += rk * g[i];
            }
        }
        score
    }

    /// `eps* = -sigma_t * score`.
    pub fn oracle_epsilon(&self, sched: &NoiseSchedule, a: &[f64], state_index: usize, t: f64) -> Vec<f64> {
        let sigma = sched.sigma(t);
        self.oracle_score(sched, a, state_index, t).into_iter().map(|x| -sigma * x).collect()
    }

    /// Hessian of `log p_t(a | s)` in `a`:
    /// `sum_k r_k (-C_k^{-1} + g_k g_k^T) - score score^T`.
    pub fn oracle_score_jacobian(
        &self,
        sched: &NoiseSchedule,
        a: &[f64],
        state_index: usize,
        t: f64,
    ) -> Array2<f64> {
        let d = self.d_a;
        let terms = self.noisy_terms(sched, a, state_index, t);
        let (r, _) = Self::responsibilities(&terms);
        let mut score = vec![0.0; d];
        let mut jac = Array2::zeros((d, d));
        for (rk, (_, g, inv)) in r.iter().zip(&terms) {
            for i in 0..d {
                score[i] += rk * g[i];
                jac[[i, i]] -= rk * inv[i];
                for k in 0..d {
                    jac[[i, k]] += rk * g[i] * g[k];
                }
            }
        }
        for i in 0..d {
            for k in 0..d {
                jac[[i, k]] -= score[i] * score[k];
            }
        }
        jac
    }

    /// Distance from `a` to the nearest clean mode mean of the given state.
    pub fn nearest_mode(&self, a: &[f64], state_index: usize) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.states[state_index].components.iter().enumerate() {
            let d = c.mean.iter().zip(a).map(|(m, x)| (m - x).powi(2)).sum::<f64>().sqrt();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }
}

/// The analytic noise prediction `eps*` of a task as a field.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub task: GmmTask,
    pub sched: NoiseSchedule,
}

impl EpsField for OracleField {
    fn action_dim(&self) -> usize {
        self.task.d_a
    }

    fn eps(&self, a: &[f64], s: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.task.d_a, a.len(), "oracle action")?;
        let si = self.task.state_index(s);
        Ok(self.task.oracle_epsilon(&self.sched, a, si, t))
    }

    fn eps_jacobian(&self, a: &[f64], s: &[f64], t: f64) -> Result<Array2<f64>> {
        check_dim(self.task.d_a, a.len(), "oracle action")?;
        let si = self.task.state_index(s);
        let sigma = self.sched.sigma(t);
        Ok(self.task.oracle_score_jacobian(&self.sched, a, si, t) * (-sigma))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn check_sets(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("energy distance needs non-empty sample sets".into()));
    }
    let d = x[0].len();
    for p in x.iter().chain(y) {
        check_dim(d, p.len(), "energy distance point")?;
    }
    Ok(())
}

fn cross_mean(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for a in x {
        for b in y {
            sum += dist(a, b);
        }
    }
    sum / (x.len() * y.len()) as f64
}

fn within_sum(x: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for i in 0..x.len() {
        for k in (i + 1)..x.len() {
            sum += dist(&x[i], &x[k]);
        }
    }
    2.0 * sum
}

/// Unbiased energy statistic `2 E|X-Y| - E|X-X'| - E|Y-Y'|` (within-sample
/// means over distinct pairs). Can be slightly negative under the null.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_sets(x, y)?;
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        if n < 2 {
            0.0
        } else {
            within_sum(s) / (n * (n - 1)) as f64
        }
    };
    Ok(2.0 * cross_mean(x, y) - within(x) - within(y))
}

/// V-statistic variant (within-sample means include the zero diagonal);
/// always non-negative and exactly 0 for identical sets.
pub fn energy_distance_v(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_sets(x, y)?;
    let within = |s: &[Vec<f64>]| within_sum(s) / (s.len() * s.len()) as f64;
    Ok((2.0 * cross_mean(x, y) - within(x) - within(y)).max(0.0))
}
