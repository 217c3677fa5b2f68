//! Variance-preserving noise schedules.
//!
//! A schedule fixes `alpha(t)` and `sigma(t) = sqrt(1 - alpha(t)^2)` on `[0, 1]`
//! and, through them, the probability-flow coefficients
//!
//! * `f(t) = d log(alpha) / dt` (linear drift),
//! * `g(t)^2 = d sigma^2 / dt - 2 f(t) sigma^2`,
//! * `h(t) = g(t)^2 / (2 sigma(t))` (weight on the noise prediction).
//!
//! Every public function clamps `t` into `[t_eps, 1 - t_eps]` first, so the
//! `1 / sigma` singularity of `h` at `t = 0` is never reached.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearVp,
    CosineVp,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::LinearVp => "linear_vp",
            ScheduleKind::CosineVp => "cosine_vp",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_vp" => Ok(ScheduleKind::LinearVp),
            "cosine_vp" => Ok(ScheduleKind::CosineVp),
            other => Err(Error::config(
                "schedule.kind",
                format!("unknown schedule kind `{other}` (expected linear_vp or cosine_vp)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Only used by `linear_vp`.
    pub beta_min: f64,
    /// Only used by `linear_vp`.
    pub beta_max: f64,
    pub t_eps: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(0.1, 20.0)
    }
}

impl NoiseSchedule {
    pub const DEFAULT_T_EPS: f64 = 1e-3;

    pub fn linear(beta_min: f64, beta_max: f64) -> Self {
        NoiseSchedule {
            kind: ScheduleKind::LinearVp,
            beta_min,
            beta_max,
            t_eps: Self::DEFAULT_T_EPS,
        }
    }

    pub fn cosine() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::CosineVp,
            beta_min: 0.1,
            beta_max: 20.0,
            t_eps: Self::DEFAULT_T_EPS,
        }
    }

    pub fn with_t_eps(mut self, t_eps: f64) -> Self {
        self.t_eps = t_eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.1).contains(&self.t_eps) {
            return Err(Error::config("schedule.t_eps", "must lie in [0, 0.1)"));
        }
        if self.kind == ScheduleKind::LinearVp {
            if !(self.beta_min > 0.0) {
                return Err(Error::config("schedule.beta_min", "must be positive"));
            }
            if !(self.beta_max > self.beta_min) {
                return Err(Error::config(
                    "schedule.beta_max",
                    "must be greater than schedule.beta_min",
                ));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn clamp_t(&self, t: f64) -> f64 {
        t.clamp(self.t_eps, 1.0 - self.t_eps)
    }

    /// `log(alpha(t))` at an already clamped time.
    fn log_alpha_raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::LinearVp => {
                -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
            }
            ScheduleKind::CosineVp => {
                let s = COSINE_OFFSET;
                let phase = |u: f64| std::f64::consts::FRAC_PI_2 * (u + s) / (1.0 + s);
                phase(t).cos().ln() - phase(0.0).cos().ln()
            }
        }
    }

    fn drift_raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::LinearVp => -0.5 * (self.beta_min + t * (self.beta_max - self.beta_min)),
            ScheduleKind::CosineVp => {
                let s = COSINE_OFFSET;
                let k = std::f64::consts::FRAC_PI_2 / (1.0 + s);
                -k * (k * (t + s)).tan()
            }
        }
    }

    pub fn log_alpha(&self, t: f64) -> f64 {
        self.log_alpha_raw(self.clamp_t(t))
    }

    /// `(alpha_t, sigma_t)` with `alpha^2 + sigma^2 = 1`.
    pub fn alpha_sigma(&self, t: f64) -> (f64, f64) {
        let la = self.log_alpha(t);
        let alpha = la.exp();
        // 1 - alpha^2 without cancellation near t = 0
        let sigma2 = -(2.0 * la).exp_m1();
        (alpha, sigma2.max(0.0).sqrt())
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.alpha_sigma(t).0
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.alpha_sigma(t).1
    }

    /// Half log signal-to-noise ratio `log(alpha / sigma)`.
    pub fn half_log_snr(&self, t: f64) -> f64 {
        let (a, s) = self.alpha_sigma(t);
        a.ln() - s.ln()
    }

    /// Inverse of [`half_log_snr`](Self::half_log_snr) on `[t_eps, 1 - t_eps]`.
    pub fn time_from_half_log_snr(&self, lambda: f64) -> f64 {
        // alpha^2 = 1 / (1 + e^{-2 lambda})  =>  log alpha = -0.5 * log1p(e^{-2 lambda})
        let target = -0.5 * (-2.0 * lambda).exp().ln_1p();
        match self.kind {
            ScheduleKind::LinearVp => {
                // 0.25 d t^2 + 0.5 b t + target = 0 with d = beta_max - beta_min
                let d = self.beta_max - self.beta_min;
                let b = self.beta_min;
                let disc = 0.25 * b * b - d * target;
                let t = 2.0 * (-0.5 * b + disc.sqrt()) / d;
                self.clamp_t(t)
            }
            ScheduleKind::CosineVp => {
                let s = COSINE_OFFSET;
                let k = std::f64::consts::FRAC_PI_2 / (1.0 + s);
                let c0 = (k * s).cos();
                let t = (c0 * target.exp()).acos() / k - s;
                self.clamp_t(t)
            }
        }
    }

    /// `f(t) = d log(alpha_t) / dt`; strictly negative.
    pub fn drift_f(&self, t: f64) -> f64 {
        self.drift_raw(self.clamp_t(t))
    }

    /// `g(t)^2 = d sigma^2/dt - 2 f sigma^2`, evaluated analytically.
    pub fn diffusion_g2(&self, t: f64) -> f64 {
        let f = self.drift_f(t);
        let (alpha, sigma) = self.alpha_sigma(t);
        let dsigma2 = -2.0 * alpha * alpha * f;
        dsigma2 - 2.0 * f * sigma * sigma
    }

    /// `h(t) = g(t)^2 / (2 sigma_t)`.
    pub fn h_coeff(&self, t: f64) -> f64 {
        self.diffusion_g2(t) / (2.0 * self.sigma(t))
    }

    /// Upper bound `-f(t)/h(t)` on the largest symmetric eigenvalue of the
    /// noise-prediction Jacobian for the flow to contract at time `t`.
    pub fn contraction_threshold(&self, t: f64) -> f64 {
        -self.drift_f(t) / self.h_coeff(t)
    }

    /// `a_t = alpha_t a0 + sigma_t eps`.
    pub fn forward_perturb(&self, a0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
        if a0.len() != eps.len() {
            return Err(Error::DimensionMismatch {
                expected: a0.len(),
                got: eps.len(),
                context: "forward_perturb noise",
            });
        }
        let (alpha, sigma) = self.alpha_sigma(t);
        Ok(a0.iter().zip(eps).map(|(a, e)| alpha * a + sigma * e).collect())
    }

    /// Discrete DDPM/DDIM schedule whose marginals match this one on the grid
    /// `t_i = (i + 1) / T`.
    pub fn discretize(&self, num_steps: usize) -> Result<DiscreteSchedule> {
        if num_steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "discretization needs at least 2 steps, got {num_steps}"
            )));
        }
        let alpha_bars: Vec<f64> = (0..num_steps)
            .map(|i| {
                let a = self.alpha(DiscreteSchedule::time_of(i, num_steps));
                a * a
            })
            .collect();
        let mut alphas = Vec::with_capacity(num_steps);
        let mut posterior_sigmas = Vec::with_capacity(num_steps);
        for i in 0..num_steps {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            let alpha = alpha_bars[i] / prev;
            alphas.push(alpha);
            let var = (1.0 - prev) / (1.0 - alpha_bars[i]) * (1.0 - alpha);
            posterior_sigmas.push(var.max(0.0).sqrt());
        }
        Ok(DiscreteSchedule {
            num_steps,
            alphas,
            alpha_bars,
            posterior_sigmas,
        })
    }
}

/// Per-step quantities for the discrete reverse chains. Index `i` corresponds
/// to continuous time `(i + 1) / T`; the implicit index `-1` has `alpha_bar = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    pub num_steps: usize,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub posterior_sigmas: Vec<f64>,
}

impl DiscreteSchedule {
    pub fn time_of(index: usize, num_steps: usize) -> f64 {
        (index + 1) as f64 / num_steps as f64
    }

    pub fn time(&self, index: usize) -> f64 {
        Self::time_of(index, self.num_steps)
    }

    /// `alpha_bar` one step closer to the data; 1 below index 0.
    pub fn alpha_bar_prev(&self, index: usize) -> f64 {
        if index == 0 {
            1.0
        } else {
            self.alpha_bars[index - 1]
        }
    }
}
