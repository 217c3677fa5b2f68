//! Reverse-time samplers and their Jacobians.
//!
//! Continuous samplers integrate the probability-flow ODE
//! `da/dt = f(t) a + h(t) eps(a, s, t)` from `t = 1` down to `t = t_eps` on a
//! grid of `N` points (`N - 1` steps). DDIM and DDPM run on a
//! [`DiscreteSchedule`] of `T` steps and end at `alpha_bar = 1`.
//! Samplers never draw randomness: seeds and DDPM noises come from the caller.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dim, EpsField};
use crate::linalg;
use crate::schedule::{DiscreteSchedule, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Euler,
    Dpm2m,
    Ddim,
    Ddpm,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Euler => "euler",
            SamplerKind::Dpm2m => "dpm2m",
            SamplerKind::Ddim => "ddim",
            SamplerKind::Ddpm => "ddpm",
        }
    }

    pub fn is_deterministic(self) -> bool {
        self != SamplerKind::Ddpm
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SamplerKind::Euler),
            "dpm2m" => Ok(SamplerKind::Dpm2m),
            "ddim" => Ok(SamplerKind::Ddim),
            "ddpm" => Ok(SamplerKind::Ddpm),
            other => Err(Error::config(
                "sampler.kind",
                format!("unknown sampler `{other}` (expected euler, dpm2m, ddim or ddpm)"),
            )),
        }
    }
}

/// A reverse trajectory in sampling order: `times[0] = 1` (the seed) down to
/// the clean end.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Jacobian of each transition `states[i] -> states[i + 1]`.
    pub per_step_jacobians: Option<Vec<Array2<f64>>>,
    pub seed: Vec<f64>,
    pub state: Vec<f64>,
    /// DDPM noise of each transition.
    pub noises: Option<Vec<Vec<f64>>>,
}

impl Flow {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("flow has at least one state")
    }
}

fn check_finite(a: &[f64], step: usize) -> Result<()> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState { step });
    }
    Ok(())
}

/// `F(a, t) = f(t) a + h(t) eps(a, s, t)`.
pub fn ode_rhs<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    a: &[f64],
    s: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let eps = field.eps(a, s, t)?;
    let (f, h) = (sched.drift_f(t), sched.h_coeff(t));
    Ok(a.iter().zip(&eps).map(|(x, e)| f * x + h * e).collect())
}

/// `J_F = f(t) I + h(t) J_eps`.
pub fn ode_jacobian<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    a: &[f64],
    s: &[f64],
    t: f64,
) -> Result<Array2<f64>> {
    let j = field.eps_jacobian(a, s, t)?;
    let n = j.nrows();
    Ok(Array2::<f64>::eye(n) * sched.drift_f(t) + j * sched.h_coeff(t))
}

/// Jacobian of the one-step clean estimate `(a - sigma eps) / alpha` in `a`.
pub fn x0_prediction_jacobian<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    a: &[f64],
    s: &[f64],
    t: f64,
) -> Result<Array2<f64>> {
    let j = field.eps_jacobian(a, s, t)?;
    let (alpha, sigma) = sched.alpha_sigma(t);
    let n = j.nrows();
    Ok((Array2::<f64>::eye(n) - j * sigma) / alpha)
}

pub fn x0_prediction<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    a: &[f64],
    s: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let eps = field.eps(a, s, t)?;
    let (alpha, sigma) = sched.alpha_sigma(t);
    Ok(a.iter().zip(&eps).map(|(x, e)| (x - sigma * e) / alpha).collect())
}

/// Uniform grid from 1 down to `t_eps` with `n` points.
pub fn uniform_time_grid(sched: &NoiseSchedule, n: usize) -> Vec<f64> {
    let end = sched.t_eps;
    (0..n)
        .map(|i| if i + 1 == n { end } else { 1.0 + (end - 1.0) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// Grid uniform in half-log-SNR between the clamped ends, reported with
/// nominal endpoints `1` and `t_eps`.
pub fn log_snr_time_grid(sched: &NoiseSchedule, n: usize) -> Vec<f64> {
    let l0 = sched.half_log_snr(1.0);
    let l1 = sched.half_log_snr(sched.t_eps);
    (0..n)
        .map(|i| {
            if i == 0 {
                1.0
            } else if i + 1 == n {
                sched.t_eps
            } else {
                sched.time_from_half_log_snr(l0 + (l1 - l0) * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

fn check_seed<F: EpsField + ?Sized>(field: &F, seed: &[f64], n: usize) -> Result<()> {
    check_dim(field.action_dim(), seed.len(), "sampler seed")?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("sampler needs at least 2 grid points, got {n}")));
    }
    Ok(())
}

/// Explicit Euler on the uniform grid: `a_next = a + (t_next - t) F(a, t)`.
pub fn sample_euler<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    s: &[f64],
    seed: &[f64],
    n: usize,
    record_jacobians: bool,
) -> Result<Flow> {
    check_seed(field, seed, n)?;
    let times = uniform_time_grid(sched, n);
    let mut states = vec![seed.to_vec()];
    let mut jacs = record_jacobians.then(Vec::new);
    for i in 0..n - 1 {
        let (t, t_next) = (times[i], times[i + 1]);
        let dt = t_next - t;
        let a = &states[i];
        let rhs = ode_rhs(field, sched, a, s, t)?;
        if let Some(j) = jacs.as_mut() {
            let jf = ode_jacobian(field, sched, a, s, t)?;
            j.push(Array2::<f64>::eye(a.len()) + jf * dt);
        }
        let next: Vec<f64> = a.iter().zip(&rhs).map(|(x, r)| x + dt * r).collect();
        check_finite(&next, i + 1)?;
        states.push(next);
    }
    Ok(Flow {
        times,
        states,
        per_step_jacobians: jacs,
        seed: seed.to_vec(),
        state: s.to_vec(),
        noises: None,
    })
}

/// Second-order multistep solver in data-prediction form on a grid uniform in
/// half-log-SNR; the first step is first order.
pub fn sample_dpm2m<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    s: &[f64],
    seed: &[f64],
    n: usize,
) -> Result<Flow> {
    check_seed(field, seed, n)?;
    let times = log_snr_time_grid(sched, n);
    let lambdas: Vec<f64> = times.iter().map(|&t| sched.half_log_snr(t)).collect();
    let mut states = vec![seed.to_vec()];
    let mut x0_hist: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 1..n {
        let prev = &states[i - 1];
        x0_hist.push(x0_prediction(field, sched, prev, s, times[i - 1])?);
        let (alpha_i, sigma_i) = sched.alpha_sigma(times[i]);
        let sigma_prev = sched.sigma(times[i - 1]);
        let h = lambdas[i] - lambdas[i - 1];
        let phi = (-h).exp_m1();
        let d: Vec<f64> = if i == 1 {
            x0_hist[0].clone()
        } else {
            let r = (lambdas[i - 1] - lambdas[i - 2]) / h;
            let (c1, c2) = (1.0 + 0.5 / r, 0.5 / r);
            x0_hist[i - 1].iter().zip(&x0_hist[i - 2]).map(|(x1, x2)| c1 * x1 - c2 * x2).collect()
        };
        let next: Vec<f64> = prev
            .iter()
            .zip(&d)
            .map(|(a, dx)| sigma_i / sigma_prev * a - alpha_i * phi * dx)
            .collect();
        check_finite(&next, i)?;
        states.push(next);
    }
    Ok(Flow {
        times,
        states,
        per_step_jacobians: None,
        seed: seed.to_vec(),
        state: s.to_vec(),
        noises: None,
    })
}

/// Deterministic DDIM update from discrete index `index` to `index - 1`.
pub fn ddim_step<F: EpsField + ?Sized>(
    field: &F,
    dsched: &DiscreteSchedule,
    a: &[f64],
    s: &[f64],
    index: usize,
) -> Result<Vec<f64>> {
    let ab = dsched.alpha_bars[index];
    let ab_prev = dsched.alpha_bar_prev(index);
    let eps = field.eps(a, s, dsched.time(index))?;
    Ok(a.iter()
        .zip(&eps)
        .map(|(x, e)| {
            let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e
        })
        .collect())
}

pub fn step_jacobian_ddim<F: EpsField + ?Sized>(
    field: &F,
    dsched: &DiscreteSchedule,
    a: &[f64],
    s: &[f64],
    index: usize,
) -> Result<Array2<f64>> {
    let ab = dsched.alpha_bars[index];
    let ab_prev = dsched.alpha_bar_prev(index);
    let j = field.eps_jacobian(a, s, dsched.time(index))?;
    let n = j.nrows();
    let ratio = (ab_prev / ab).sqrt();
    let coeff = (1.0 - ab_prev).sqrt() - ratio * (1.0 - ab).sqrt();
    Ok(Array2::<f64>::eye(n) * ratio + j * coeff)
}

/// Ancestral DDPM update with caller-supplied standard normal `xi`.
pub fn ddpm_step<F: EpsField + ?Sized>(
    field: &F,
    dsched: &DiscreteSchedule,
    a: &[f64],
    s: &[f64],
    index: usize,
    xi: &[f64],
) -> Result<Vec<f64>> {
    check_dim(a.len(), xi.len(), "ddpm noise")?;
    let alpha = dsched.alphas[index];
    let ab = dsched.alpha_bars[index];
    let sigma = dsched.posterior_sigmas[index];
    let eps = field.eps(a, s, dsched.time(index))?;
    let c = (1.0 - alpha) / (1.0 - ab).sqrt();
    Ok(a.iter()
        .zip(&eps)
        .zip(xi)
        .map(|((x, e), z)| (x - c * e) / alpha.sqrt() + sigma * z)
        .collect())
}

/// `(1/sqrt(alpha_t)) (I - ((1 - alpha_t)/sqrt(1 - alpha_bar_t)) J_eps)`; the
/// injected noise does not depend on `a_t`.
pub fn step_jacobian_ddpm<F: EpsField + ?Sized>(
    field: &F,
    dsched: &DiscreteSchedule,
    a: &[f64],
    s: &[f64],
    index: usize,
) -> Result<Array2<f64>> {
    let alpha = dsched.alphas[index];
    let ab = dsched.alpha_bars[index];
    let j = field.eps_jacobian(a, s, dsched.time(index))?;
    let n = j.nrows();
    let c = (1.0 - alpha) / (1.0 - ab).sqrt();
    Ok((Array2::<f64>::eye(n) - j * c) / alpha.sqrt())
}

fn discrete_times(dsched: &DiscreteSchedule) -> Vec<f64> {
    let mut times: Vec<f64> = (0..dsched.num_steps).rev().map(|i| dsched.time(i)).collect();
    times.push(0.0);
    times
}

pub fn sample_ddim<F: EpsField + ?Sized>(
    field: &F,
    dsched: &DiscreteSchedule,
    s: &[f64],
    seed: &[f64],
    record_jacobians: bool,
) -> Result<Flow> {
    check_seed(field, seed, dsched.num_steps)?;
    let mut states = vec![seed.to_vec()];
    let mut jacs = record_jacobians.then(Vec::new);
    for (step, index) in (0..dsched.num_steps).rev().enumerate() {
        let a = &states[step];
        if let Some(j) = jacs.as_mut() {
            j.push(step_jacobian_ddim(field, dsched, a, s, index)?);
        }
        let next = ddim_step(field, dsched, a, s, index)?;
        check_finite(&next, step + 1)?;
        states.push(next);
    }
    Ok(Flow {
        times: discrete_times(dsched),
        states,
        per_step_jacobians: jacs,
        seed: seed.to_vec(),
        state: s.to_vec(),
        noises: None,
    })
}

/// DDPM chain; `noises[k]` is used by the `k`-th transition in sampling order.
pub fn sample_ddpm<F: EpsField + ?Sized>(
    field: &F,
    dsched: &DiscreteSchedule,
    s: &[f64],
    seed: &[f64],
    noises: &[Vec<f64>],
    record_jacobians: bool,
) -> Result<Flow> {
    check_seed(field, seed, dsched.num_steps)?;
    check_dim(dsched.num_steps, noises.len(), "ddpm noise count")?;
    let mut states = vec![seed.to_vec()];
    let mut jacs = record_jacobians.then(Vec::new);
    for (step, index) in (0..dsched.num_steps).rev().enumerate() {
        let a = &states[step];
        if let Some(j) = jacs.as_mut() {
            j.push(step_jacobian_ddpm(field, dsched, a, s, index)?);
        }
        let next = ddpm_step(field, dsched, a, s, index, &noises[step])?;
        check_finite(&next, step + 1)?;
        states.push(next);
    }
    Ok(Flow {
        times: discrete_times(dsched),
        states,
        per_step_jacobians: jacs,
        seed: seed.to_vec(),
        state: s.to_vec(),
        noises: Some(noises.to_vec()),
    })
}

/// Ordered product of per-step Jacobians, latest step leftmost.
pub fn flow_jacobian(per_step: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = per_step
        .first()
        .ok_or_else(|| Error::InvalidArgument("flow Jacobian of an empty step list".into()))?;
    let n = linalg::ensure_square(&first.view())?;
    let mut acc = Array2::<f64>::eye(n);
    for j in per_step {
        if j.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: j.nrows(),
                context: "flow Jacobian step",
            });
        }
        acc = j.dot(&acc);
    }
    Ok(acc)
}

/// Deterministic sampler dispatch. `steps` is the grid size `N` for the
/// continuous samplers and the number of discrete steps `T` for DDIM.
pub fn sample_deterministic<F: EpsField + ?Sized>(
    kind: SamplerKind,
    field: &F,
    sched: &NoiseSchedule,
    s: &[f64],
    seed: &[f64],
    steps: usize,
) -> Result<Flow> {
    match kind {
        SamplerKind::Euler => sample_euler(field, sched, s, seed, steps, false),
        SamplerKind::Dpm2m => sample_dpm2m(field, sched, s, seed, steps),
        SamplerKind::Ddim => sample_ddim(field, &sched.discretize(steps)?, s, seed, false),
        SamplerKind::Ddpm => Err(Error::InvalidArgument(
            "ddpm needs per-step noise; use sample_ddpm".into(),
        )),
    }
}

/// Contraction accounting along one flow, in the sampler's direction of travel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallRecord {
    /// Integral of `lambda_max(sym(-J_F))` over the traversed interval.
    pub integral: f64,
    pub bound_factor: f64,
    /// Leading constant; 1 for the Euclidean metric.
    pub c: f64,
    pub eta_effective: f64,
    pub interval_length: f64,
    /// Integral of `lambda_max(sym J_F)` over the same interval, i.e. the
    /// forward-time quantity that the score-Jacobian condition controls.
    pub forward_integral: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GronwallAudit {
    pub record: GronwallRecord,
    /// `||delta_end|| / ||delta_start||` of the linearized perturbation.
    pub observed_ratio: f64,
    pub terminal: Vec<f64>,
    pub terminal_delta: Vec<f64>,
}

/// Integrates, with classical RK4 in the sampler direction (`u = -t` from
/// `-1` to `-t_eps`), the flow `a` together with its variational equation
/// `d delta/du = -J_F delta`, written as a unit direction `w` and a log-norm
/// `rho` with `d rho/du = w^T (-J_F) w`. The running integrals of
/// `lambda_max(sym(-J_F))` and `lambda_max(sym J_F)` share the same stages, so
/// `rho <= integral` holds stage by stage, with equality when `J_F` is a
/// multiple of the identity.
pub fn gronwall_audit<F: EpsField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    s: &[f64],
    seed: &[f64],
    delta0: &[f64],
    n: usize,
) -> Result<GronwallAudit> {
    check_seed(field, seed, n)?;
    check_dim(seed.len(), delta0.len(), "gronwall perturbation")?;
    let d = seed.len();
    let d0 = linalg::norm2(delta0);
    if d0 == 0.0 {
        return Err(Error::InvalidArgument("perturbation direction must be non-zero".into()));
    }

    // state layout: [a (d), w (d), rho, q_sampler, q_forward]
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let a = &y[..d];
        let w = Array1::from(y[d..2 * d].to_vec());
        let (eps, j) = field.eps_and_jacobian(a, s, t)?;
        let (f, h) = (sched.drift_f(t), sched.h_coeff(t));
        let jf = Array2::<f64>::eye(d) * f + j * h;
        let jw = jf.dot(&w);
        let rate = -w.dot(&jw) / w.dot(&w);
        let eig = linalg::symmetric_eigen(&linalg::sym(&jf.view())?.view())?;
        let mut out = Vec::with_capacity(2 * d + 3);
        out.extend(a.iter().zip(&eps).map(|(x, e)| -(f * x + h * e)));
        out.extend(jw.iter().zip(&w).map(|(v, wi)| -v - rate * wi));
        out.push(rate);
        out.push(-eig.min());
        out.push(eig.max());
        Ok(out)
    };

    let times = uniform_time_grid(sched, n);
    let mut y: Vec<f64> = seed.iter().copied().chain(delta0.iter().map(|x| x / d0)).collect();
    y.extend([0.0, 0.0, 0.0]);
    let axpy = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        y.iter().zip(k).map(|(a, b)| a + c * b).collect()
    };
    for i in 0..n - 1 {
        let (t0, t1) = (times[i], times[i + 1]);
        let du = t0 - t1;
        let tm = 0.5 * (t0 + t1);
        let k1 = rhs(t0, &y)?;
        let k2 = rhs(tm, &axpy(&y, &k1, 0.5 * du))?;
        let k3 = rhs(tm, &axpy(&y, &k2, 0.5 * du))?;
        let k4 = rhs(t1, &axpy(&y, &k3, du))?;
        for (idx, v) in y.iter_mut().enumerate() {
            *v += du / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
        }
        check_finite(&y, i + 1)?;
    }
    let (rho, integral, forward_integral) = (y[2 * d], y[2 * d + 1], y[2 * d + 2]);
    let length = 1.0 - sched.t_eps;
    let w = &y[d..2 * d];
    let wn = linalg::norm2(w);
    let observed_ratio = rho.exp();
    Ok(GronwallAudit {
        record: GronwallRecord {
            integral,
            bound_factor: integral.exp(),
            c: 1.0,
            eta_effective: -integral / length,
            interval_length: length,
            forward_integral,
        },
        observed_ratio,
        terminal: y[..d].to_vec(),
        terminal_delta: w.iter().map(|x| x / wn * d0 * observed_ratio).collect(),
    })
}
