//! Largest-eigenvalue estimation for the symmetric score Jacobian and the two
//! contraction penalties built on it.
//!
//! The reverse flow `F = f(t) a + h(t) eps(a, s, t)` has Jacobian
//! `f I + h J_eps`; since the drift part is a multiple of the identity,
//! `lambda_max(sym J_F) = f + h lambda_max(sym J_eps)` exactly, and the flow is
//! contracting at `t` iff `lambda_max(sym J_eps) < -f(t)/h(t)`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, frobenius, norm2};
use crate::network::ScoreNetwork;
use crate::schedule::NoiseSchedule;

const MAX_RESTARTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossType {
    EigenHinge,
    Frobenius,
}

impl LossType {
    pub fn as_str(self) -> &'static str {
        match self {
            LossType::EigenHinge => "eigen_hinge",
            LossType::Frobenius => "frobenius",
        }
    }
}

impl std::str::FromStr for LossType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eigen_hinge" | "eigen" => Ok(LossType::EigenHinge),
            "frobenius" | "jacobian" => Ok(LossType::Frobenius),
            other => Err(Error::config(
                "contraction.loss_type",
                format!("unknown loss type `{other}` (expected eigen_hinge or frobenius)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionConfig {
    pub gamma: f64,
    pub beta: f64,
    pub loss_type: LossType,
    pub num_pi: usize,
    /// Penalize samples with diffusion time `t <= contr_steps`.
    pub contr_steps: f64,
    /// Replaces `-f/h` as the eigenvalue threshold of the hinge loss.
    pub threshold_override: Option<f64>,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig {
            gamma: 0.1,
            beta: 0.1,
            loss_type: LossType::Frobenius,
            num_pi: 4,
            contr_steps: 1.0,
            threshold_override: None,
        }
    }
}

impl ContractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("contraction.gamma", "must be finite and >= 0"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("contraction.beta", "must be > 0"));
        }
        if !(1..=64).contains(&self.num_pi) {
            return Err(Error::config("contraction.num_pi", "must lie in [1, 64]"));
        }
        if !(self.contr_steps > 0.0 && self.contr_steps <= 1.0) {
            return Err(Error::config("contraction.contr_steps", "must lie in (0, 1]"));
        }
        if let Some(th) = self.threshold_override {
            if !th.is_finite() {
                return Err(Error::config("contraction.threshold_override", "must be finite"));
            }
        }
        Ok(())
    }

    pub fn gated(&self, t: f64) -> bool {
        t <= self.contr_steps
    }
}

#[derive(Debug, Clone)]
pub struct PowerIteration {
    /// Rayleigh quotient of the final iterate.
    pub lambda: f64,
    pub vector: Vec<f64>,
    /// Unit start vector actually used (after any restarts).
    pub start: Vec<f64>,
    /// Rayleigh quotient after each iteration.
    pub trace: Vec<f64>,
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Power iteration from an explicit unit start vector: `K` normalized
/// matrix-vector products, then the Rayleigh quotient of the last iterate.
/// Returns `None` when an iterate is mapped to zero.
fn iterate_from<M>(matvec: &mut M, start: Vec<f64>, k: usize) -> Result<Option<PowerIteration>>
where
    M: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut v = start.clone();
    let mut trace = Vec::with_capacity(k);
    let mut av = matvec(&v)?;
    for _ in 0..k {
        if av.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("power iteration matvec".into()));
        }
        let n = norm2(&av);
        if n == 0.0 {
            return Ok(None);
        }
        v = av.iter().map(|x| x / n).collect();
        av = matvec(&v)?;
        trace.push(dot(&v, &av));
    }
    if av.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("power iteration matvec".into()));
    }
    Ok(Some(PowerIteration {
        lambda: dot(&v, &av),
        vector: v,
        start,
        trace,
    }))
}

/// Power iteration for the eigenvalue of largest magnitude of a symmetric
/// linear map, started from a Gaussian direction.
pub fn power_iteration<M, R>(mut matvec: M, dim: usize, k: usize, rng: &mut R) -> Result<PowerIteration>
where
    M: FnMut(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if k == 0 || dim == 0 {
        return Err(Error::InvalidArgument("power iteration needs K >= 1 and dim >= 1".into()));
    }
    let mut start = random_unit(dim, rng);
    for _ in 0..MAX_RESTARTS {
        if let Some(res) = iterate_from(&mut matvec, start.clone(), k)? {
            return Ok(res);
        }
        start = random_unit(dim, rng);
    }
    // every start fell into the kernel: the map is zero along all tried directions
    Ok(PowerIteration {
        lambda: 0.0,
        vector: start.clone(),
        start,
        trace: vec![0.0; k],
    })
}

/// Same as [`power_iteration`] but from a fixed unit start vector.
pub fn power_iteration_from<M>(mut matvec: M, start: &[f64], k: usize) -> Result<PowerIteration>
where
    M: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = norm2(start);
    if k == 0 || n == 0.0 {
        return Err(Error::InvalidArgument("power iteration needs K >= 1 and a non-zero start".into()));
    }
    let start: Vec<f64> = start.iter().map(|x| x / n).collect();
    Ok(iterate_from(&mut matvec, start.clone(), k)?.unwrap_or(PowerIteration {
        lambda: 0.0,
        vector: start.clone(),
        start,
        trace: vec![0.0; k],
    }))
}

pub fn matvec(m: &ArrayView2<f64>, v: &[f64]) -> Vec<f64> {
    m.rows()
        .into_iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

#[derive(Debug, Clone)]
pub struct ContractionEstimate {
    pub lambda_hat: f64,
    pub shift_used: f64,
    pub iterations: usize,
    pub loss_value: f64,
    /// Converged eigenvector direction (treated as a constant when differentiating).
    pub vector: Vec<f64>,
    pub start: Vec<f64>,
}

/// Shift used to make the most positive eigenvalue dominant in magnitude.
pub fn spectral_shift(j_sym: &ArrayView2<f64>) -> f64 {
    frobenius(j_sym) + 1e-6
}

/// Estimate of the most positive eigenvalue of a symmetric matrix: power
/// iteration on `J + mu I` with `mu = ||J||_F + 1e-6`, minus `mu`.
pub fn lambda_max_estimate<R: Rng + ?Sized>(
    j_sym: &ArrayView2<f64>,
    k: usize,
    rng: &mut R,
) -> Result<ContractionEstimate> {
    let dim = linalg::ensure_square(j_sym)?;
    let mu = spectral_shift(j_sym);
    let pi = power_iteration(
        |v: &[f64]| {
            let mut out = matvec(j_sym, v);
            for (o, x) in out.iter_mut().zip(v) {
                *o += mu * x;
            }
            Ok(out)
        },
        dim,
        k,
        rng,
    )?;
    Ok(ContractionEstimate {
        lambda_hat: pi.lambda - mu,
        shift_used: mu,
        iterations: k,
        loss_value: 0.0,
        vector: pi.vector,
        start: pi.start,
    })
}

/// Largest eigenvalue by cyclic Jacobi; oracle for the estimators above.
pub fn exact_eigmax(j_sym: &ArrayView2<f64>) -> Result<f64> {
    linalg::exact_eigmax(j_sym)
}

fn threshold(t: f64, sched: &NoiseSchedule, override_: Option<f64>) -> f64 {
    override_.unwrap_or_else(|| sched.contraction_threshold(t))
}

/// `max(-beta, lambda_hat + f(t)/h(t))`, or `max(-beta, lambda_hat - override)`.
pub fn hinge_loss(lambda_hat: f64, t: f64, sched: &NoiseSchedule, cfg: &ContractionConfig) -> f64 {
    hinge_loss_with_slope(lambda_hat, t, sched, cfg).0
}

/// Hinge value and its derivative with respect to `lambda_hat` (0 when clamped).
pub fn hinge_loss_with_slope(
    lambda_hat: f64,
    t: f64,
    sched: &NoiseSchedule,
    cfg: &ContractionConfig,
) -> (f64, f64) {
    let margin = lambda_hat - threshold(t, sched, cfg.threshold_override);
    if margin > -cfg.beta {
        (margin, 1.0)
    } else {
        (-cfg.beta, 0.0)
    }
}

/// `||J_sym + beta I||_F`.
pub fn frobenius_loss(j_sym: &ArrayView2<f64>, beta: f64) -> f64 {
    frobenius_loss_with_grad(j_sym, beta).0
}

/// Value and gradient `(J + beta I) / ||J + beta I||_F` (zero at the kink).
pub fn frobenius_loss_with_grad(j_sym: &ArrayView2<f64>, beta: f64) -> (f64, Array2<f64>) {
    let n = j_sym.nrows();
    let shifted = j_sym.to_owned() + &(Array2::<f64>::eye(n) * beta);
    let value = frobenius(&shifted.view());
    if value == 0.0 {
        return (0.0, Array2::zeros((n, n)));
    }
    (value, shifted / value)
}

/// Exact check of `lambda_max(J_sym) < -f(t)/h(t)` (or `< override`).
pub fn condition_check(
    j_sym: &ArrayView2<f64>,
    t: f64,
    sched: &NoiseSchedule,
    override_: Option<f64>,
) -> Result<bool> {
    Ok(exact_eigmax(j_sym)? < threshold(t, sched, override_))
}

/// Contraction penalty of a batch, given the per-sample action Jacobians.
#[derive(Debug, Clone)]
pub struct ContractionTerms {
    /// Mean over the whole batch; ungated samples contribute zero.
    pub loss: f64,
    /// `dL/dJ_eps` per sample, already divided by the batch size.
    pub jacobian_bars: Vec<Array2<f64>>,
    /// Estimated `lambda_max(sym J_eps)` of each gated sample.
    pub lambda_hats: Vec<f64>,
    pub gated: usize,
}

impl ContractionTerms {
    pub fn mean_lambda_hat(&self) -> f64 {
        if self.lambda_hats.is_empty() {
            f64::NAN
        } else {
            self.lambda_hats.iter().sum::<f64>() / self.lambda_hats.len() as f64
        }
    }
}

pub fn contraction_terms<R: Rng + ?Sized>(
    jacobians: &[Array2<f64>],
    times: &[f64],
    sched: &NoiseSchedule,
    cfg: &ContractionConfig,
    rng: &mut R,
) -> Result<ContractionTerms> {
    if jacobians.len() != times.len() {
        return Err(Error::DimensionMismatch {
            expected: jacobians.len(),
            got: times.len(),
            context: "contraction batch times",
        });
    }
    let b = jacobians.len().max(1) as f64;
    let mut loss = 0.0;
    let mut bars = Vec::with_capacity(jacobians.len());
    let mut lambda_hats = Vec::new();
    for (j, &t) in jacobians.iter().zip(times) {
        let n = j.nrows();
        if !cfg.gated(t) {
            bars.push(Array2::zeros((n, n)));
            continue;
        }
        let js = linalg::sym(&j.view())?;
        let est = lambda_max_estimate(&js.view(), cfg.num_pi, rng)?;
        lambda_hats.push(est.lambda_hat);
        match cfg.loss_type {
            LossType::EigenHinge => {
                let (value, slope) = hinge_loss_with_slope(est.lambda_hat, t, sched, cfg);
                loss += value;
                // d(v^T sym(J) v)/dJ = v v^T with v held fixed
                let mut bar = Array2::zeros((n, n));
                if slope != 0.0 {
                    for r in 0..n {
                        for c in 0..n {
                            bar[[r, c]] = slope * est.vector[r] * est.vector[c] / b;
                        }
                    }
                }
                bars.push(bar);
            }
            LossType::Frobenius => {
                let (value, grad) = frobenius_loss_with_grad(&js.view(), cfg.beta);
                loss += value;
                // grad is symmetric, so it is also the gradient w.r.t. J
                bars.push(grad / b);
            }
        }
    }
    Ok(ContractionTerms {
        loss: loss / b,
        jacobian_bars: bars,
        gated: lambda_hats.len(),
        lambda_hats,
    })
}

/// Penalty of a batch of noisy samples `(a_t, s, t)` under `net`.
pub fn batch_contraction_loss<R: Rng + ?Sized>(
    net: &ScoreNetwork,
    a_t: &ArrayView2<f64>,
    s: &ArrayView2<f64>,
    t: &[f64],
    sched: &NoiseSchedule,
    cfg: &ContractionConfig,
    rng: &mut R,
) -> Result<ContractionTerms> {
    let ev = net.evaluate(a_t, s, t, true)?;
    let jacs: Vec<Array2<f64>> = (0..ev.batch_size()).map(|i| ev.jacobian(i)).collect();
    contraction_terms(&jacs, t, sched, cfg, rng)
}

/// Upper bound on `|lambda_hat_K - lambda_1|` for power iteration on a
/// symmetric matrix whose eigenvalue `lambda_1` dominates in magnitude:
/// `(|l1| + |l2|) (|l2|/|l1|)^(2K) (1 - c^2)/c^2` with `c = <u_1, v_0>`.
pub fn power_iteration_error_bound(l1: f64, l2: f64, start_overlap: f64, k: usize) -> f64 {
    let ratio = l2.abs() / l1.abs();
    let c2 = start_overlap * start_overlap;
    (l1.abs() + l2.abs()) * ratio.powi(2 * k as i32) * (1.0 - c2) / c2
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let m = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        (&m + &m.t()) * 0.5
    }

    #[test]
    fn dominant_magnitude() {
        let mut r = rng();
        let d = array![[3.0, 0.0], [0.0, 1.0]];
        let pi = power_iteration(|v: &[f64]| Ok(matvec(&d.view(), v)), 2, 50, &mut r).unwrap();
        assert!((pi.lambda - 3.0).abs() < 1e-10);
        let d = array![[-2.0, 0.0], [0.0, -5.0]];
        let pi = power_iteration(|v: &[f64]| Ok(matvec(&d.view(), v)), 2, 60, &mut r).unwrap();
        assert!((pi.lambda + 5.0).abs() < 1e-10);
    }

    #[test]
    fn shifted_estimate_targets_most_positive() {
        let mut r = rng();
        let d = array![[-2.0, 0.0], [0.0, -5.0]];
        let est = lambda_max_estimate(&d.view(), 200, &mut r).unwrap();
        assert!((est.lambda_hat + 2.0).abs() < 1e-8);
        let d = array![[3.0, 0.0], [0.0, 1.0]];
        assert!((lambda_max_estimate(&d.view(), 200, &mut r).unwrap().lambda_hat - 3.0).abs() < 1e-8);
    }

    #[test]
    fn random_matrices_against_jacobi() {
        let mut r = rng();
        for _ in 0..20 {
            let m = random_sym(10, &mut r);
            let e = linalg::symmetric_eigen(&m.view()).unwrap();
            let dominant = if e.max().abs() >= e.min().abs() { e.max() } else { e.min() };
            let pi = power_iteration(|v: &[f64]| Ok(matvec(&m.view(), v)), 10, 2000, &mut r).unwrap();
            assert!((pi.lambda - dominant).abs() < 1e-8, "{} {}", pi.lambda, dominant);
        }
    }

    #[test]
    fn zero_matrix_and_bad_input() {
        let mut r = rng();
        let z = Array2::<f64>::zeros((3, 3));
        let est = lambda_max_estimate(&z.view(), 4, &mut r).unwrap();
        assert!(est.lambda_hat.abs() < 1e-5);
        let res = power_iteration(|v: &[f64]| Ok(vec![f64::NAN; v.len()]), 3, 4, &mut r);
        assert!(res.is_err());
        let pi = power_iteration(|v: &[f64]| Ok(vec![0.0; v.len()]), 3, 4, &mut r).unwrap();
        assert_eq!(pi.lambda, 0.0);
    }

    #[test]
    fn hinge_branches() {
        let sched = NoiseSchedule::default();
        let cfg = ContractionConfig { beta: 0.1, loss_type: LossType::EigenHinge, ..Default::default() };
        let t = 0.4;
        let th = sched.contraction_threshold(t);
        assert_eq!(hinge_loss(th - 1.1, t, &sched, &cfg), -0.1);
        assert_eq!(hinge_loss_with_slope(th - 1.1, t, &sched, &cfg).1, 0.0);
        assert!((hinge_loss(th + 0.5, t, &sched, &cfg) - 0.5).abs() < 1e-12);
        let lam = 0.37;
        let expected = (lam - sched.sigma(t)).max(-0.1);
        assert!((hinge_loss(lam, t, &sched, &cfg) - expected).abs() < 1e-12);
        let over = ContractionConfig { threshold_override: Some(2.0), ..cfg };
        assert!((hinge_loss(2.5, t, &sched, &over) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn frobenius_examples() {
        let beta = 0.1;
        let j = Array2::<f64>::eye(3) * -beta;
        assert_eq!(frobenius_loss(&j.view(), beta), 0.0);
        let (_, g) = frobenius_loss_with_grad(&j.view(), beta);
        assert_eq!(g, Array2::<f64>::zeros((3, 3)));
        let z = Array2::<f64>::zeros((2, 2));
        assert!((frobenius_loss(&z.view(), beta) - 0.1 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn condition_examples() {
        let sched = NoiseSchedule::default();
        for &t in &[0.01, 0.3, 0.9] {
            let z = Array2::<f64>::zeros((2, 2));
            assert!(condition_check(&z.view(), t, &sched, None).unwrap());
            let big = Array2::<f64>::eye(2) * (2.0 * sched.sigma(t));
            assert!(!condition_check(&big.view(), t, &sched, None).unwrap());
            let neg = Array2::<f64>::eye(2) * -1.0;
            assert!(condition_check(&neg.view(), t, &sched, None).unwrap());
        }
    }

    #[test]
    fn config_validation() {
        assert!(ContractionConfig::default().validate().is_ok());
        let bad = ContractionConfig { num_pi: 0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("contraction.num_pi"));
        let bad = ContractionConfig { contr_steps: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ContractionConfig { beta: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gated_terms_for_zero_jacobians() {
        let sched = NoiseSchedule::default();
        let cfg = ContractionConfig { contr_steps: 0.5, ..Default::default() };
        let jacs = vec![Array2::<f64>::zeros((2, 2)); 4];
        let times = [0.1, 0.4, 0.6, 0.9];
        let mut r = rng();
        let terms = contraction_terms(&jacs, &times, &sched, &cfg, &mut r).unwrap();
        assert_eq!(terms.gated, 2);
        assert!((terms.loss - 0.5 * 0.1 * 2f64.sqrt()).abs() < 1e-15);
        let full = ContractionConfig { contr_steps: 1.0, ..cfg };
        let terms = contraction_terms(&jacs, &times, &sched, &full, &mut r).unwrap();
        assert_eq!(terms.gated, 4);
        assert!((terms.loss - 0.1 * 2f64.sqrt()).abs() < 1e-15);
    }
}
