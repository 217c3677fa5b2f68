//! Noise-prediction fields `eps(a, s, t)`: anything the samplers and the
//! contraction diagnostics can evaluate together with its action Jacobian.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub trait EpsField: Sync {
    fn action_dim(&self) -> usize;

    fn eps(&self, a: &[f64], s: &[f64], t: f64) -> Result<Vec<f64>>;

    /// `d eps / d a`, shape `(d_a, d_a)`, entry `[i, k] = d eps_i / d a_k`.
    fn eps_jacobian(&self, a: &[f64], s: &[f64], t: f64) -> Result<Array2<f64>>;

    fn eps_and_jacobian(&self, a: &[f64], s: &[f64], t: f64) -> Result<(Vec<f64>, Array2<f64>)> {
        Ok((self.eps(a, s, t)?, self.eps_jacobian(a, s, t)?))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            expected,
            got,
            context,
        });
    }
    Ok(())
}

/// The field that predicts no noise at all; the flow reduces to its linear drift.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl EpsField for ZeroField {
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn eps(&self, a: &[f64], _s: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, a.len(), "zero field action")?;
        Ok(vec![0.0; self.dim])
    }

    fn eps_jacobian(&self, a: &[f64], _s: &[f64], _t: f64) -> Result<Array2<f64>> {
        check_dim(self.dim, a.len(), "zero field action")?;
        Ok(Array2::zeros((self.dim, self.dim)))
    }
}

/// `eps(a) = W a + b`, independent of state and time.
#[derive(Debug, Clone)]
pub struct AffineField {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl EpsField for AffineField {
    fn action_dim(&self) -> usize {
        self.bias.len()
    }

    fn eps(&self, a: &[f64], _s: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_dim(self.bias.len(), a.len(), "affine field action")?;
        let a = Array1::from(a.to_vec());
        Ok((self.weight.dot(&a) + &self.bias).to_vec())
    }

    fn eps_jacobian(&self, a: &[f64], _s: &[f64], _t: f64) -> Result<Array2<f64>> {
        check_dim(self.bias.len(), a.len(), "affine field action")?;
        Ok(self.weight.clone())
    }
}
