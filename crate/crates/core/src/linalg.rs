//! Small dense linear algebra used by the contraction machinery: symmetric
//! parts, a cyclic Jacobi eigensolver and a few norms.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Maximum absolute asymmetry accepted by the symmetric eigensolver.
pub const SYMMETRY_TOL: f64 = 1e-9;

pub fn ensure_square(m: &ArrayView2<f64>) -> Result<usize> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::NotSquare { rows: r, cols: c });
    }
    Ok(r)
}

/// `(J + J^T) / 2`.
pub fn sym(j: &ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure_square(j)?;
    Ok((j + &j.t()) * 0.5)
}

pub fn max_asymmetry(m: &ArrayView2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for k in (i + 1)..n {
            worst = worst.max((m[[i, k]] - m[[k, i]]).abs());
        }
    }
    worst
}

pub fn frobenius(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Array1<f64>,
    /// Column `k` is the unit eigenvector of `values[k]`.
    pub vectors: Array2<f64>,
}

impl SymmetricEigen {
    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// `1e-12` (relative to the matrix scale for large entries).
pub fn symmetric_eigen(m: &ArrayView2<f64>) -> Result<SymmetricEigen> {
    let n = ensure_square(m)?;
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("symmetric eigensolve input".into()));
    }
    let mut a = sym(m)?;
    let mut v = Array2::<f64>::eye(n);
    let scale = frobenius(&a.view()).max(1.0);
    let tol = 1e-12 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() < tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &k| a[[i, i]].total_cmp(&a[[k, k]]));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Largest eigenvalue of a symmetric matrix via [`symmetric_eigen`].
pub fn exact_eigmax(m: &ArrayView2<f64>) -> Result<f64> {
    Ok(symmetric_eigen(m)?.max())
}

/// Largest eigenvalue of the symmetric part of any square matrix.
pub fn sym_eigmax(m: &ArrayView2<f64>) -> Result<f64> {
    exact_eigmax(&sym(m)?.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sym_examples() {
        let j = array![[0.0, 2.0], [0.0, 0.0]];
        assert_eq!(sym(&j.view()).unwrap(), array![[0.0, 1.0], [1.0, 0.0]]);
        let anti = array![[0.0, 3.0], [-3.0, 0.0]];
        assert_eq!(sym(&anti.view()).unwrap(), Array2::<f64>::zeros((2, 2)));
        let s = array![[1.0, 2.0], [2.0, 5.0]];
        assert_eq!(sym(&s.view()).unwrap(), s);
        assert!(sym(&Array2::<f64>::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn eigmax_small_cases() {
        assert_eq!(exact_eigmax(&Array2::<f64>::eye(4).view()).unwrap(), 1.0);
        let swap = array![[0.0, 1.0], [1.0, 0.0]];
        assert!((exact_eigmax(&swap.view()).unwrap() - 1.0).abs() < 1e-14);
        assert!(exact_eigmax(&array![[0.0, 1.0], [0.0, 0.0]].view()).is_err());
    }

    /// Roots of the characteristic polynomial of a symmetric 3x3 matrix via
    /// the trigonometric closed form.
    fn cubic_eigs(m: &Array2<f64>) -> [f64; 3] {
        let p1 = m[[0, 1]].powi(2) + m[[0, 2]].powi(2) + m[[1, 2]].powi(2);
        let q = (m[[0, 0]] + m[[1, 1]] + m[[2, 2]]) / 3.0;
        let p2 = (m[[0, 0]] - q).powi(2) + (m[[1, 1]] - q).powi(2) + (m[[2, 2]] - q).powi(2)
            + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = (m - &(Array2::<f64>::eye(3) * q)) / p;
        let det = b[[0, 0]] * (b[[1, 1]] * b[[2, 2]] - b[[1, 2]] * b[[2, 1]])
            - b[[0, 1]] * (b[[1, 0]] * b[[2, 2]] - b[[1, 2]] * b[[2, 0]])
            + b[[0, 2]] * (b[[1, 0]] * b[[2, 1]] - b[[1, 1]] * b[[2, 0]]);
        let r = (det / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        [e3, e2, e1]
    }

    #[test]
    fn three_by_three_matches_closed_form() {
        let cases = [
            array![[2.0, -1.0, 0.5], [-1.0, 3.0, 0.25], [0.5, 0.25, -1.0]],
            array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
            array![[-4.0, 0.3, 0.0], [0.3, -2.0, 0.7], [0.0, 0.7, 1.5]],
        ];
        for m in cases {
            let e = symmetric_eigen(&m.view()).unwrap();
            let oracle = cubic_eigs(&m);
            for k in 0..3 {
                assert!((e.values[k] - oracle[k]).abs() < 1e-10, "{:?} {:?}", e.values, oracle);
            }
        }
    }

    #[test]
    fn eigenvectors_reconstruct() {
        let m = array![
            [1.0, 0.2, -0.3, 0.0],
            [0.2, -2.0, 0.5, 0.1],
            [-0.3, 0.5, 0.7, 0.9],
            [0.0, 0.1, 0.9, -0.4]
        ];
        let e = symmetric_eigen(&m.view()).unwrap();
        let recon = e.vectors.dot(&Array2::from_diag(&e.values)).dot(&e.vectors.t());
        for (x, y) in recon.iter().zip(m.iter()) {
            assert!((x - y).abs() < 1e-11);
        }
    }
}
