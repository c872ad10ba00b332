use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Jitter multipliers tried in order, each scaled by the mean diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterLadder {
    pub relative: Vec<f64>,
}

impl Default for JitterLadder {
    fn default() -> Self {
        JitterLadder {
            relative: vec![0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4],
        }
    }
}

impl JitterLadder {
    /// A ladder that never adds jitter.
    pub fn exact() -> Self {
        JitterLadder {
            relative: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
    jitter_used: f64,
}

/// Which triangle of the factor to solve against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `L x = b`
    Lower,
    /// `Lᵀ x = b`
    Upper,
}

impl CholeskyFactor {
    /// Wraps an existing lower-triangular factor with a positive diagonal.
    pub fn from_lower(lower: Matrix) -> Result<Self> {
        if !lower.is_square() {
            return Err(Error::shape(
                "CholeskyFactor::from_lower",
                "square",
                format!("{}x{}", lower.rows(), lower.cols()),
            ));
        }
        let n = lower.rows();
        for i in 0..n {
            if !(lower[(i, i)] > 0.0) {
                return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
            }
            for j in i + 1..n {
                if lower[(i, j)] != 0.0 {
                    return Err(Error::shape(
                        "CholeskyFactor::from_lower",
                        "lower-triangular",
                        format!("nonzero at ({i},{j})"),
                    ));
                }
            }
        }
        Ok(CholeskyFactor {
            lower,
            jitter_used: 0.0,
        })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn into_lower(self) -> Matrix {
        self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }
}

/// Factors a symmetric matrix, escalating along the jitter ladder until the
/// factorization succeeds.
pub fn cholesky(a: &Matrix, ladder: &JitterLadder) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::shape(
            "cholesky",
            "square",
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    let n = a.rows();
    let scale = 1.0 + a.max_abs();
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::shape(
                    "cholesky",
                    "symmetric input",
                    format!("asymmetry at ({i},{j})"),
                ));
            }
        }
    }
    let mean_diag = if n == 0 {
        0.0
    } else {
        a.diag().iter().sum::<f64>() / n as f64
    };
    let mut last = 0.0;
    for &rel in &ladder.relative {
        let jitter = rel * mean_diag.abs();
        last = jitter;
        if let Some(lower) = factor_lower(a, jitter) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter: last })
}

/// Plain Cholesky–Banachiewicz on the lower triangle of `a + jitter·I`.
pub(crate) fn factor_lower(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            if i == j {
                s += jitter;
            }
            let (ri, rj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `L X = B` (`Side::Lower`) or `Lᵀ X = B` (`Side::Upper`) for a
/// lower-triangular `L`, column by column of `B`.
pub(crate) fn solve_triangular(l: &Matrix, b: &Matrix, side: Side) -> Matrix {
    let n = l.rows();
    let c = b.cols();
    let mut x = b.clone();
    match side {
        Side::Lower => {
            for i in 0..n {
                let lii = l[(i, i)];
                for k in 0..i {
                    let lik = l[(i, k)];
                    if lik != 0.0 {
                        let (head, tail) = x.as_mut_slice().split_at_mut(i * c);
                        let xk = &head[k * c..(k + 1) * c];
                        for (xi, &xkj) in tail[..c].iter_mut().zip(xk) {
                            *xi -= lik * xkj;
                        }
                    }
                }
                for v in x.row_mut(i) {
                    *v /= lii;
                }
            }
        }
        Side::Upper => {
            for i in (0..n).rev() {
                let lii = l[(i, i)];
                for k in i + 1..n {
                    let lki = l[(k, i)];
                    if lki != 0.0 {
                        let (head, tail) = x.as_mut_slice().split_at_mut(k * c);
                        let xi = &mut head[i * c..(i + 1) * c];
                        for (xij, &xkj) in xi.iter_mut().zip(&tail[..c]) {
                            *xij -= lki * xkj;
                        }
                    }
                }
                for v in x.row_mut(i) {
                    *v /= lii;
                }
            }
        }
    }
    x
}

pub fn tri_solve(factor: &CholeskyFactor, b: &Matrix, side: Side) -> Result<Matrix> {
    if b.rows() != factor.dim() {
        return Err(Error::shape(
            "tri_solve",
            format!("{} rows", factor.dim()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    Ok(solve_triangular(&factor.lower, b, side))
}

/// `A⁻¹ B` for `A = L Lᵀ`.
pub fn chol_solve(factor: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    let y = tri_solve(factor, b, Side::Lower)?;
    tri_solve(factor, &y, Side::Upper)
}

pub fn logdet(factor: &CholeskyFactor) -> f64 {
    2.0 * factor.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// `log N(x; mean, L Lᵀ)`.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], cov_factor: &CholeskyFactor) -> Result<f64> {
    let d = cov_factor.dim();
    if x.len() != d || mean.len() != d {
        return Err(Error::shape(
            "mvn_logpdf",
            format!("length {d}"),
            format!("x {} / mean {}", x.len(), mean.len()),
        ));
    }
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let z = solve_triangular(&cov_factor.lower, &Matrix::column(&diff), Side::Lower);
    let maha: f64 = z.as_slice().iter().map(|v| v * v).sum();
    Ok(-0.5 * (d as f64 * (2.0 * PI).ln() + logdet(cov_factor) + maha))
}
