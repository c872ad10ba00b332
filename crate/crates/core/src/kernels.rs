//! Squared-exponential ARD covariance and its input derivative.

use serde::{Deserialize, Serialize};

use crate::autodiff::{se_ard_cross, se_ard_gram};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Log-parameterized SE-ARD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
}

impl KernelHyperparams {
    /// Unit lengthscales and unit signal variance.
    pub fn unit(q: usize) -> Self {
        KernelHyperparams {
            log_lengthscales: vec![0.0; q],
            log_signal_variance: 0.0,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub(crate) fn log_ls_row(&self) -> Matrix {
        Matrix::row_vector(&self.log_lengthscales)
    }

    fn check(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let q = self.latent_dim();
        if a != q || b != q {
            return Err(Error::shape(op, format!("Q={q}"), format!("{a} and {b}")));
        }
        Ok(())
    }
}

/// Observation noise variance, shared by every output dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseVariance {
    pub log_sigma2: f64,
}

impl NoiseVariance {
    pub fn new(sigma2: f64) -> Self {
        NoiseVariance {
            log_sigma2: sigma2.ln(),
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }
}

impl Default for NoiseVariance {
    fn default() -> Self {
        NoiseVariance::new(0.01)
    }
}

/// `σ_f² exp(−½ Σ_q (h_q − h2_q)² / ℓ_q²)`
pub fn k_se_ard(h: &[f64], h2: &[f64], theta: &KernelHyperparams) -> Result<f64> {
    theta.check("k_se_ard", h.len(), h2.len())?;
    let d2: f64 = h
        .iter()
        .zip(h2)
        .zip(&theta.log_lengthscales)
        .map(|((a, b), l)| (a - b).powi(2) * (-2.0 * l).exp())
        .sum();
    Ok(theta.signal_variance() * (-0.5 * d2).exp())
}

/// `∂k(h, h2)/∂h`.
pub fn dk_dh(h: &[f64], h2: &[f64], theta: &KernelHyperparams) -> Result<Vec<f64>> {
    let k = k_se_ard(h, h2, theta)?;
    Ok(h.iter()
        .zip(h2)
        .zip(&theta.log_lengthscales)
        .map(|((a, b), l)| -(a - b) * (-2.0 * l).exp() * k)
        .collect())
}

/// N x N covariance of the rows of `h`.
pub fn gram(h: &Matrix, theta: &KernelHyperparams) -> Result<Matrix> {
    theta.check("gram", h.cols(), h.cols())?;
    Ok(se_ard_gram(h, &theta.log_ls_row(), theta.log_signal_variance))
}

/// N x m cross-covariance between rows of `h` and rows of `z`.
pub fn cross(h: &Matrix, z: &Matrix, theta: &KernelHyperparams) -> Result<Matrix> {
    theta.check("cross", h.cols(), z.cols())?;
    Ok(se_ard_cross(h, z, &theta.log_ls_row(), theta.log_signal_variance))
}
