//! Annealed Langevin importance sampling on an analytic Gaussian target,
//! where the normalizer is known in closed form.

use serde::{Deserialize, Serialize};

use super::langevin::{backward_noise, ula_step};
use super::schedule::{make_schedule, AnnealMode};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Target `γ(h) = exp(−½‖h‖²)` with `Z = (2π)^{dim/2}`; base `N(0, base_var·I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianToy {
    pub dim: usize,
    pub base_var: f64,
}

impl GaussianToy {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        Ok(GaussianToy { dim, base_var: 4.0 })
    }

    pub fn log_z(&self) -> f64 {
        0.5 * self.dim as f64 * LOG_2PI
    }

    fn log_gamma_row(h: &[f64]) -> f64 {
        -0.5 * h.iter().map(|x| x * x).sum::<f64>()
    }

    fn log_q0_row(&self, h: &[f64]) -> f64 {
        let d = self.dim as f64;
        -0.5 * (d * (LOG_2PI + self.base_var.ln()) + h.iter().map(|x| x * x).sum::<f64>() / self.base_var)
    }

    fn drift(&self, h: &Matrix, beta: f64) -> Matrix {
        let c = (1.0 - beta) / self.base_var + beta;
        h.scale(-c)
    }

    /// One log-weight per chain for `K` linear-schedule steps of size `eta`.
    /// Draws `chains x dim` base noise, then one such block per step.
    pub fn log_weights(&self, k: usize, eta: f64, chains: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        let schedule = make_schedule(k, AnnealMode::Linear, None)?;
        let h0 = rng.normal_matrix(chains, self.dim).scale(self.base_var.sqrt());
        let mut logw: Vec<f64> = (0..chains).map(|i| -self.log_q0_row(h0.row(i))).collect();
        let mut h = h0;
        for &beta in &schedule.betas[1..] {
            let eps = rng.normal_matrix(chains, self.dim);
            let d_prev = self.drift(&h, beta);
            let next = ula_step(&h, &d_prev, eta, &eps)?;
            let d_next = self.drift(&next, beta);
            let et = backward_noise(&d_prev, &d_next, eta, &eps)?;
            for (i, w) in logw.iter_mut().enumerate() {
                let sq = |m: &Matrix| m.row(i).iter().map(|x| x * x).sum::<f64>();
                *w -= 0.5 * (sq(&et) - sq(&eps));
            }
            h = next;
        }
        for (i, w) in logw.iter_mut().enumerate() {
            *w += Self::log_gamma_row(h.row(i));
        }
        Ok(logw)
    }
}

/// Summary of one evidence run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub k: usize,
    pub chains: usize,
    pub mean_weight: f64,
    pub std_error: f64,
    pub true_z: f64,
    /// `log Z − mean log-weight`.
    pub elbo_gap: f64,
    /// `|mean − Z| ≤ 3·SE`.
    pub within_band: bool,
}

pub fn evidence_report(toy: &GaussianToy, k: usize, eta: f64, chains: usize, rng: &mut RngStream) -> Result<EvidenceReport> {
    let logw = toy.log_weights(k, eta, chains, rng)?;
    let n = logw.len() as f64;
    let w: Vec<f64> = logw.iter().map(|l| l.exp()).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let true_z = toy.log_z().exp();
    let elbo = logw.iter().sum::<f64>() / n;
    Ok(EvidenceReport {
        k,
        chains,
        mean_weight: mean,
        std_error: se,
        true_z,
        elbo_gap: toy.log_z() - elbo,
        within_band: (mean - true_z).abs() <= 3.0 * se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_reduces_to_importance_sampling() {
        // η = 0 leaves the base draw untouched and R = 0.
        let toy = GaussianToy::new(2).unwrap();
        let mut a = RngStream::new(1);
        let lw = toy.log_weights(3, 0.0, 5, &mut a).unwrap();
        let mut b = RngStream::new(1);
        let h0 = b.normal_matrix(5, 2).scale(2.0);
        for i in 0..5 {
            let expect = GaussianToy::log_gamma_row(h0.row(i)) - toy.log_q0_row(h0.row(i));
            assert!((lw[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn evidence_band_small() {
        let toy = GaussianToy::new(2).unwrap();
        let r = evidence_report(&toy, 8, 0.05, 4000, &mut RngStream::new(2)).unwrap();
        assert!(r.within_band, "{r:?}");
        assert!(r.elbo_gap > 0.0);
        assert!(GaussianToy::new(0).is_err());
    }
}
