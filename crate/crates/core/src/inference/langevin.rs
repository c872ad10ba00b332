use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Step-size recursion `η_k = 0.9 η_{k−1} + 0.1 η_0 / √(G_k + ε)` with `G_k`
/// the running sum of squared drift magnitudes along one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizeState {
    pub eta0: f64,
    pub eta_prev: f64,
    pub grad_sq_accum: f64,
    pub adaptive: bool,
    pub eps: f64,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl StepSizeState {
    pub fn new(eta0: f64, adaptive: bool) -> Self {
        StepSizeState {
            eta0,
            eta_prev: eta0,
            grad_sq_accum: 0.0,
            adaptive,
            eps: 1e-8,
            eta_min: 1e-5,
            eta_max: 0.5,
        }
    }

    /// Fresh state for a new chain with the same settings.
    pub fn restart(&self) -> Self {
        StepSizeState {
            eta_prev: self.eta0,
            grad_sq_accum: 0.0,
            ..self.clone()
        }
    }
}

pub fn next_step_size(state: &mut StepSizeState, grad_sq_norm: f64) -> f64 {
    if !state.adaptive {
        return state.eta0;
    }
    state.grad_sq_accum += grad_sq_norm.max(0.0);
    let raw = 0.9 * state.eta_prev + 0.1 * state.eta0 / (state.grad_sq_accum + state.eps).sqrt();
    let eta = raw.clamp(state.eta_min, state.eta_max);
    state.eta_prev = eta;
    eta
}

/// `1 / tr((L Lᵀ)⁻¹)` for a row-major packed lower factor `L`. Every
/// eigenvalue of the precision `(L Lᵀ)⁻¹` is at most the reciprocal of this.
pub fn precision_trace_bound(packed: &[f64], q: usize) -> f64 {
    let mut trace = 0.0;
    let mut x = vec![0.0; q];
    for j in 0..q {
        for i in 0..q {
            let mut acc = if i == j { 1.0 } else { 0.0 };
            for k in j..i {
                acc -= packed[i * q + k] * x[k];
            }
            x[i] = if i < j { 0.0 } else { acc / packed[i * q + i] };
        }
        trace += x[j..].iter().map(|v| v * v).sum::<f64>();
    }
    1.0 / trace
}

fn check_finite(drift: &Matrix) -> Result<()> {
    if drift.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteDrift { step: 0 })
    }
}

/// `H_k = H_{k−1} + η ∇log q_k(H_{k−1}) + √(2η) ε`.
pub fn ula_step(h_prev: &Matrix, drift_prev: &Matrix, eta: f64, eps: &Matrix) -> Result<Matrix> {
    check_finite(drift_prev)?;
    h_prev.check_same_shape(drift_prev, "ula_step")?;
    h_prev.check_same_shape(eps, "ula_step")?;
    let c = (2.0 * eta).sqrt();
    Ok(Matrix::from_fn(h_prev.rows(), h_prev.cols(), |i, j| {
        h_prev[(i, j)] + eta * drift_prev[(i, j)] + c * eps[(i, j)]
    }))
}

/// Noise that carries `H_k` back to `H_{k−1}` under the same transition:
/// `ε̃ = −√(η/2) (∇log q_k(H_{k−1}) + ∇log q_k(H_k)) − ε`.
pub fn backward_noise(drift_prev: &Matrix, drift_next: &Matrix, eta: f64, eps: &Matrix) -> Result<Matrix> {
    drift_prev.check_same_shape(drift_next, "backward_noise")?;
    drift_prev.check_same_shape(eps, "backward_noise")?;
    let c = (0.5 * eta).sqrt();
    Ok(Matrix::from_fn(eps.rows(), eps.cols(), |i, j| {
        -c * (drift_prev[(i, j)] + drift_next[(i, j)]) - eps[(i, j)]
    }))
}

/// `R = ½(‖ε̃‖² − ‖ε‖²)`.
pub fn log_transition_ratio(eps: &Matrix, eps_tilde: &Matrix) -> Result<f64> {
    eps.check_same_shape(eps_tilde, "log_transition_ratio")?;
    Ok(0.5 * (eps_tilde.frobenius().powi(2) - eps.frobenius().powi(2)))
}

/// `log N(to; from + η·drift, 2η I)`.
pub fn transition_logpdf(to: &Matrix, from: &Matrix, drift_at_from: &Matrix, eta: f64) -> Result<f64> {
    to.check_same_shape(from, "transition_logpdf")?;
    let n = to.len() as f64;
    let mut quad = 0.0;
    for k in 0..to.len() {
        let r = to.as_slice()[k] - from.as_slice()[k] - eta * drift_at_from.as_slice()[k];
        quad += r * r;
    }
    Ok(-0.5 * n * (4.0 * std::f64::consts::PI * eta).ln() - quad / (4.0 * eta))
}
