use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealMode {
    Linear,
    Learned,
}

/// Temperatures `0 = β_0 < β_1 < … < β_K = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealingSchedule {
    pub betas: Vec<f64>,
    pub mode: AnnealMode,
}

impl AnnealingSchedule {
    pub fn k(&self) -> usize {
        self.betas.len() - 1
    }
}

/// Linear mode gives `β_k = k/K`. Learned mode normalizes cumulative
/// softplus increments of `phi`; when `phi` is `None` it starts from equal
/// increments, which coincide with the linear schedule.
pub fn make_schedule(k: usize, mode: AnnealMode, phi: Option<&[f64]>) -> Result<AnnealingSchedule> {
    if k == 0 {
        return Err(Error::InvalidK(k));
    }
    let betas = match (mode, phi) {
        (AnnealMode::Linear, _) | (AnnealMode::Learned, None) => {
            (0..=k).map(|i| i as f64 / k as f64).collect()
        }
        (AnnealMode::Learned, Some(phi)) => {
            if phi.len() != k {
                return Err(Error::shape("make_schedule", format!("{k} increments"), format!("{}", phi.len())));
            }
            let inc: Vec<f64> = phi.iter().map(|&p| softplus(p)).collect();
            let total: f64 = inc.iter().sum();
            let mut betas = Vec::with_capacity(k + 1);
            let mut acc = 0.0;
            betas.push(0.0);
            for (i, v) in inc.iter().enumerate() {
                acc += v;
                betas.push(if i + 1 == k { 1.0 } else { acc / total });
            }
            betas
        }
    };
    Ok(AnnealingSchedule { betas, mode })
}

/// Initial increments for a learned schedule: equal, so the starting point is linear.
pub fn initial_logits(k: usize) -> Vec<f64> {
    vec![0.0; k]
}

/// `β_1 … β_K` as `1 x 1` tape values. With `phi` present the temperatures
/// are differentiable functions of it; `β_K` is pinned to exactly 1.
pub(crate) fn betas_on_tape<'t>(
    tape: &'t crate::autodiff::Tape,
    schedule: &AnnealingSchedule,
    phi: Option<Var<'t>>,
) -> Result<Vec<Var<'t>>> {
    let k = schedule.k();
    match phi {
        None => Ok(schedule.betas[1..].iter().map(|&b| tape.scalar(b)).collect()),
        Some(phi) => {
            let inc = phi.softplus();
            let upper = Matrix::from_fn(k, k, |i, j| if i <= j { 1.0 } else { 0.0 });
            let cum = inc.matmul(tape.constant(upper))?;
            let normalized = cum.div(inc.sum())?;
            let mut out = Vec::with_capacity(k);
            for i in 0..k {
                out.push(if i + 1 == k {
                    tape.scalar(1.0)
                } else {
                    normalized.select_cols(&[i])?
                });
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    #[test]
    fn linear_k4() {
        let s = make_schedule(4, AnnealMode::Linear, None).unwrap();
        assert_eq!(s.betas, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(matches!(make_schedule(0, AnnealMode::Linear, None), Err(Error::InvalidK(0))));
    }

    #[test]
    fn equal_increments_are_linear() {
        for k in [1, 3, 7] {
            let lin = make_schedule(k, AnnealMode::Linear, None).unwrap();
            let learned = make_schedule(k, AnnealMode::Learned, Some(&vec![0.3; k])).unwrap();
            for (a, b) in lin.betas.iter().zip(&learned.betas) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tape_betas_match_plain() {
        let phi = vec![0.2, -1.0, 0.7, 2.0];
        let s = make_schedule(4, AnnealMode::Learned, Some(&phi)).unwrap();
        let tape = Tape::new();
        let v = tape.var(Matrix::row_vector(&phi));
        let b = betas_on_tape(&tape, &s, Some(v)).unwrap();
        for (i, bv) in b.iter().enumerate() {
            assert!((bv.item() - s.betas[i + 1]).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn learned_schedule_is_monotone(phi in proptest::collection::vec(-6.0f64..6.0, 1..12)) {
            let s = make_schedule(phi.len(), AnnealMode::Learned, Some(&phi)).unwrap();
            prop_assert_eq!(s.betas[0], 0.0);
            prop_assert_eq!(*s.betas.last().unwrap(), 1.0);
            for w in s.betas.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }
    }
}
