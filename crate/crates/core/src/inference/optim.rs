use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

/// First-order optimizer over a list of parameter arrays (gradient ascent
/// is expressed by passing the gradient of the loss to minimize).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Adam first moments; unused by Adagrad.
    pub m: Vec<Matrix>,
    /// Adam second moments or Adagrad accumulated squares.
    pub v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect::<Vec<_>>();
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: match kind {
                OptimizerKind::Adam => 1e-8,
                OptimizerKind::Adagrad => 1e-10,
            },
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One descent step on `params` given `grads` of the loss.
    pub fn update(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.v.len() || grads.len() != self.v.len() {
            return Err(Error::shape(
                "Optimizer::update",
                format!("{} groups", self.v.len()),
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.v) {
            p.check_same_shape(g, "Optimizer::update")?;
            p.check_same_shape(v, "Optimizer::update")?;
        }
        self.step += 1;
        let t = self.step as i32;
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    let (ps, gs) = (p.as_mut_slice(), g.as_slice());
                    let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
                    for k in 0..ps.len() {
                        ms[k] = b1 * ms[k] + (1.0 - b1) * gs[k];
                        vs[k] = b2 * vs[k] + (1.0 - b2) * gs[k] * gs[k];
                        let mhat = ms[k] / c1;
                        let vhat = vs[k] / c2;
                        ps[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
            OptimizerKind::Adagrad => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.v.iter_mut()) {
                    let (ps, gs, vs) = (p.as_mut_slice(), g.as_slice(), v.as_mut_slice());
                    for k in 0..ps.len() {
                        vs[k] += gs[k] * gs[k];
                        ps[k] -= self.lr * gs[k] / (vs[k].sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
