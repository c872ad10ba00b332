use super::{Tape, Var};
use crate::error::Result;
use crate::linalg::Matrix;

/// Worst-case agreement between an adjoint and central differences for one leaf.
#[derive(Debug, Clone)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Relative error with a unit floor on the denominator, so coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares the tape's adjoints of `f` at `point` against central differences
/// `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, point: &[Matrix], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = point.iter().map(|m| tape.var(m.clone())).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = leaves.iter().map(|&v| grads.wrt(v)).collect();
    grad_check_against(&f, point, &analytic, h, tol)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against<F>(
    f: &F,
    point: &[Matrix],
    analytic: &[Matrix],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |pt: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = pt.iter().map(|m| tape.constant(m.clone())).collect();
        Ok(f(&tape, &leaves)?.item())
    };
    let mut work: Vec<Matrix> = point.to_vec();
    let mut leaves = Vec::with_capacity(point.len());
    for (li, grad) in analytic.iter().enumerate() {
        let mut rep = LeafReport {
            leaf: li,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..point[li].len() {
            let x0 = point[li].as_slice()[k];
            work[li].as_mut_slice()[k] = x0 + h;
            let fp = eval(&work)?;
            work[li].as_mut_slice()[k] = x0 - h;
            let fm = eval(&work)?;
            work[li].as_mut_slice()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.as_slice()[k];
            let e = rel_err(a, numeric);
            if e > rep.max_rel_err || !e.is_finite() {
                rep = LeafReport {
                    leaf: li,
                    max_rel_err: if e.is_finite() { e } else { f64::INFINITY },
                    worst_index: k,
                    analytic: a,
                    numeric,
                };
            }
        }
        leaves.push(rep);
    }
    let max_rel_err = leaves.iter().fold(0.0f64, |m, l| m.max(l.max_rel_err));
    Ok(GradCheckReport {
        pass: max_rel_err <= tol,
        leaves,
        max_rel_err,
        tol,
    })
}
