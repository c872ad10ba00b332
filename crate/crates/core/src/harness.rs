//! Self-checks shared by the command-line tool and the acceptance suite:
//! a finite-difference sweep over every estimator and parameter group, and
//! the runtime-versus-K benchmark.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{grad_check, Tape, Var};
use crate::data::{synth, Dataset};
use crate::error::{Error, Result};
use crate::inference::{
    elbo_and_grads, make_schedule, objective, AnnealMode, Context, DriftScale, FlowConfig, LatentKl, Method, Noise,
    NoiseShape, StepSizeState, TrainConfig, Trainer,
};
use crate::linalg::{JitterLadder, Matrix, RngStream};
use crate::model::{init_params, Batch, Bound, InducingTerms, InitOptions, ModelParams, PARAM_GROUPS};

/// The small problem every gradient check runs on.
pub struct TinyInstance {
    pub data: Dataset,
    pub params: ModelParams,
}

pub const TINY_N: usize = 8;
pub const TINY_D: usize = 3;
pub const TINY_Q: usize = 2;
pub const TINY_M: usize = 4;

/// Random but well-conditioned parameters with a learned schedule of length 3.
pub fn tiny_instance(seed: u64) -> Result<TinyInstance> {
    let data = synth::low_rank(TINY_N, TINY_D, TINY_Q, 0.3, seed);
    let mut rng = RngStream::new(seed.wrapping_add(1));
    let mut opts = InitOptions::new(TINY_Q, TINY_M);
    opts.latent_scale = 0.5;
    let mut params = init_params(&data.x, None, &opts, &mut rng)?;
    params.kernel.log_lengthscales = rng.normal_matrix(1, TINY_Q).scale(0.2).into_vec();
    params.kernel.log_signal_variance = 0.2;
    params.noise.log_sigma2 = (0.3f64).ln();
    params.latent.scale_raw.axpy(0.2, &rng.normal_matrix(TINY_N, TINY_Q * TINY_Q));
    params.latent.scale_raw = zero_upper(&params.latent.scale_raw, TINY_Q);
    params.inducing.mean = rng.normal_matrix(TINY_M, TINY_D).scale(0.5);
    params.inducing.scale_raw.axpy(0.1, &rng.normal_matrix(TINY_D, TINY_M * TINY_M));
    params.inducing.scale_raw = zero_upper(&params.inducing.scale_raw, TINY_M);
    params.schedule_logits = Some(rng.normal_matrix(1, 3).scale(0.5).into_vec());
    Ok(TinyInstance { data, params })
}

fn zero_upper(packed: &Matrix, q: usize) -> Matrix {
    Matrix::from_fn(packed.rows(), packed.cols(), |r, c| {
        if c % q > c / q {
            0.0
        } else {
            packed[(r, c)]
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub method: Method,
    pub group: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Gradients of the flow estimator with and without the detached drift.
#[derive(Debug, Clone, Serialize)]
pub struct DetachAblation {
    /// Largest change in the latent-mean gradient.
    pub latent_change: f64,
    /// Largest change in the inducing-scale gradient, which only reaches the
    /// objective through the terminal likelihood and the inducing KL.
    pub kl_only_change: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub groups: Vec<GroupError>,
    pub ablation: DetachAblation,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn worst(&self, method: Method) -> Option<&GroupError> {
        self.groups
            .iter()
            .filter(|g| g.method == method)
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Fixed flow used by the checks: constant step, learned schedule, no cap.
fn check_flow(params: &ModelParams, k: usize, detach: bool) -> Result<FlowConfig> {
    Ok(FlowConfig {
        schedule: make_schedule(k, AnnealMode::Learned, params.schedule_logits.as_deref())?,
        step: StepSizeState::new(0.01, false),
        drift_scale: DriftScale::Unit,
        detach,
        step_cap: None,
    })
}

fn value_on<'t>(
    leaves: &[Var<'t>],
    batch: &Batch,
    n_total: usize,
    method: Method,
    noise: &Noise,
    flow: Option<&FlowConfig>,
) -> Result<Var<'t>> {
    let b = Bound::from_leaves(leaves)?;
    let ladder = JitterLadder::default();
    let ind = InducingTerms::new(&b, &ladder)?;
    let ctx = Context {
        params: &b,
        inducing: &ind,
        batch,
        n_total,
        ladder: &ladder,
    };
    Ok(objective(&ctx, method, noise, flow, LatentKl::Analytic)?.0.elbo)
}

/// Central differences against the tape for MF, IW (K=5) and AIS (K=3) on
/// the tiny instance, every parameter group, plus the detached-flow ablation.
pub fn gradcheck_suite(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let tiny = tiny_instance(seed)?;
    let batch = tiny.data.batch(&(0..TINY_N).collect::<Vec<_>>());
    let mut rng = RngStream::new(seed.wrapping_add(2));
    let mut groups = Vec::new();
    for (method, k) in [(Method::Mf, 1), (Method::Iw, 5), (Method::Ais, 3)] {
        let mut params = tiny.params.clone();
        if method != Method::Ais {
            params.schedule_logits = None;
        }
        let shape = NoiseShape {
            b: TINY_N,
            q: TINY_Q,
            d: TINY_D,
            m: TINY_M,
            k,
            sample_u: false,
        };
        let noise = Noise::draw(method, shape, &mut rng);
        let flow = match method {
            Method::Ais => Some(check_flow(&params, k, false)?),
            _ => None,
        };
        let point: Vec<Matrix> = params.to_arrays().into_iter().map(|(_, m)| m).collect();
        let report = grad_check(
            |_t: &Tape, v: &[Var<'_>]| value_on(v, &batch, TINY_N, method, &noise, flow.as_ref()),
            &point,
            1e-5,
            tol,
        )?;
        for leaf in report.leaves {
            groups.push(GroupError {
                method,
                group: PARAM_GROUPS[leaf.leaf].to_string(),
                max_rel_err: leaf.max_rel_err,
                pass: leaf.max_rel_err <= tol,
            });
        }
    }
    let ablation = detach_ablation(&tiny, &batch, &mut rng)?;
    let pass = ablation.pass && groups.iter().all(|g| g.pass);
    Ok(GradcheckReport {
        tol,
        groups,
        ablation,
        pass,
    })
}

fn detach_ablation(tiny: &TinyInstance, batch: &Batch, rng: &mut RngStream) -> Result<DetachAblation> {
    let shape = NoiseShape {
        b: TINY_N,
        q: TINY_Q,
        d: TINY_D,
        m: TINY_M,
        k: 3,
        sample_u: false,
    };
    let noise = Noise::draw(Method::Ais, shape, rng);
    let grads = |detach: bool| -> Result<Vec<Matrix>> {
        let flow = check_flow(&tiny.params, 3, detach)?;
        let (_, g) = elbo_and_grads(&tiny.params, batch, TINY_N, Method::Ais, &noise, Some(&flow), LatentKl::Analytic)?;
        Ok(g)
    };
    let (full, cut) = (grads(false)?, grads(true)?);
    let change = |i: usize| full[i].sub(&cut[i]).map(|d| d.max_abs());
    let latent_change = change(3)?;
    let kl_only_change = change(7)?;
    Ok(DetachAblation {
        latent_change,
        kl_only_change,
        pass: latent_change > 1e-6 && kl_only_change <= 1e-10,
    })
}

/// Least-squares line `y ≈ intercept + slope · x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AffineFit {
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
}

pub fn affine_fit(x: &[f64], y: &[f64]) -> Result<AffineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidCount(x.len().min(y.len())));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::config("k_list", "needs at least two distinct values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(AffineFit { intercept, slope, r2 })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub k: usize,
    pub iters: usize,
    /// Median iteration time times `N / B`.
    pub seconds_per_epoch: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub method: Method,
    pub rows: Vec<BenchmarkRow>,
    pub fit: AffineFit,
}

/// Times `iters` training iterations for each `K` (after one warm-up
/// iteration) starting from the same initialization.
pub fn benchmark(ds: &Dataset, base: &TrainConfig, k_list: &[usize], iters: usize) -> Result<BenchmarkReport> {
    if k_list.is_empty() {
        return Err(Error::config("k_list", "must not be empty"));
    }
    if iters == 0 {
        return Err(Error::config("iters", "must be at least 1"));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mut cfg = base.clone();
        cfg.k = k;
        cfg.iters = iters + 1;
        cfg.eval_every = 0;
        let mut trainer = Trainer::new(ds, cfg)?;
        trainer.config.iters = usize::MAX;
        trainer.step(ds)?;
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t0 = Instant::now();
            trainer.step(ds)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        rows.push(BenchmarkRow {
            k,
            iters,
            seconds_per_epoch: median * ds.n() as f64 / base.batch as f64,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.seconds_per_epoch).collect();
    Ok(BenchmarkReport {
        method: base.method,
        fit: affine_fit(&xs, &ys)?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_fit_examples() {
        let f = affine_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let g = affine_fit(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(g.r2 < 0.5);
        assert!(affine_fit(&[1.0], &[1.0]).is_err());
        assert!(affine_fit(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn gradcheck_suite_passes() {
        let r = gradcheck_suite(0, 1e-4).unwrap();
        for g in &r.groups {
            assert!(g.pass, "{g:?}");
        }
        assert_eq!(r.groups.len(), 8 + 8 + 9);
        assert!(r.ablation.pass, "{:?}", r.ablation);
    }

    #[test]
    fn tiny_instance_shapes() {
        let t = tiny_instance(0).unwrap();
        assert_eq!((t.data.n(), t.data.d()), (TINY_N, TINY_D));
        assert_eq!(t.params.latent_dim(), TINY_Q);
        assert_eq!(t.params.num_inducing(), TINY_M);
        assert_eq!(t.params.to_arrays().len(), PARAM_GROUPS.len());
    }
}
