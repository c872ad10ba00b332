use serde::{Deserialize, Serialize};

use super::langevin::{next_step_size, precision_trace_bound, StepSizeState};
use super::schedule::{betas_on_tape, AnnealMode, AnnealingSchedule};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::linalg::{JitterLadder, Matrix, RngStream};
use crate::model::{
    collapsed_grad_h, cond_loglik_rows, log_prior_rows, predictive, Batch, Bound, InducingTerms,
    LatentBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mf,
    Iw,
    Ais,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(Method::Mf),
            "iw" => Ok(Method::Iw),
            "ais" => Ok(Method::Ais),
            other => Err(Error::config("method", format!("expected mf, iw or ais, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Mf => "mf",
            Method::Iw => "iw",
            Method::Ais => "ais",
        })
    }
}

/// How the mean-field and AIS bounds treat `KL(q(h_n) ‖ p(h_n))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKl {
    Analytic,
    /// Single-sample `log q(h) − log p(h)` at the reparameterized draw.
    Sampled,
}

/// Multiplier on the collapsed-likelihood term inside the Langevin drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftScale {
    /// `N / B`.
    BatchRatio,
    Unit,
}

/// Standard-normal draws for one objective evaluation, drawn in field order.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// `B x Q` latent draws: one for MF and AIS, K for IW.
    pub latent: Vec<Matrix>,
    /// `B x Q` Langevin noises `ε_0 … ε_{K−1}` (AIS only).
    pub flow: Vec<Matrix>,
    /// `B x D` draws for `f`: one per latent draw.
    pub f: Vec<Matrix>,
    /// `D x m` draws for sampled inducing values in the drift.
    pub u: Option<Matrix>,
}

impl Noise {
    pub fn draw(method: Method, shape: NoiseShape, rng: &mut RngStream) -> Noise {
        let NoiseShape { b, q, d, m, k, sample_u } = shape;
        let n_latent = if method == Method::Iw { k } else { 1 };
        let n_flow = if method == Method::Ais { k } else { 0 };
        let latent = (0..n_latent).map(|_| rng.normal_matrix(b, q)).collect();
        let flow = (0..n_flow).map(|_| rng.normal_matrix(b, q)).collect();
        let f = (0..n_latent).map(|_| rng.normal_matrix(b, d)).collect();
        let u = (sample_u && method == Method::Ais).then(|| rng.normal_matrix(d, m));
        Noise { latent, flow, f, u }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseShape {
    pub b: usize,
    pub q: usize,
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub sample_u: bool,
}

/// Shared ingredients of every estimator.
pub struct Context<'a, 't> {
    pub params: &'a Bound<'t>,
    pub inducing: &'a InducingTerms<'t>,
    pub batch: &'a Batch,
    pub n_total: usize,
    pub ladder: &'a JitterLadder,
}

impl<'t> Context<'_, 't> {
    fn scale(&self) -> f64 {
        self.n_total as f64 / self.batch.len() as f64
    }

    fn check_noise(&self, noise: &Noise, need_latent: usize, need_flow: usize) -> Result<()> {
        if noise.latent.len() != need_latent || noise.f.len() != need_latent || noise.flow.len() != need_flow {
            return Err(Error::shape(
                "noise",
                format!("{need_latent} latent/f draws and {need_flow} flow draws"),
                format!("{}/{} and {}", noise.latent.len(), noise.f.len(), noise.flow.len()),
            ));
        }
        Ok(())
    }

    /// Terminal conditional log-likelihood rows at `h` plus its clamp count.
    fn loglik_rows(&self, h: Var<'t>, eps_f: &Matrix) -> Result<(Var<'t>, usize)> {
        let tape = h.tape();
        let pred = predictive(self.params, self.inducing, h)?;
        let f = pred.sample(tape.constant(eps_f.clone()))?;
        Ok((cond_loglik_rows(self.batch, f, self.params.log_sigma2)?, pred.clamped))
    }
}

/// An objective value with diagnostics.
pub struct Estimate<'t> {
    pub elbo: Var<'t>,
    /// Unscaled batch sum of `log p(x_n | f, h_n)` at the terminal draws,
    /// averaged over draws for IW.
    pub loglik: f64,
    pub clamped: usize,
}

/// Mean-field bound
/// `(N/B) Σ_n (E[log p(x_n | f, h_n)] − KL(q(h_n) ‖ p(h_n))) − Σ_d KL(q(u_d) ‖ p(u_d))`.
pub fn mf_elbo<'t>(ctx: &Context<'_, 't>, noise: &Noise, kl: LatentKl) -> Result<Estimate<'t>> {
    ctx.check_noise(noise, 1, 0)?;
    let tape = ctx.params.latent_mean.tape();
    let lb = LatentBatch::new(ctx.params, &ctx.batch.idx)?;
    let h = lb.sample(tape.constant(noise.latent[0].clone()))?;
    let (ll, clamped) = ctx.loglik_rows(h, &noise.f[0])?;
    let per_point = match kl {
        LatentKl::Analytic => ll.sub(lb.kl_rows()?)?,
        LatentKl::Sampled => ll.add(log_prior_rows(h))?.sub(lb.log_q0_rows(h)?)?,
    };
    let elbo = per_point.sum().scale(ctx.scale()).sub(ctx.inducing.kl(ctx.params)?)?;
    let loglik = ll.value().sum();
    Ok(Estimate { elbo, loglik, clamped })
}

/// Importance-weighted bound: per point, log-mean-exp over K draws of
/// `log p(x_n | f, h_k) + log p(h_k) − log q(h_k)`, one `f` draw per `h_k`.
pub fn iw_elbo<'t>(ctx: &Context<'_, 't>, noise: &Noise) -> Result<Estimate<'t>> {
    let k = noise.latent.len();
    if k == 0 {
        return Err(Error::InvalidK(0));
    }
    ctx.check_noise(noise, k, 0)?;
    let tape = ctx.params.latent_mean.tape();
    let lb = LatentBatch::new(ctx.params, &ctx.batch.idx)?;
    let mut cols = Vec::with_capacity(k);
    let mut clamped = 0;
    let mut loglik = 0.0;
    for (eps_h, eps_f) in noise.latent.iter().zip(&noise.f) {
        let h = lb.sample(tape.constant(eps_h.clone()))?;
        let (ll, c) = ctx.loglik_rows(h, eps_f)?;
        clamped += c;
        loglik += ll.value().sum() / k as f64;
        cols.push(ll.add(log_prior_rows(h))?.sub(lb.log_q0_rows(h)?)?);
    }
    let w = Var::concat_cols(&cols)?;
    let wv = w.value();
    let shift = Matrix::from_fn(wv.rows(), 1, |i, _| {
        wv.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    });
    let shift = tape.constant(shift);
    let lme = w
        .sub(shift)?
        .exp()
        .row_sums()
        .ln()
        .add(shift)?
        .add_scalar(-(k as f64).ln());
    let elbo = lme.sum().scale(ctx.scale()).sub(ctx.inducing.kl(ctx.params)?)?;
    Ok(Estimate { elbo, loglik, clamped })
}

/// Settings of the annealed Langevin flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub schedule: AnnealingSchedule,
    pub step: StepSizeState,
    pub drift_scale: DriftScale,
    /// Stop gradients through the drift.
    pub detach: bool,
    /// When set to `κ`, chain `n` never steps further than `κ / tr(Σ_n⁻¹)`
    /// with `Σ_n` the covariance of its base distribution. After each move the
    /// cap also shrinks to `κ / λ̂`, where `λ̂` is the secant curvature
    /// `‖d(h') − d(h)‖ / ‖h' − h‖` of the drift along that move.
    pub step_cap: Option<f64>,
}

/// Per-term decomposition of one AIS estimate, already scaled by `N/B`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub likelihood: f64,
    pub prior_minus_q0: f64,
    pub neg_sum_r: f64,
    pub neg_kl: f64,
}

/// Everything the flow computed, for inspection and invariant checks.
#[derive(Debug, Clone, Default)]
pub struct AisTrace {
    /// `H_0 … H_K`.
    pub h: Vec<Matrix>,
    pub eps: Vec<Matrix>,
    pub eps_tilde: Vec<Matrix>,
    /// `∇log q_k(H_{k−1})`, the drift used by step `k`.
    pub drift_prev: Vec<Matrix>,
    /// `∇log q_k(H_k)`, the drift of the reverse move.
    pub drift_next: Vec<Matrix>,
    /// Per-chain step sizes, one vector per step.
    pub etas: Vec<Vec<f64>>,
    /// `R_{k−1}` summed over the batch.
    pub r: Vec<f64>,
    pub terms: ElboTerms,
}

struct FlowPoint<'t> {
    h: Var<'t>,
    /// Collapsed-likelihood score, already scaled.
    lik: Var<'t>,
    q0: Var<'t>,
}

/// Single-chain-per-point AIS bound:
/// `(N/B) Σ_n [log p(x_n | f, h_{n,K}) + log p(h_{n,K}) − log q_0(h_{n,0}) − Σ_k R_{k−1,n}] − KL_u`.
///
/// With [`LatentKl::Analytic`] the term `log p(h_{n,K}) − log q_0(h_{n,0})` is
/// evaluated as `log p(h_{n,K}) − log p(h_{n,0}) − KL(q_0 ‖ p)`, which has the
/// same expectation. [`LatentKl::Sampled`] keeps the raw log importance weight.
pub fn ais_elbo<'t>(
    ctx: &Context<'_, 't>,
    noise: &Noise,
    flow: &FlowConfig,
    kl: LatentKl,
) -> Result<(Estimate<'t>, AisTrace)> {
    let k = flow.schedule.k();
    ctx.check_noise(noise, 1, k)?;
    let b = ctx.params;
    let tape = b.latent_mean.tape();
    let lb = LatentBatch::new(b, &ctx.batch.idx)?;
    let h0 = lb.sample(tape.constant(noise.latent[0].clone()))?;

    let u = match &noise.u {
        None => b.inducing_mean,
        Some(eps_u) => {
            let m = b.num_inducing();
            let s = b.inducing_scale_raw.tri_from_raw(m)?;
            b.inducing_mean.add(s.batch_matvec(tape.constant(eps_u.clone()))?.t())?
        }
    };
    let lik_scale = match flow.drift_scale {
        DriftScale::BatchRatio => ctx.scale(),
        DriftScale::Unit => 1.0,
    };
    let phi = match flow.schedule.mode {
        AnnealMode::Learned => b.schedule_logits,
        AnnealMode::Linear => None,
    };
    let betas = betas_on_tape(tape, &flow.schedule, phi)?;

    let eval = |h: Var<'t>| -> Result<FlowPoint<'t>> {
        let hd = if flow.detach { h.detach() } else { h };
        let lik = collapsed_grad_h(b, ctx.inducing, ctx.batch, hd, u, ctx.ladder)?.scale(lik_scale);
        Ok(FlowPoint { h: hd, lik, q0: lb.grad_log_q0(hd)? })
    };
    // q0 + β (lik + prior − q0), with prior score −h.
    let drift = |p: &FlowPoint<'t>, beta: Var<'t>, step: usize| -> Result<Var<'t>> {
        let d = p.q0.add(p.lik.sub(p.h)?.sub(p.q0)?.mul(beta)?)?;
        let d = if flow.detach { d.detach() } else { d };
        if !d.value().all_finite() {
            return Err(Error::NonFiniteDrift { step });
        }
        Ok(d)
    };

    let mut trace = AisTrace {
        h: vec![(*h0.value()).clone()],
        ..AisTrace::default()
    };
    let rows = ctx.batch.len();
    let q = lb.latent_dim();
    let mut caps: Vec<f64> = match flow.step_cap {
        Some(kappa) => {
            let f = lb.factor.value();
            (0..rows).map(|n| kappa * precision_trace_bound(f.row(n), q)).collect()
        }
        None => vec![f64::INFINITY; rows],
    };
    let mut steps: Vec<StepSizeState> = vec![flow.step.restart(); rows];
    let column = |v: &[f64], f: fn(f64) -> f64| tape.constant(Matrix::from_fn(v.len(), 1, |n, _| f(v[n])));
    let mut cur = eval(h0)?;
    let mut h = h0;
    let mut r_rows: Option<Var<'t>> = None;
    for (i, eps) in noise.flow.iter().enumerate() {
        let beta = betas[i];
        let d_prev = drift(&cur, beta, i + 1)?;
        let dv = d_prev.value();
        let etas: Vec<f64> = (0..rows)
            .map(|n| {
                let g = dv.row(n).iter().map(|x| x * x).sum::<f64>() / q as f64;
                next_step_size(&mut steps[n], g).min(caps[n])
            })
            .collect();
        let eps_v = tape.constant(eps.clone());
        let h_before = h.value();
        h = h
            .add(d_prev.mul(column(&etas, |e| e))?)?
            .add(eps_v.mul(column(&etas, |e| (2.0 * e).sqrt()))?)?;
        let next = eval(h)?;
        let d_next = drift(&next, beta, i + 1)?;
        let eps_t = d_prev
            .add(d_next)?
            .mul(column(&etas, |e| -(0.5 * e).sqrt()))?
            .sub(eps_v)?;
        let r = eps_t.square().row_sums().sub(eps_v.square().row_sums())?.scale(0.5);
        if let Some(kappa) = flow.step_cap {
            let (hv, dn) = (h.value(), d_next.value());
            for (n, cap) in caps.iter_mut().enumerate() {
                let dh = row_distance(hv.row(n), h_before.row(n));
                let dd = row_distance(dn.row(n), dv.row(n));
                if dh > 0.0 && dd > 0.0 {
                    *cap = cap.min(kappa * dh / dd);
                }
            }
        }

        trace.h.push((*h.value()).clone());
        trace.eps.push(eps.clone());
        trace.eps_tilde.push((*eps_t.value()).clone());
        trace.drift_prev.push((*dv).clone());
        trace.drift_next.push((*d_next.value()).clone());
        trace.etas.push(etas);
        trace.r.push(r.value().sum());
        r_rows = Some(match r_rows {
            Some(acc) => acc.add(r)?,
            None => r,
        });
        cur = next;
    }

    let (ll, clamped) = ctx.loglik_rows(h, &noise.f[0])?;
    let prior_q0 = match kl {
        LatentKl::Analytic => log_prior_rows(h).sub(log_prior_rows(h0))?.sub(lb.kl_rows()?)?,
        LatentKl::Sampled => log_prior_rows(h).sub(lb.log_q0_rows(h0)?)?,
    };
    let mut per_point = ll.add(prior_q0)?;
    if let Some(r) = r_rows {
        per_point = per_point.sub(r)?;
    }
    let kl_u = ctx.inducing.kl(b)?;
    let elbo = per_point.sum().scale(ctx.scale()).sub(kl_u)?;

    let s = ctx.scale();
    trace.terms = ElboTerms {
        likelihood: s * ll.value().sum(),
        prior_minus_q0: s * prior_q0.value().sum(),
        neg_sum_r: -s * trace.r.iter().sum::<f64>(),
        neg_kl: -kl_u.item(),
    };
    let loglik = ll.value().sum();
    Ok((Estimate { elbo, loglik, clamped }, trace))
}

/// Euclidean distance between two rows.
fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
