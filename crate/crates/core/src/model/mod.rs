//! Sparse variational Bayesian GPLVM: parameters, the variational
//! predictive for `f`, KL terms and the collapsed Gaussian likelihood whose
//! latent gradient drives the Langevin flow.
//!
//! Everything that enters a training objective is written as a tape
//! expression over a [`Bound`] parameter set. The free functions at the
//! bottom of this file evaluate the same expressions on constant tapes.

mod params;

use std::f64::consts::PI;

pub use params::{
    init_params, pack_lower, pca_scores, unpack_lower, Bound, InducingVariational, InitOptions,
    LatentVariational, ModelParams, PARAM_GROUPS,
};
pub(crate) use params::diag_positions;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{cross, KernelHyperparams, NoiseVariance};
use crate::linalg::{chol_solve, cholesky, JitterLadder, Matrix, RngStream, Side};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Floor applied to predictive marginal variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Rows of the data set taken into one objective evaluation.
#[derive(Debug, Clone)]
pub struct Batch {
    pub idx: Vec<usize>,
    pub x: Matrix,
    /// Row-major `B x D` observed flags; `None` means fully observed.
    pub observed: Option<Vec<bool>>,
}

/// Output dimensions sharing one pattern of observed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DimGroup {
    pub rows: Vec<usize>,
    pub dims: Vec<usize>,
}

impl Batch {
    pub fn new(idx: Vec<usize>, x: Matrix, observed: Option<Vec<bool>>) -> Result<Self> {
        if idx.len() != x.rows() {
            return Err(Error::shape("Batch::new", format!("{} rows", idx.len()), format!("{}", x.rows())));
        }
        if let Some(o) = &observed {
            if o.len() != x.len() {
                return Err(Error::shape("Batch::new", format!("{} mask entries", x.len()), format!("{}", o.len())));
            }
        }
        Ok(Batch { idx, x, observed })
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn is_observed(&self, i: usize, d: usize) -> bool {
        match &self.observed {
            Some(o) => o[i * self.x.cols() + d],
            None => true,
        }
    }

    pub fn num_observed(&self) -> usize {
        match &self.observed {
            Some(o) => o.iter().filter(|&&b| b).count(),
            None => self.x.len(),
        }
    }

    /// 0/1 matrix of observed flags.
    pub fn mask_matrix(&self) -> Matrix {
        let (b, d) = self.x.shape();
        Matrix::from_fn(b, d, |i, j| if self.is_observed(i, j) { 1.0 } else { 0.0 })
    }

    /// `x` with unobserved entries zeroed.
    pub fn masked_x(&self) -> Matrix {
        let (b, d) = self.x.shape();
        Matrix::from_fn(b, d, |i, j| if self.is_observed(i, j) { self.x[(i, j)] } else { 0.0 })
    }

    /// Dimensions grouped by their set of observed rows, in order of first
    /// appearance. Dimensions with no observed row are dropped.
    pub fn dim_groups(&self) -> Vec<DimGroup> {
        let (b, d) = self.x.shape();
        if self.observed.is_none() {
            return vec![DimGroup {
                rows: (0..b).collect(),
                dims: (0..d).collect(),
            }];
        }
        let mut groups: Vec<DimGroup> = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        for j in 0..d {
            let rows: Vec<usize> = (0..b).filter(|&i| self.is_observed(i, j)).collect();
            if rows.is_empty() {
                continue;
            }
            let g = *lookup.entry(rows.clone()).or_insert_with(|| {
                groups.push(DimGroup { rows, dims: Vec::new() });
                groups.len() - 1
            });
            groups[g].dims.push(j);
        }
        groups
    }

    /// Same rows in a different order.
    pub fn permuted(&self, perm: &[usize]) -> Batch {
        let d = self.x.cols();
        Batch {
            idx: perm.iter().map(|&p| self.idx[p]).collect(),
            x: self.x.select_rows(perm),
            observed: self.observed.as_ref().map(|o| {
                perm.iter()
                    .flat_map(|&p| o[p * d..(p + 1) * d].iter().copied())
                    .collect()
            }),
        }
    }
}

/// Quantities depending only on the inducing inputs and `q(u)`, computed
/// once per tape.
#[derive(Clone, Copy, Debug)]
pub struct InducingTerms<'t> {
    /// Cholesky factor of `K_mm`.
    pub lm: Var<'t>,
    /// `[S_1 … S_D]`, `m x mD`.
    pub s_blocks: Var<'t>,
}

impl<'t> InducingTerms<'t> {
    pub fn new(b: &Bound<'t>, ladder: &JitterLadder) -> Result<Self> {
        let m = b.num_inducing();
        let kmm = b.z.kernel_gram(b.log_ls, b.log_sf2)?;
        let lm = kmm.cholesky(ladder)?;
        let s_blocks = b.inducing_scale_raw.tri_from_raw(m)?.rows_to_blocks(m)?;
        Ok(InducingTerms { lm, s_blocks })
    }

    /// `Σ_d KL(q(u_d) ‖ N(0, K_mm))`.
    pub fn kl(&self, b: &Bound<'t>) -> Result<Var<'t>> {
        let (m, d) = (b.num_inducing(), b.output_dim());
        let trace = self.lm.tri_solve(self.s_blocks, Side::Lower)?.square().sum();
        let maha = self.lm.tri_solve(b.inducing_mean, Side::Lower)?.square().sum();
        let logdet_k = self.lm.logdet_chol()?.scale(d as f64);
        let logdet_s = b
            .inducing_scale_raw
            .select_cols(&diag_positions(m))?
            .sum()
            .scale(2.0);
        Ok(trace
            .add(maha)?
            .add(logdet_k)?
            .sub(logdet_s)?
            .add_scalar(-((m * d) as f64))
            .scale(0.5))
    }

    /// `L_m⁻¹ K_mn` for latent inputs `h`, together with `K_nm`.
    pub fn project(&self, b: &Bound<'t>, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let knm = h.kernel_cross(b.z, b.log_ls, b.log_sf2)?;
        let w = self.lm.tri_solve(knm.t(), Side::Lower)?;
        Ok((knm, w))
    }
}

/// Per-point moments of `q(f_d(h_n))` for every output dimension.
#[derive(Clone, Copy, Debug)]
pub struct Predictive<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
    /// Entries raised to [`VARIANCE_FLOOR`].
    pub clamped: usize,
}

impl<'t> Predictive<'t> {
    /// `f = mean + √var ⊙ eps` with `eps` of shape `B x D`.
    pub fn sample(&self, eps: Var<'t>) -> Result<Var<'t>> {
        self.mean.add(self.var.sqrt().mul(eps)?)
    }
}

/// Mean `K_nm K_mm⁻¹ m_d` and marginal variance
/// `k_nn − k_nᵀK_mm⁻¹k_n + ‖S_dᵀ K_mm⁻¹ k_n‖²` at the rows of `h`.
pub fn predictive<'t>(b: &Bound<'t>, ind: &InducingTerms<'t>, h: Var<'t>) -> Result<Predictive<'t>> {
    let (n, d) = (h.shape().0, b.output_dim());
    let m = b.num_inducing();
    let (_, w) = ind.project(b, h)?;
    let v = ind.lm.tri_solve(w, Side::Upper)?;
    let mean = v.t().matmul(b.inducing_mean)?;
    let explained = w.square().col_sums().t();
    let extra = v.t().matmul(ind.s_blocks)?.square().segment_sums(m)?;
    let raw = extra
        .sub(explained)?
        .add(b.log_sf2.exp())?
        .broadcast_to(n, d)?;
    let clamped = raw.value().as_slice().iter().filter(|&&x| !(x >= VARIANCE_FLOOR)).count();
    Ok(Predictive {
        mean,
        var: raw.clamp_min(VARIANCE_FLOOR),
        clamped,
    })
}

/// Row sums of `mask ⊙ log N(x; f, σ²)`, a `B x 1` column.
pub fn cond_loglik_rows<'t>(batch: &Batch, f: Var<'t>, log_sigma2: Var<'t>) -> Result<Var<'t>> {
    let tape = f.tape();
    let x = tape.constant(batch.masked_x());
    let mask = tape.constant(batch.mask_matrix());
    let inv = log_sigma2.neg().exp();
    let quad = x.sub(f)?.square().mul(inv)?.scale(-0.5);
    let norm = log_sigma2.add_scalar(LOG_2PI).scale(-0.5);
    Ok(quad.add(norm)?.mul(mask)?.row_sums())
}

/// Rows of the latent posterior `q(h_n)` selected by a batch.
#[derive(Clone, Copy, Debug)]
pub struct LatentBatch<'t> {
    pub mean: Var<'t>,
    pub raw: Var<'t>,
    /// Packed lower factors `L_n`.
    pub factor: Var<'t>,
}

impl<'t> LatentBatch<'t> {
    pub fn new(b: &Bound<'t>, idx: &[usize]) -> Result<Self> {
        let q = b.latent_dim();
        let raw = b.latent_scale_raw.gather_rows(idx)?;
        Ok(LatentBatch {
            mean: b.latent_mean.gather_rows(idx)?,
            raw,
            factor: raw.tri_from_raw(q)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.shape().1
    }

    /// `h_n = a_n + L_n ε_n`.
    pub fn sample(&self, eps: Var<'t>) -> Result<Var<'t>> {
        self.mean.add(self.factor.batch_matvec(eps)?)
    }

    fn log_det_rows(&self) -> Result<Var<'t>> {
        Ok(self
            .raw
            .select_cols(&diag_positions(self.latent_dim()))?
            .row_sums()
            .scale(2.0))
    }

    /// `log q_0(h_n)` per row.
    pub fn log_q0_rows(&self, h: Var<'t>) -> Result<Var<'t>> {
        let q = self.latent_dim() as f64;
        let z = self.factor.batch_tri_solve(h.sub(self.mean)?, Side::Lower)?;
        Ok(z.square()
            .row_sums()
            .add(self.log_det_rows()?)?
            .add_scalar(q * LOG_2PI)
            .scale(-0.5))
    }

    /// `∇_h log q_0(h) = −(L Lᵀ)⁻¹(h − a)` row by row.
    pub fn grad_log_q0(&self, h: Var<'t>) -> Result<Var<'t>> {
        let z = self.factor.batch_tri_solve(h.sub(self.mean)?, Side::Lower)?;
        Ok(self.factor.batch_tri_solve(z, Side::Upper)?.neg())
    }

    /// Closed-form `KL(q(h_n) ‖ N(0, I))` per row.
    pub fn kl_rows(&self) -> Result<Var<'t>> {
        let q = self.latent_dim() as f64;
        Ok(self
            .factor
            .square()
            .row_sums()
            .add(self.mean.square().row_sums())?
            .sub(self.log_det_rows()?)?
            .add_scalar(-q)
            .scale(0.5))
    }
}

/// `log N(h_n; 0, I)` per row.
pub fn log_prior_rows(h: Var<'_>) -> Var<'_> {
    let q = h.shape().1 as f64;
    h.square().row_sums().add_scalar(q * LOG_2PI).scale(-0.5)
}

/// Factorized per-group pieces of the collapsed likelihood.
struct GroupTerms<'t> {
    rows: Vec<usize>,
    h: Var<'t>,
    knm: Var<'t>,
    v: Var<'t>,
    sigma_chol: Var<'t>,
    /// `L_Σ⁻¹ R`.
    whitened: Var<'t>,
    dims: Vec<usize>,
}

fn group_terms<'t>(
    b: &Bound<'t>,
    ind: &InducingTerms<'t>,
    batch: &Batch,
    h: Var<'t>,
    u: Var<'t>,
    ladder: &JitterLadder,
) -> Result<Vec<GroupTerms<'t>>> {
    let tape = h.tape();
    let n = batch.len();
    let (knm_all, w_all) = ind.project(b, h)?;
    let v_all = ind.lm.tri_solve(w_all, Side::Upper)?;
    let sigma2 = b.log_sigma2.exp();
    let mut out = Vec::new();
    for g in batch.dim_groups() {
        let full = g.rows.len() == n;
        let (hg, knm, w, v) = if full {
            (h, knm_all, w_all, v_all)
        } else {
            (
                h.gather_rows(&g.rows)?,
                knm_all.gather_rows(&g.rows)?,
                w_all.select_cols(&g.rows)?,
                v_all.select_cols(&g.rows)?,
            )
        };
        let sigma = w.t().matmul(w)?.add(tape.eye(g.rows.len()).mul(sigma2)?)?;
        let sigma_chol = sigma.cholesky(ladder)?;
        let xg = Matrix::from_fn(g.rows.len(), g.dims.len(), |i, j| batch.x[(g.rows[i], g.dims[j])]);
        let ug = if g.dims.len() == batch.x.cols() { u } else { u.select_cols(&g.dims)? };
        let resid = tape.constant(xg).sub(v.t().matmul(ug)?)?;
        let whitened = sigma_chol.tri_solve(resid, Side::Lower)?;
        out.push(GroupTerms {
            rows: g.rows,
            h: hg,
            knm,
            v,
            sigma_chol,
            whitened,
            dims: g.dims,
        });
    }
    Ok(out)
}

/// `Σ_d log N(x_d; K_nm K_mm⁻¹ u_d, Q_nn + σ²I)` over the observed rows of
/// each dimension, with `u` the `m x D` matrix of inducing values.
pub fn collapsed_loglik<'t>(
    b: &Bound<'t>,
    ind: &InducingTerms<'t>,
    batch: &Batch,
    h: Var<'t>,
    u: Var<'t>,
    ladder: &JitterLadder,
) -> Result<Var<'t>> {
    let mut total = h.tape().scalar(0.0);
    for g in group_terms(b, ind, batch, h, u, ladder)? {
        let nd = g.dims.len() as f64;
        let no = g.rows.len() as f64;
        let term = g
            .whitened
            .square()
            .sum()
            .add(g.sigma_chol.logdet_chol()?.scale(nd))?
            .add_scalar(nd * no * LOG_2PI)
            .scale(-0.5);
        total = total.add(term)?;
    }
    Ok(total)
}

/// `∇_h` of [`collapsed_loglik`] as an explicit tape expression (`B x Q`).
///
/// With `α = Σ⁻¹R`, `G = ½(ααᵀ − |D_g| Σ⁻¹)` and `G_s = G + Gᵀ`, the
/// adjoint of `K_Om` is `α(K_mm⁻¹U)ᵀ + G_s K_Om K_mm⁻¹`, pushed through the
/// SE-ARD input derivative.
pub fn collapsed_grad_h<'t>(
    b: &Bound<'t>,
    ind: &InducingTerms<'t>,
    batch: &Batch,
    h: Var<'t>,
    u: Var<'t>,
    ladder: &JitterLadder,
) -> Result<Var<'t>> {
    let tape = h.tape();
    let (n, q) = h.shape();
    let inv_ls2 = b.log_ls.scale(-2.0).exp();
    let ku = ind
        .lm
        .tri_solve(ind.lm.tri_solve(u, Side::Lower)?, Side::Upper)?;
    let mut total: Option<Var<'t>> = None;
    for g in group_terms(b, ind, batch, h, u, ladder)? {
        let no = g.rows.len();
        let alpha = g.sigma_chol.tri_solve(g.whitened, Side::Upper)?;
        let sigma_inv = g
            .sigma_chol
            .tri_solve(g.sigma_chol.tri_solve(tape.eye(no), Side::Lower)?, Side::Upper)?;
        let gmat = alpha
            .matmul(alpha.t())?
            .sub(sigma_inv.scale(g.dims.len() as f64))?
            .scale(0.5);
        let gs = gmat.add(gmat.t())?;
        let kug = if g.dims.len() == batch.x.cols() { ku } else { ku.select_cols(&g.dims)? };
        let g_nm = alpha.matmul(kug.t())?.add(gs.matmul(g.v.t())?)?;
        let p_nm = g_nm.mul(g.knm)?;
        let grad = p_nm.matmul(b.z)?.sub(p_nm.row_sums().mul(g.h)?)?.mul(inv_ls2)?;
        let grad = if no == n { grad } else { grad.scatter_rows(&g.rows, n)? };
        total = Some(match total {
            Some(t) => t.add(grad)?,
            None => grad,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Matrix::zeros(n, q))))
}

// ----- plain evaluations -------------------------------------------------

/// `log N(h; a_n, L_n L_nᵀ)`.
pub fn log_q0(h: &[f64], latent: &LatentVariational, n: usize) -> Result<f64> {
    if n >= latent.len() {
        return Err(Error::IndexOutOfRange { index: n, len: latent.len() });
    }
    let q = latent.latent_dim();
    if h.len() != q {
        return Err(Error::shape("log_q0", format!("Q={q}"), format!("{}", h.len())));
    }
    let tape = Tape::new();
    let lb = LatentBatch {
        mean: tape.constant(Matrix::row_vector(latent.mean.row(n))),
        raw: tape.constant(Matrix::row_vector(latent.scale_raw.row(n))),
        factor: tape.constant(Matrix::row_vector(latent.scale_raw.row(n))).tri_from_raw(q)?,
    };
    Ok(lb.log_q0_rows(tape.constant(Matrix::row_vector(h)))?.item())
}

/// Standard normal log-density.
pub fn log_prior_latent(h: &[f64]) -> f64 {
    -0.5 * (h.len() as f64 * LOG_2PI + h.iter().map(|x| x * x).sum::<f64>())
}

/// `Σ_d KL(q(u_d) ‖ p(u_d))` with `p(u_d) = N(0, K_mm)`.
pub fn kl_inducing(params: &ModelParams) -> Result<f64> {
    let tape = Tape::new();
    let b = params.bind_constant(&tape);
    let ind = InducingTerms::new(&b, &JitterLadder::default())?;
    Ok(ind.kl(&b)?.item())
}

/// Draw of `f_d` at the rows of `h`; returns the draw and its standard-normal noise.
pub fn sample_f_at(
    h: &Matrix,
    params: &ModelParams,
    d: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if d >= params.output_dim() {
        return Err(Error::IndexOutOfRange { index: d, len: params.output_dim() });
    }
    let (mean, var, _) = predictive_moments(h, params)?;
    let eps = rng.standard_normal(h.rows())?;
    let f = (0..h.rows())
        .map(|n| mean[(n, d)] + var[(n, d)].sqrt() * eps[n])
        .collect();
    Ok((f, eps))
}

/// Mean, clamped variance and clamp count of `q(f)` at the rows of `h`.
pub fn predictive_moments(h: &Matrix, params: &ModelParams) -> Result<(Matrix, Matrix, usize)> {
    if h.cols() != params.latent_dim() {
        return Err(Error::shape(
            "predictive_moments",
            format!("Q={}", params.latent_dim()),
            format!("{}", h.cols()),
        ));
    }
    let tape = Tape::new();
    let b = params.bind_constant(&tape);
    let ind = InducingTerms::new(&b, &JitterLadder::default())?;
    let p = predictive(&b, &ind, tape.constant(h.clone()))?;
    Ok(((*p.mean.value()).clone(), (*p.var.value()).clone(), p.clamped))
}

/// `−½ log(2πσ²) − (x − f)²/(2σ²)`.
pub fn cond_loglik(x: f64, f: f64, noise: &NoiseVariance) -> f64 {
    let s2 = noise.sigma2();
    -0.5 * (2.0 * PI * s2).ln() - (x - f).powi(2) / (2.0 * s2)
}

/// Predictive mean `K_hm K_mm⁻¹ m_d` for every row of `h`.
pub fn reconstruct(h: &Matrix, inducing: &InducingVariational, kernel: &KernelHyperparams) -> Result<Matrix> {
    let kmm = crate::kernels::gram(&inducing.z, kernel)?;
    let f = cholesky(&kmm, &JitterLadder::default())?;
    let a = chol_solve(&f, &inducing.mean)?;
    cross(h, &inducing.z, kernel)?.matmul(&a)
}
