use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{gram, KernelHyperparams, NoiseVariance};
use crate::linalg::{cholesky, JitterLadder, Matrix, RngStream};

/// Per-point Gaussian `q(h_n) = N(a_n, L_n L_nᵀ)`.
///
/// Row `n` of `scale_raw` packs `L_n` row-major as `Q·Q` numbers: strictly
/// lower entries as-is, diagonal entries as logs, upper entries ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVariational {
    pub mean: Matrix,
    pub scale_raw: Matrix,
}

/// Inducing inputs `Z` and `q(u_d) = N(m_d, S_d S_dᵀ)` for every output dimension.
///
/// `mean` is `m x D` with column `d` holding `m_d`; row `d` of `scale_raw`
/// packs `S_d` like [`LatentVariational::scale_raw`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingVariational {
    pub z: Matrix,
    pub mean: Matrix,
    pub scale_raw: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kernel: KernelHyperparams,
    pub noise: NoiseVariance,
    pub latent: LatentVariational,
    pub inducing: InducingVariational,
    /// Unconstrained annealing increments when the schedule is learned.
    pub schedule_logits: Option<Vec<f64>>,
}

/// Packs a lower-triangular factor into the raw row layout.
pub fn pack_lower(l: &Matrix) -> Result<Vec<f64>> {
    let q = l.rows();
    let mut out = vec![0.0; q * q];
    for i in 0..q {
        let d = l[(i, i)];
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
        }
        out[i * q + i] = d.ln();
        for j in 0..i {
            out[i * q + j] = l[(i, j)];
        }
    }
    Ok(out)
}

/// Inverse of [`pack_lower`].
pub fn unpack_lower(raw: &[f64], q: usize) -> Matrix {
    Matrix::from_fn(q, q, |i, j| {
        if i == j {
            raw[i * q + i].exp()
        } else if j < i {
            raw[i * q + j]
        } else {
            0.0
        }
    })
}

pub(crate) fn diag_positions(q: usize) -> Vec<usize> {
    (0..q).map(|i| i * q + i).collect()
}

impl LatentVariational {
    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.cols()
    }

    /// Lower-triangular `L_n`.
    pub fn scale_factor(&self, n: usize) -> Result<Matrix> {
        if n >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: self.len(),
            });
        }
        Ok(unpack_lower(self.scale_raw.row(n), self.latent_dim()))
    }

    /// Every `L_n` set to `c·I`.
    pub fn isotropic(mean: Matrix, c: f64) -> Self {
        let (n, q) = mean.shape();
        let mut raw = Matrix::zeros(n, q * q);
        for r in 0..n {
            for i in 0..q {
                raw[(r, i * q + i)] = c.ln();
            }
        }
        LatentVariational {
            mean,
            scale_raw: raw,
        }
    }
}

impl InducingVariational {
    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn scale_factor(&self, d: usize) -> Result<Matrix> {
        if d >= self.output_dim() {
            return Err(Error::IndexOutOfRange {
                index: d,
                len: self.output_dim(),
            });
        }
        Ok(unpack_lower(self.scale_raw.row(d), self.num_inducing()))
    }

    /// `q(u_d)` set equal to the prior `N(0, K_mm)` scaled by `scale` in its
    /// standard deviation.
    pub fn from_prior(z: Matrix, d: usize, kernel: &KernelHyperparams, scale: f64) -> Result<Self> {
        let m = z.rows();
        let kmm = gram(&z, kernel)?;
        let l = cholesky(&kmm, &JitterLadder::default())?.into_lower().scale(scale);
        let packed = pack_lower(&l)?;
        let mut raw = Matrix::zeros(d, m * m);
        for r in 0..d {
            raw.row_mut(r).copy_from_slice(&packed);
        }
        Ok(InducingVariational {
            z,
            mean: Matrix::zeros(m, d),
            scale_raw: raw,
        })
    }
}

/// Names of the trainable parameter groups, in storage order.
pub const PARAM_GROUPS: [&str; 9] = [
    "log_lengthscales",
    "log_signal_variance",
    "log_sigma2",
    "latent_mean",
    "latent_scale_raw",
    "inducing_inputs",
    "inducing_mean",
    "inducing_scale_raw",
    "schedule_logits",
];

impl ModelParams {
    pub fn latent_dim(&self) -> usize {
        self.kernel.latent_dim()
    }

    pub fn num_points(&self) -> usize {
        self.latent.len()
    }

    pub fn output_dim(&self) -> usize {
        self.inducing.output_dim()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.num_inducing()
    }

    /// All parameter groups as `(name, array)`; the schedule group is
    /// omitted when the schedule is fixed.
    pub fn to_arrays(&self) -> Vec<(&'static str, Matrix)> {
        let mut out = vec![
            (PARAM_GROUPS[0], self.kernel.log_ls_row()),
            (PARAM_GROUPS[1], Matrix::scalar(self.kernel.log_signal_variance)),
            (PARAM_GROUPS[2], Matrix::scalar(self.noise.log_sigma2)),
            (PARAM_GROUPS[3], self.latent.mean.clone()),
            (PARAM_GROUPS[4], self.latent.scale_raw.clone()),
            (PARAM_GROUPS[5], self.inducing.z.clone()),
            (PARAM_GROUPS[6], self.inducing.mean.clone()),
            (PARAM_GROUPS[7], self.inducing.scale_raw.clone()),
        ];
        if let Some(phi) = &self.schedule_logits {
            out.push((PARAM_GROUPS[8], Matrix::row_vector(phi)));
        }
        out
    }

    /// Writes arrays back in [`Self::to_arrays`] order, checking shapes.
    pub fn set_arrays(&mut self, arrays: &[Matrix]) -> Result<()> {
        let expected = self.to_arrays();
        if arrays.len() != expected.len() {
            return Err(Error::shape(
                "ModelParams::set_arrays",
                format!("{} groups", expected.len()),
                format!("{}", arrays.len()),
            ));
        }
        for ((name, cur), new) in expected.iter().zip(arrays) {
            if cur.shape() != new.shape() {
                return Err(Error::ShapeTableMismatch {
                    name: name.to_string(),
                    detail: format!("expected {:?}, got {:?}", cur.shape(), new.shape()),
                });
            }
        }
        self.kernel.log_lengthscales = arrays[0].as_slice().to_vec();
        self.kernel.log_signal_variance = arrays[1].item();
        self.noise.log_sigma2 = arrays[2].item();
        self.latent.mean = arrays[3].clone();
        self.latent.scale_raw = arrays[4].clone();
        self.inducing.z = arrays[5].clone();
        self.inducing.mean = arrays[6].clone();
        self.inducing.scale_raw = arrays[7].clone();
        if self.schedule_logits.is_some() {
            self.schedule_logits = Some(arrays[8].as_slice().to_vec());
        }
        Ok(())
    }

    /// Places every group on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Places every group on `tape` as a constant.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let arrays = self.to_arrays();
        let vars: Vec<Var<'t>> = arrays
            .into_iter()
            .map(|(_, m)| if trainable { tape.var(m) } else { tape.constant(m) })
            .collect();
        Bound::from_leaves(&vars).expect("to_arrays yields 8 or 9 groups")
    }
}

/// Model parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Bound<'t> {
    pub log_ls: Var<'t>,
    pub log_sf2: Var<'t>,
    pub log_sigma2: Var<'t>,
    pub latent_mean: Var<'t>,
    pub latent_scale_raw: Var<'t>,
    pub z: Var<'t>,
    pub inducing_mean: Var<'t>,
    pub inducing_scale_raw: Var<'t>,
    pub schedule_logits: Option<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Inverse of [`Bound::leaves`].
    pub fn from_leaves(vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != 8 && vars.len() != 9 {
            return Err(Error::shape("Bound::from_leaves", "8 or 9 groups", vars.len().to_string()));
        }
        Ok(Bound {
            log_ls: vars[0],
            log_sf2: vars[1],
            log_sigma2: vars[2],
            latent_mean: vars[3],
            latent_scale_raw: vars[4],
            z: vars[5],
            inducing_mean: vars[6],
            inducing_scale_raw: vars[7],
            schedule_logits: vars.get(8).copied(),
        })
    }

    /// Leaves in [`ModelParams::to_arrays`] order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut v = vec![
            self.log_ls,
            self.log_sf2,
            self.log_sigma2,
            self.latent_mean,
            self.latent_scale_raw,
            self.z,
            self.inducing_mean,
            self.inducing_scale_raw,
        ];
        v.extend(self.schedule_logits);
        v
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_mean.shape().1
    }

    pub fn num_points(&self) -> usize {
        self.latent_mean.shape().0
    }

    pub fn num_inducing(&self) -> usize {
        self.z.shape().0
    }

    pub fn output_dim(&self) -> usize {
        self.inducing_mean.shape().1
    }
}

/// Initialization options; see [`init_params`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitOptions {
    pub latent_dim: usize,
    pub num_inducing: usize,
    pub latent_scale: f64,
    pub noise_variance: f64,
    /// Standard-deviation multiplier on `chol(K_mm)` for the initial `S_d`.
    pub inducing_scale: f64,
}

impl InitOptions {
    pub fn new(latent_dim: usize, num_inducing: usize) -> Self {
        InitOptions {
            latent_dim,
            num_inducing,
            latent_scale: 0.1,
            noise_variance: 0.01,
            inducing_scale: 0.1,
        }
    }
}

/// Principal-component scores of `x` (rows = points), each scaled to unit
/// variance. Entries where `observed` is false are treated as zero.
pub fn pca_scores(x: &Matrix, observed: Option<&[bool]>, q: usize) -> Matrix {
    let (n, d) = x.shape();
    let filled = Matrix::from_fn(n, d, |i, j| match observed {
        Some(o) if !o[i * d + j] => 0.0,
        _ => x[(i, j)],
    });
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(filled.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered = Matrix::from_fn(n, d, |i, j| filled[(i, j)] - means[j]);
    let cov = crate::linalg::gemm(&centered, true, &centered, false).scale(1.0 / n.max(1) as f64);
    let na = nalgebra::DMatrix::from_row_slice(d, d, cov.as_slice());
    let eig = nalgebra::SymmetricEigen::new(na);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut scores = Matrix::zeros(n, q);
    for (k, &col) in order.iter().take(q).enumerate() {
        let v = eig.eigenvectors.column(col);
        // Sign convention: largest-magnitude loading positive.
        let (mut best, mut sign) = (0.0, 1.0);
        for val in v.iter() {
            if val.abs() > best {
                best = val.abs();
                sign = val.signum();
            }
        }
        let proj: Vec<f64> = (0..n)
            .map(|i| sign * centered.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let var = proj.iter().map(|p| p * p).sum::<f64>() / n.max(1) as f64;
        let s = if var > 1e-12 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            scores[(i, k)] = proj[i] / s;
        }
    }
    scores
}

/// Standard initialization: PCA latent means, `L_n = latent_scale·I`,
/// inducing inputs a random subset of the latent means, `m_d = 0` and
/// `S_d = inducing_scale·chol(K_mm)`.
///
/// When `Q` exceeds the data dimension, the extra latent columns are filled
/// with small Gaussian noise. Draws from `rng` only for the inducing subset
/// and such padding.
pub fn init_params(
    x: &Matrix,
    observed: Option<&[bool]>,
    opts: &InitOptions,
    rng: &mut RngStream,
) -> Result<ModelParams> {
    let (n, d) = x.shape();
    let q = opts.latent_dim;
    if q == 0 {
        return Err(Error::config("latent_dim", "must be at least 1"));
    }
    if opts.num_inducing == 0 || opts.num_inducing > n {
        return Err(Error::config(
            "num_inducing",
            format!("need 1 <= m <= N={n}, got {}", opts.num_inducing),
        ));
    }
    let pcs = pca_scores(x, observed, q.min(d));
    let mut mean = Matrix::zeros(n, q);
    for i in 0..n {
        mean.row_mut(i)[..q.min(d)].copy_from_slice(pcs.row(i));
    }
    if q > d {
        let pad = rng.normal_matrix(n, q - d).scale(0.1);
        for i in 0..n {
            mean.row_mut(i)[d..].copy_from_slice(pad.row(i));
        }
    }
    let subset = rng.sample_indices(n, opts.num_inducing);
    let z = mean.select_rows(&subset);
    let kernel = KernelHyperparams::unit(q);
    let inducing = InducingVariational::from_prior(z, d, &kernel, opts.inducing_scale)?;
    Ok(ModelParams {
        kernel,
        noise: NoiseVariance::new(opts.noise_variance),
        latent: LatentVariational::isotropic(mean, opts.latent_scale),
        inducing,
        schedule_logits: None,
    })
}
