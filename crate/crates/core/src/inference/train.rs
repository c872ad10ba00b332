use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::estimators::{
    ais_elbo, iw_elbo, mf_elbo, AisTrace, Context, DriftScale, Estimate, FlowConfig, LatentKl, Method, Noise,
    NoiseShape,
};
use super::langevin::StepSizeState;
use super::optim::{Optimizer, OptimizerKind};
use super::schedule::{initial_logits, make_schedule, AnnealMode};
use crate::autodiff::{Tape, Var};
use crate::data::{params_from_arrays, params_to_arrays, Checkpoint, Dataset, MetricRecord, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::linalg::{JitterLadder, Matrix, RngStream};
use crate::model::{init_params, kl_inducing, reconstruct, Batch, InducingTerms, InitOptions, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Flow length for AIS, sample count for IW.
    pub k: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub num_inducing: usize,
    pub anneal: AnnealMode,
    /// Initial Langevin step size; resolved from the initial latents when absent.
    pub step_size: Option<f64>,
    pub adaptive_step: bool,
    pub eta_min: f64,
    pub eta_max: f64,
    /// Per-chain step-size cap `κ / tr(Σ_n⁻¹)`; `None` disables it.
    pub step_cap: Option<f64>,
    pub detach_flow: bool,
    pub drift_scale: DriftScale,
    /// Draw inducing values for the drift mean instead of using `m_d`.
    pub sample_u: bool,
    pub latent_kl: LatentKl,
    pub optimizer: OptimizerKind,
    pub latent_scale_init: f64,
    pub noise_init: f64,
    /// Run the full-data evaluation every this many iterations (0 = only at the end).
    pub eval_every: usize,
    pub max_skip_fraction: f64,
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            iters: 3000,
            batch: 100,
            lr: 0.02,
            k: 5,
            seed: 0,
            latent_dim: 10,
            num_inducing: 50,
            anneal: AnnealMode::Linear,
            step_size: None,
            adaptive_step: true,
            eta_min: 1e-5,
            eta_max: 0.5,
            step_cap: Some(1.0),
            detach_flow: false,
            drift_scale: DriftScale::Unit,
            sample_u: false,
            latent_kl: LatentKl::Analytic,
            optimizer: OptimizerKind::Adam,
            latent_scale_init: 0.1,
            noise_init: 0.01,
            eval_every: 100,
            max_skip_fraction: 0.05,
            record_wall_time: false,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch == 0 || self.batch > n {
            return Err(Error::config("batch", format!("need 1 <= B <= N={n}, got {}", self.batch)));
        }
        if self.method != Method::Mf && self.k == 0 {
            return Err(Error::config("k", "must be at least 1 for iw and ais"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if let Some(eta) = self.step_size {
            if !(eta >= 0.0) {
                return Err(Error::config("step_size", "must be non-negative"));
            }
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max) {
            return Err(Error::config("eta_min", "need 0 < eta_min <= eta_max"));
        }
        if let Some(kappa) = self.step_cap {
            if !(kappa > 0.0) {
                return Err(Error::config("step_cap", "must be positive"));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be at least 1"));
        }
        if self.num_inducing == 0 || self.num_inducing > n {
            return Err(Error::config("inducing", format!("need 1 <= m <= N={n}")));
        }
        if !(0.0..1.0).contains(&self.max_skip_fraction) {
            return Err(Error::config("max_skip_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Flow settings for the AIS estimator.
    pub fn flow(&self, params: &ModelParams) -> Result<FlowConfig> {
        let eta0 = self
            .step_size
            .ok_or_else(|| Error::config("step_size", "unresolved; construct a Trainer first"))?;
        let schedule = make_schedule(self.k, self.anneal, params.schedule_logits.as_deref())?;
        let mut step = StepSizeState::new(eta0, self.adaptive_step);
        step.eta_min = self.eta_min;
        step.eta_max = self.eta_max;
        Ok(FlowConfig {
            schedule,
            step,
            drift_scale: self.drift_scale,
            detach: self.detach_flow,
            step_cap: self.step_cap,
        })
    }

    fn noise_shape(&self, params: &ModelParams, b: usize) -> NoiseShape {
        NoiseShape {
            b,
            q: params.latent_dim(),
            d: params.output_dim(),
            m: params.num_inducing(),
            k: self.k,
            sample_u: self.sample_u,
        }
    }
}

/// `10⁻³ · median²` of the pairwise distances between the rows of `a`
/// (the first 1000 rows when larger).
pub fn default_step_size(a: &Matrix) -> f64 {
    let n = a.rows().min(1000);
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            let s: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| (x - y).powi(2)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1e-3;
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    1e-3 * *med * *med
}

/// One estimator evaluation on `tape`.
pub fn objective<'t>(
    ctx: &Context<'_, 't>,
    method: Method,
    noise: &Noise,
    flow: Option<&FlowConfig>,
    latent_kl: LatentKl,
) -> Result<(Estimate<'t>, Option<AisTrace>)> {
    match method {
        Method::Mf => Ok((mf_elbo(ctx, noise, latent_kl)?, None)),
        Method::Iw => Ok((iw_elbo(ctx, noise)?, None)),
        Method::Ais => {
            let flow = flow.ok_or_else(|| Error::config("flow", "ais needs flow settings"))?;
            let (e, t) = ais_elbo(ctx, noise, flow, latent_kl)?;
            Ok((e, Some(t)))
        }
    }
}

/// Value and parameter gradients of one estimate (gradients of the ELBO, not the loss).
pub fn elbo_and_grads(
    params: &ModelParams,
    batch: &Batch,
    n_total: usize,
    method: Method,
    noise: &Noise,
    flow: Option<&FlowConfig>,
    latent_kl: LatentKl,
) -> Result<(f64, Vec<Matrix>)> {
    let tape = Tape::new();
    let b = params.bind(&tape);
    let ladder = JitterLadder::default();
    let ind = InducingTerms::new(&b, &ladder)?;
    let ctx = Context {
        params: &b,
        inducing: &ind,
        batch,
        n_total,
        ladder: &ladder,
    };
    let (est, _) = objective(&ctx, method, noise, flow, latent_kl)?;
    let grads = tape.backward(est.elbo)?;
    let leaves: Vec<Var<'_>> = b.leaves();
    Ok((est.elbo.item(), leaves.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Mutable state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub rng: RngStream,
    pub iteration: usize,
    pub skipped: usize,
}

impl Trainer {
    /// Validates `config`, initializes parameters and materializes every
    /// default that depends on the data.
    pub fn new(ds: &Dataset, mut config: TrainConfig) -> Result<Self> {
        config.validate(ds.n())?;
        let mut rng = RngStream::new(config.seed);
        let mut opts = InitOptions::new(config.latent_dim, config.num_inducing);
        opts.latent_scale = config.latent_scale_init;
        opts.noise_variance = config.noise_init;
        let mut params = init_params(&ds.x, ds.observed(), &opts, &mut rng)?;
        if config.method == Method::Ais && config.anneal == AnnealMode::Learned {
            params.schedule_logits = Some(initial_logits(config.k));
        }
        if config.step_size.is_none() {
            config.step_size = Some(default_step_size(&params.latent.mean));
        }
        let shapes: Vec<_> = params.to_arrays().iter().map(|(_, m)| m.shape()).collect();
        let optimizer = Optimizer::new(config.optimizer, config.lr, &shapes);
        Ok(Trainer {
            config,
            params,
            optimizer,
            rng,
            iteration: 0,
            skipped: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iters
    }

    /// One stochastic-gradient iteration. Recoverable numerical failures
    /// skip the update and are reported in the record.
    pub fn step(&mut self, ds: &Dataset) -> Result<MetricRecord> {
        let start = Instant::now();
        let it = self.iteration;
        let cfg = &self.config;
        let idx = self.rng.sample_indices(ds.n(), cfg.batch);
        let batch = ds.batch(&idx);
        let noise = Noise::draw(cfg.method, cfg.noise_shape(&self.params, cfg.batch), &mut self.rng);
        let flow = match cfg.method {
            Method::Ais => Some(cfg.flow(&self.params)?),
            _ => None,
        };
        let outcome = elbo_and_grads(&self.params, &batch, ds.n(), cfg.method, &noise, flow.as_ref(), cfg.latent_kl);
        let mut record = MetricRecord {
            iter: it,
            neg_elbo: None,
            mse: None,
            nell: None,
            wall_ms: None,
            skipped_flag: false,
        };
        match outcome {
            Ok((elbo, grads)) if elbo.is_finite() && grads.iter().all(Matrix::all_finite) => {
                let mut arrays: Vec<Matrix> = self.params.to_arrays().into_iter().map(|(_, m)| m).collect();
                let n = ds.n() as f64;
                let loss_grads: Vec<Matrix> = grads.iter().map(|g| g.scale(-1.0 / n)).collect();
                self.optimizer.update(&mut arrays, &loss_grads)?;
                self.params.set_arrays(&arrays)?;
                record.neg_elbo = Some(-elbo / n);
            }
            Ok(_) => {
                log::warn!("iteration {it}: non-finite objective or gradient, update skipped");
                self.skipped += 1;
                record.skipped_flag = true;
            }
            Err(e) if e.is_recoverable() => {
                log::warn!("iteration {it}: {e}; update skipped");
                self.skipped += 1;
                record.skipped_flag = true;
            }
            Err(e) => return Err(e),
        }
        self.iteration += 1;
        let done = self.iteration;
        if done >= 20 && self.skipped as f64 > self.config.max_skip_fraction * done as f64 {
            return Err(Error::TooManySkipped {
                skipped: self.skipped,
                total: done,
            });
        }
        let eval_now = done == self.config.iters || (self.config.eval_every > 0 && done % self.config.eval_every == 0);
        if eval_now {
            let mut erng = eval_rng(self.config.seed, done);
            let rep = evaluate(&self.params, ds, &self.config, 1, &mut erng)?;
            record.mse = Some(rep.mse);
            record.nell = Some(rep.nell);
        }
        if self.config.record_wall_time {
            record.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(record)
    }

    /// Iterates until `config.iters`, handing each record to `sink`.
    pub fn run(&mut self, ds: &Dataset, mut sink: impl FnMut(&MetricRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step(ds)?;
            sink(&rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, ds: &Dataset) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: serde_json::to_value(&self.config).expect("config serializes"),
            iteration: self.iteration,
            skipped: self.skipped,
            rng: self.rng.state(),
            params: params_to_arrays(&self.params),
            optimizer: Some(self.optimizer.clone()),
            standardization: ds.standardization.clone(),
            masked: ds.masked_indices(),
        }
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
        let params = params_from_arrays(&ckpt.params)?;
        let optimizer = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::CorruptCheckpoint("no optimizer state".into()))?;
        Ok(Trainer {
            config,
            params,
            optimizer,
            rng: RngStream::from_state(ckpt.rng.clone()),
            iteration: ckpt.iteration,
            skipped: ckpt.skipped,
        })
    }
}

/// Evaluation stream independent of the training stream.
pub fn eval_rng(seed: u64, iteration: usize) -> RngStream {
    RngStream::new(seed ^ 0x9E37_79B9_7F4A_7C15 ^ (iteration as u64).wrapping_mul(0x2545_F491_4F6C_DD1D))
}

/// Trains from scratch; returns the final parameters and every record.
pub fn train(ds: &Dataset, config: TrainConfig) -> Result<(ModelParams, Vec<MetricRecord>)> {
    let mut t = Trainer::new(ds, config)?;
    let mut out = Vec::with_capacity(t.config.iters);
    t.run(ds, |r| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok((t.params, out))
}

/// Full-data estimates, per data point, with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub neg_elbo: f64,
    pub neg_elbo_se: f64,
    pub nell: f64,
    pub nell_se: f64,
    /// Mean squared error of the predictive mean at the latent means over
    /// observed entries, in original units.
    pub mse: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs the configured estimator over the whole data set in consecutive
/// chunks of `config.batch` rows, `samples` times.
pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    config: &TrainConfig,
    samples: usize,
    rng: &mut RngStream,
) -> Result<EvalReport> {
    if samples == 0 {
        return Err(Error::config("samples", "must be at least 1"));
    }
    let n = ds.n();
    let kl_u = kl_inducing(params)?;
    let flow = match config.method {
        Method::Ais => Some(config.flow(params)?),
        _ => None,
    };
    let ladder = JitterLadder::default();
    let mut elbos = Vec::with_capacity(samples);
    let mut nells = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut per_point_sum = 0.0;
        let mut ll_sum = 0.0;
        let mut start = 0;
        while start < n {
            let len = config.batch.min(n - start);
            let idx: Vec<usize> = (start..start + len).collect();
            let batch = ds.batch(&idx);
            let noise = Noise::draw(config.method, config.noise_shape(params, len), rng);
            let tape = Tape::new();
            let b = params.bind_constant(&tape);
            let ind = InducingTerms::new(&b, &ladder)?;
            let ctx = Context {
                params: &b,
                inducing: &ind,
                batch: &batch,
                n_total: n,
                ladder: &ladder,
            };
            let (est, _) = objective(&ctx, config.method, &noise, flow.as_ref(), config.latent_kl)?;
            per_point_sum += (est.elbo.item() + kl_u) * len as f64 / n as f64;
            ll_sum += est.loglik;
            start += len;
        }
        elbos.push(-(per_point_sum - kl_u) / n as f64);
        nells.push(-ll_sum / n as f64);
    }
    let (neg_elbo, neg_elbo_se) = mean_se(&elbos);
    let (nell, nell_se) = mean_se(&nells);
    Ok(EvalReport {
        samples,
        neg_elbo,
        neg_elbo_se,
        nell,
        nell_se,
        mse: observed_mse(params, ds)?,
    })
}

/// See [`EvalReport::mse`].
pub fn observed_mse(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    let pred = reconstruct(&params.latent.mean, &params.inducing, &params.kernel)?;
    let scale = ds
        .standardization
        .as_ref()
        .map(|s| s.scale.clone())
        .unwrap_or_else(|| vec![1.0; ds.d()]);
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..ds.n() {
        for j in 0..ds.d() {
            if ds.is_observed(i, j) {
                sum += ((pred[(i, j)] - ds.x[(i, j)]) * scale[j]).powi(2);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { f64::NAN } else { sum / count as f64 })
}
