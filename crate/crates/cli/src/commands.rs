use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _, Result};
use serde::Serialize;

use lvgp_core::data::{self, synth, Checkpoint, Dataset, MetricRecord, MetricsWriter};
use lvgp_core::harness;
use lvgp_core::inference::toy::{evidence_report, GaussianToy};
use lvgp_core::inference::{evaluate, AnnealMode, Method, TrainConfig, Trainer};
use lvgp_core::model::{reconstruct as predict_mean, InitOptions};
use lvgp_core::{Error, RngStream};

use crate::{
    BenchmarkArgs, DataArgs, EvalArgs, EvidenceArgs, GradcheckArgs, ReconstructArgs, SynthArgs, SynthKind, TrainArgs,
};

const MASK_STREAM: u64 = 0x6d61_736b;

/// Exit status for a failed command: 2 for bad input, 3 for an aborted run,
/// 1 otherwise.
pub fn exit_code_for(e: &anyhow::Error) -> ExitCode {
    if e.downcast_ref::<FlagError>().is_some() {
        return ExitCode::from(2);
    }
    let code = match e.downcast_ref::<Error>() {
        Some(Error::TooManySkipped { .. }) => 3,
        Some(
            Error::Config { .. }
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::RaggedRows { .. }
            | Error::DegenerateColumn(_)
            | Error::VersionMismatch { .. }
            | Error::CorruptCheckpoint(_)
            | Error::ShapeTableMismatch { .. }
            | Error::NoMaskedEntries,
        ) => 2,
        _ => 1,
    };
    ExitCode::from(code)
}

/// The error chain joined by `: `, skipping causes whose text the previous
/// message already contains.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn flag_name(field: &str) -> String {
    match field {
        "num_inducing" => "--inducing".to_string(),
        f => format!("--{}", f.replace('_', "-")),
    }
}

#[derive(Debug)]
struct FlagError {
    flag: String,
    msg: String,
}

impl std::fmt::Display for FlagError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid value for {}: {}", self.flag, self.msg)
    }
}

impl std::error::Error for FlagError {}

/// Rewrites configuration errors so that they name the command-line flag.
fn flagged(e: Error) -> anyhow::Error {
    match e {
        Error::Config { field, msg } => FlagError {
            flag: flag_name(field),
            msg,
        }
        .into(),
        other => other.into(),
    }
}

fn config_error(field: &'static str, msg: impl Into<String>) -> anyhow::Error {
    flagged(Error::Config {
        field,
        msg: msg.into(),
    })
}

fn load_raw(args: &DataArgs) -> Result<Dataset> {
    Ok(data::load_csv(&args.data, args.header, args.label_column)?.mask_nonfinite())
}

/// Data as seen by the model stored in `ckpt`: the training mask and the
/// training standardization are reapplied.
fn prepare_for_checkpoint(raw: &Dataset, ckpt: &Checkpoint) -> Result<Dataset> {
    let params = ckpt.model_params()?;
    if raw.n() != params.num_points() || raw.d() != params.output_dim() {
        return Err(config_error(
            "data",
            format!(
                "data is {}x{} but the checkpoint was trained on {}x{}",
                raw.n(),
                raw.d(),
                params.num_points(),
                params.output_dim()
            ),
        ));
    }
    let mut ds = raw.clone();
    for &k in &ckpt.masked {
        if k >= ds.mask.len() {
            return Err(Error::CorruptCheckpoint(format!("masked cell {k} out of range")).into());
        }
        ds.mask[k] = false;
    }
    if let Some(s) = &ckpt.standardization {
        ds.x = s.apply(&ds.x);
        ds.standardization = Some(s.clone());
    }
    Ok(ds)
}

fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")).into())
}

#[derive(Serialize)]
struct InitRecord {
    latent_means: &'static str,
    inducing_inputs: &'static str,
    kernel: &'static str,
    options: InitOptions,
    step_size_rule: &'static str,
}

#[derive(Serialize)]
struct Preprocessing {
    standardize: bool,
    missing_rows: f64,
    missing_pixels: f64,
    mask_seed: u64,
    masked_cells: usize,
    header: bool,
    label_column: Option<usize>,
}

#[derive(Serialize)]
struct DatasetRecord {
    path: PathBuf,
    n: usize,
    d: usize,
    fingerprint: String,
}

#[derive(Serialize)]
struct Artifacts {
    manifest: PathBuf,
    metrics: PathBuf,
    curve: PathBuf,
    checkpoint: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    started_unix_secs: u64,
    seed: u64,
    config: TrainConfig,
    init: InitRecord,
    preprocessing: Preprocessing,
    dataset: DatasetRecord,
    artifacts: Artifacts,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let method: Method = a.method.parse().map_err(flagged)?;
    let anneal = match a.anneal.as_str() {
        "linear" => AnnealMode::Linear,
        "learned" => AnnealMode::Learned,
        other => return Err(config_error("anneal", format!("expected linear or learned, got {other:?}"))),
    };
    if !(a.step_cap >= 0.0) {
        return Err(config_error("step_cap", "must be non-negative"));
    }
    let mut cfg = TrainConfig::new(method);
    cfg.iters = a.iters;
    cfg.batch = a.batch;
    cfg.lr = a.lr;
    cfg.k = a.k;
    cfg.seed = a.seed;
    cfg.latent_dim = a.latent_dim;
    cfg.num_inducing = a.inducing;
    cfg.anneal = anneal;
    cfg.step_size = a.step_size;
    cfg.adaptive_step = a.adaptive_step.is_on();
    cfg.detach_flow = a.detach_flow.is_on();
    cfg.step_cap = (a.step_cap > 0.0).then_some(a.step_cap);
    cfg.eval_every = a.eval_every;

    let raw = load_raw(&a.data)?;
    let fingerprint = raw.fingerprint();
    let mask_seed = a.seed ^ MASK_STREAM;
    let masked = data::apply_missing(&raw, a.missing_rows, a.missing_pixels, &mut RngStream::new(mask_seed))
        .map_err(flagged)?;
    let ds = if a.standardize.is_on() {
        data::standardize(&masked)?
    } else {
        masked
    };
    let mut trainer = Trainer::new(&ds, cfg).map_err(flagged)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let artifacts = Artifacts {
        manifest: a.out.join("manifest.json"),
        metrics: a.out.join("metrics.jsonl"),
        curve: a.out.join("curve.csv"),
        checkpoint: a.out.join("checkpoint.json"),
    };
    let init = InitOptions::new(trainer.config.latent_dim, trainer.config.num_inducing);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        started_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        seed: a.seed,
        config: trainer.config.clone(),
        init: InitRecord {
            latent_means: "principal-component scores of the standardized data, unit variance per component",
            inducing_inputs: "random subset of the initial latent means",
            kernel: "unit lengthscales and unit signal variance",
            options: InitOptions {
                latent_scale: trainer.config.latent_scale_init,
                noise_variance: trainer.config.noise_init,
                ..init
            },
            step_size_rule: "1e-3 times the squared median pairwise distance of the initial latent means",
        },
        preprocessing: Preprocessing {
            standardize: a.standardize.is_on(),
            missing_rows: a.missing_rows,
            missing_pixels: a.missing_pixels,
            mask_seed,
            masked_cells: ds.num_masked(),
            header: a.data.header,
            label_column: a.data.label_column,
        },
        dataset: DatasetRecord {
            path: a.data.data.clone(),
            n: ds.n(),
            d: ds.d(),
            fingerprint,
        },
        artifacts,
    };
    write_json(&manifest.artifacts.manifest, &manifest)?;

    let metrics_path = &manifest.artifacts.metrics;
    let file = File::create(metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut writer = MetricsWriter::new(BufWriter::new(file));
    let mut curve = Vec::new();
    let outcome = trainer.run(&ds, |rec| {
        curve.push(rec.clone());
        writer.write(rec)
    });
    write_curve(&manifest.artifacts.curve, &curve)?;
    data::save_checkpoint(&manifest.artifacts.checkpoint, &trainer.checkpoint(&ds))?;
    outcome?;

    let last_eval = curve.iter().rev().find(|r| r.nell.is_some());
    let last_elbo = curve.iter().rev().find_map(|r| r.neg_elbo);
    println!(
        "{} iterations ({} skipped), method {}",
        trainer.iteration, trainer.skipped, trainer.config.method
    );
    if let Some(v) = last_elbo {
        println!("final minibatch neg_elbo per point: {v:.6}");
    }
    if let Some(r) = last_eval {
        println!(
            "final mse: {:.6}  nell per point: {:.6}",
            r.mse.unwrap_or(f64::NAN),
            r.nell.unwrap_or(f64::NAN)
        );
    }
    println!("artifacts in {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_curve(path: &Path, recs: &[MetricRecord]) -> Result<()> {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(out, "iter,neg_elbo,mse,nell,skipped")?;
    for r in recs {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            fmt(r.neg_elbo),
            fmt(r.mse),
            fmt(r.nell),
            u8::from(r.skipped_flag)
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ckpt = data::load_checkpoint(&a.checkpoint)?;
    let config = checkpoint_config(&ckpt)?;
    let ds = prepare_for_checkpoint(&load_raw(&a.data)?, &ckpt)?;
    let params = ckpt.model_params()?;
    let rep = evaluate(&params, &ds, &config, a.samples, &mut RngStream::new(a.seed)).map_err(flagged)?;
    println!("method      {}", config.method);
    println!("samples     {}", rep.samples);
    println!("neg_elbo    {:.6} ± {:.6}", rep.neg_elbo, rep.neg_elbo_se);
    println!("nell        {:.6} ± {:.6}", rep.nell, rep.nell_se);
    println!("mse         {:.6} ± {:.6}", rep.mse, 0.0);
    Ok(ExitCode::SUCCESS)
}

pub fn reconstruct(a: ReconstructArgs) -> Result<ExitCode> {
    let ckpt = data::load_checkpoint(&a.checkpoint)?;
    let raw_file = data::load_csv(&a.data.data, a.data.header, a.data.label_column)?;
    let raw = raw_file.clone().mask_nonfinite();
    let ds = prepare_for_checkpoint(&raw, &ckpt)?;
    if ds.num_masked() == 0 {
        return Err(Error::NoMaskedEntries.into());
    }
    let params = ckpt.model_params()?;
    let pred = predict_mean(&params.latent.mean, &params.inducing, &params.kernel)?;
    let pred = match &ds.standardization {
        Some(s) => s.invert(&pred),
        None => pred,
    };

    let (n, d) = (ds.n(), ds.d());
    let col_means: Vec<f64> = (0..d)
        .map(|j| {
            let vals: Vec<f64> = (0..n).filter(|&i| ds.is_observed(i, j)).map(|i| raw.x[(i, j)]).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        })
        .collect();

    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    writeln!(out, "row,col,predicted,actual")?;
    let (mut se_model, mut se_mean, mut scored) = (0.0, 0.0, 0usize);
    for i in 0..n {
        for j in 0..d {
            if ds.is_observed(i, j) {
                continue;
            }
            let truth = raw_file.x[(i, j)];
            let p = pred[(i, j)];
            if truth.is_finite() {
                writeln!(out, "{i},{j},{p},{truth}")?;
                se_model += (p - truth).powi(2);
                se_mean += (col_means[j] - truth).powi(2);
                scored += 1;
            } else {
                writeln!(out, "{i},{j},{p},")?;
            }
        }
    }
    out.flush()?;
    println!("masked cells        {}", ds.num_masked());
    println!("scored cells        {scored}");
    if scored > 0 {
        println!("masked mse          {:.6}", se_model / scored as f64);
        println!("column-mean mse     {:.6}", se_mean / scored as f64);
    }
    println!("predictions in {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn evidence_check(a: EvidenceArgs) -> Result<ExitCode> {
    if a.dim > 8 {
        return Err(config_error("dim", "at most 8"));
    }
    let toy = GaussianToy::new(a.dim).map_err(flagged)?;
    if a.k_list.is_empty() || a.k_list.contains(&0) {
        return Err(config_error("k_list", "needs one or more positive K"));
    }
    if a.chains < 2 {
        return Err(config_error("chains", "need at least 2 chains"));
    }
    if !(a.eta >= 0.0) {
        return Err(config_error("eta", "must be non-negative"));
    }
    println!("{:>6} {:>14} {:>12} {:>14} {:>12} {:>6}", "K", "mean_weight", "std_error", "true_z", "elbo_gap", "band");
    let mut all = true;
    for &k in &a.k_list {
        let r = evidence_report(&toy, k, a.eta, a.chains, &mut RngStream::new(a.seed)).map_err(flagged)?;
        all &= r.within_band;
        println!(
            "{:>6} {:>14.6} {:>12.6} {:>14.6} {:>12.6} {:>6}",
            r.k,
            r.mean_weight,
            r.std_error,
            r.true_z,
            r.elbo_gap,
            if r.within_band { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if !(a.tol > 0.0) {
        return Err(config_error("tol", "must be positive"));
    }
    let rep = harness::gradcheck_suite(a.seed, a.tol)?;
    println!("{:<6} {:<16} {:>12} {:>6}", "method", "group", "max_rel_err", "");
    for g in &rep.groups {
        println!(
            "{:<6} {:<16} {:>12.3e} {:>6}",
            g.method.to_string(),
            g.group,
            g.max_rel_err,
            if g.pass { "ok" } else { "FAIL" }
        );
    }
    for m in [Method::Mf, Method::Iw, Method::Ais] {
        if let Some(w) = rep.worst(m) {
            println!("worst {m}: {} {:.3e}", w.group, w.max_rel_err);
        }
    }
    let ab = &rep.ablation;
    println!(
        "detach-flow ablation: latent gradient change {:.3e}, kl-only change {:.3e} {}",
        ab.latent_change,
        ab.kl_only_change,
        if ab.pass { "ok" } else { "FAIL" }
    );
    println!("{}", if rep.pass { "PASS" } else { "FAIL" });
    Ok(if rep.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn benchmark(a: BenchmarkArgs) -> Result<ExitCode> {
    let ds = data::standardize(&load_raw(&a.data)?)?;
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>().map_err(|e| match e {
            Error::Config { msg, .. } => config_error("methods", msg),
            other => other.into(),
        }))
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        bail!(config_error("methods", "at least one method"));
    }
    let mut table = Vec::new();
    println!("{:<6} {:>5} {:>16}", "method", "K", "sec_per_epoch");
    for method in methods {
        let mut base = TrainConfig::new(method);
        base.batch = a.batch;
        base.latent_dim = a.latent_dim;
        base.num_inducing = a.inducing;
        base.seed = a.seed;
        let rep = harness::benchmark(&ds, &base, &a.k_list, a.iters).map_err(flagged)?;
        for r in &rep.rows {
            println!("{:<6} {:>5} {:>16.4}", method.to_string(), r.k, r.seconds_per_epoch);
            table.push((method, r.k, r.seconds_per_epoch));
        }
        println!(
            "{method}: time ≈ {:.4} + {:.4}·K s/epoch, R² = {:.4}",
            rep.fit.intercept, rep.fit.slope, rep.fit.r2
        );
    }
    if let Some(path) = &a.out {
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(out, "method,k,seconds_per_epoch")?;
        for (m, k, s) in table {
            writeln!(out, "{m},{k},{s}")?;
        }
        out.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    if a.n == 0 {
        return Err(config_error("n", "must be at least 1"));
    }
    let ds = match a.kind {
        SynthKind::Oilflow => synth::oilflow_like(a.n, a.seed),
        SynthKind::LowRank => {
            if a.d == 0 || a.rank == 0 {
                return Err(config_error("rank", "d and rank must be positive"));
            }
            synth::low_rank(a.n, a.d, a.rank, a.noise_sd, a.seed)
        }
        SynthKind::Images => {
            if a.rows == 0 || a.cols == 0 {
                return Err(config_error("rows", "rows and cols must be positive"));
            }
            synth::image_like(a.n, a.rows, a.cols, a.seed)
        }
    };
    data::write_csv(&a.out, &ds.x, ds.labels.as_deref())?;
    let labels = if ds.labels.is_some() { " plus a label column" } else { "" };
    println!("wrote {}x{}{labels} to {}", ds.n(), ds.d(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
