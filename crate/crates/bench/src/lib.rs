//! Shared fixtures for the benchmarks.

use lvgp_core::data::{standardize, synth, Dataset};
use lvgp_core::inference::{Method, TrainConfig, Trainer};

/// Standardized image-like data of the given size.
pub fn images(n: usize, rows: usize, cols: usize) -> Dataset {
    standardize(&synth::image_like(n, rows, cols, 0)).expect("no degenerate columns")
}

/// A trainer that has already taken one step, so that timings exclude
/// initialization.
pub fn warm_trainer(ds: &Dataset, method: Method, k: usize, batch: usize) -> Trainer {
    let mut cfg = TrainConfig::new(method);
    cfg.k = k;
    cfg.batch = batch;
    cfg.iters = usize::MAX;
    cfg.eval_every = 0;
    cfg.num_inducing = 50.min(ds.n());
    let mut t = Trainer::new(ds, cfg).expect("valid config");
    t.step(ds).expect("first step");
    t
}
