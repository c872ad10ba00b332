//! Synthetic data sets standing in for the benchmark corpora.

use std::f64::consts::PI;

use super::Dataset;
use crate::linalg::{Matrix, RngStream};

/// Seed of the fixed feature maps; data draws use the caller's seed.
const STRUCTURE_SEED: u64 = 0x0117_F10C;

/// Twelve-channel, three-class data on a curved two-dimensional manifold per
/// class, shaped like the multi-phase flow benchmark (N=1000, D=12).
pub fn oilflow_like(n: usize, seed: u64) -> Dataset {
    let d = 12;
    let mut structure = RngStream::new(STRUCTURE_SEED);
    let mix = structure.normal_matrix(8, d);
    let offsets = structure.normal_matrix(3, d).scale(1.5);
    let mut rng = RngStream::new(seed);
    let mut x = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        let (u, v) = (rng.uniform(), rng.uniform());
        let feats = [
            u,
            v,
            u * v,
            (PI * u).sin() * (1.0 + c as f64),
            (PI * v).cos(),
            u * u - v,
            (2.0 * u + c as f64).sin(),
            v * v * (c as f64 - 1.0),
        ];
        let noise = rng.normal_matrix(1, d);
        for j in 0..d {
            let s: f64 = feats.iter().enumerate().map(|(k, f)| f * mix[(k, j)]).sum();
            x[(i, j)] = s + offsets[(c, j)] + 0.05 * noise.as_slice()[j];
        }
        labels.push(c as i64);
    }
    let mut ds = Dataset::new(x);
    ds.labels = Some(labels);
    ds
}

/// `X = H W + noise` with `H` (N x rank) and `W` (rank x D) standard normal.
pub fn low_rank(n: usize, d: usize, rank: usize, noise_sd: f64, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let h = rng.normal_matrix(n, rank);
    let w = rng.normal_matrix(rank, d);
    let e = rng.normal_matrix(n, d).scale(noise_sd);
    Dataset::new(h.matmul(&w).expect("conformable").add(&e).expect("same shape"))
}

/// Smooth grey-level images on a `rows x cols` grid driven by a
/// three-dimensional latent (pose, lighting, expression), values in [0, 1].
pub fn image_like(n: usize, rows: usize, cols: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let d = rows * cols;
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let (a, b, c) = (rng.uniform() - 0.5, rng.uniform(), rng.uniform());
        let cx = 0.5 + 0.25 * a;
        for r in 0..rows {
            for k in 0..cols {
                let (py, px) = (r as f64 / rows as f64, k as f64 / cols as f64);
                let face = (-((px - cx).powi(2) / 0.08 + (py - 0.5).powi(2) / 0.15)).exp();
                let mouth = c * (-((px - cx).powi(2) / 0.01 + (py - 0.75).powi(2) / 0.002)).exp();
                let light = 0.3 + 0.7 * (b * px + (1.0 - b) * (1.0 - px));
                x[(i, r * cols + k)] = (face * light - 0.5 * mouth).clamp(0.0, 1.0);
            }
        }
        let noise = rng.normal_matrix(1, d);
        for (v, e) in x.row_mut(i).iter_mut().zip(noise.as_slice()) {
            *v = (*v + 0.02 * e).clamp(0.0, 1.0);
        }
    }
    Dataset::new(x)
}
