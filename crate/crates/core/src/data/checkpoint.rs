use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Standardization;
use crate::error::{Error, Result};
use crate::inference::Optimizer;
use crate::kernels::{KernelHyperparams, NoiseVariance};
use crate::linalg::{Matrix, RngState};
use crate::model::{InducingVariational, LatentVariational, ModelParams, PARAM_GROUPS};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: &str, m: &Matrix) -> Self {
        NamedArray {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.shape[0], self.shape[1], self.data.clone()).map_err(|_| Error::ShapeTableMismatch {
            name: self.name.clone(),
            detail: format!("shape {:?} but {} values", self.shape, self.data.len()),
        })
    }
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub iteration: usize,
    pub skipped: usize,
    pub rng: RngState,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<Optimizer>,
    pub standardization: Option<Standardization>,
    /// Row-major flat indices of the cells that were unobserved in training.
    #[serde(default)]
    pub masked: Vec<usize>,
}

impl Checkpoint {
    pub fn model_params(&self) -> Result<ModelParams> {
        params_from_arrays(&self.params)
    }
}

pub fn params_to_arrays(p: &ModelParams) -> Vec<NamedArray> {
    p.to_arrays().iter().map(|(n, m)| NamedArray::new(n, m)).collect()
}

/// Rebuilds parameters from named arrays, checking that all groups are
/// present with consistent shapes.
pub fn params_from_arrays(arrays: &[NamedArray]) -> Result<ModelParams> {
    let get = |name: &str| -> Result<Matrix> {
        arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::ShapeTableMismatch {
                name: name.to_string(),
                detail: "missing".into(),
            })?
            .to_matrix()
    };
    for a in arrays {
        if !PARAM_GROUPS.contains(&a.name.as_str()) {
            return Err(Error::ShapeTableMismatch {
                name: a.name.clone(),
                detail: "unknown parameter group".into(),
            });
        }
    }
    let ls = get(PARAM_GROUPS[0])?;
    let q = ls.len();
    let mean = get(PARAM_GROUPS[3])?;
    let (n, d) = (mean.rows(), get(PARAM_GROUPS[6])?.cols());
    let z = get(PARAM_GROUPS[5])?;
    let m = z.rows();
    let expect = [
        (PARAM_GROUPS[1], (1, 1)),
        (PARAM_GROUPS[2], (1, 1)),
        (PARAM_GROUPS[3], (n, q)),
        (PARAM_GROUPS[4], (n, q * q)),
        (PARAM_GROUPS[5], (m, q)),
        (PARAM_GROUPS[6], (m, d)),
        (PARAM_GROUPS[7], (d, m * m)),
    ];
    for (name, shape) in expect {
        let got = get(name)?.shape();
        if got != shape {
            return Err(Error::ShapeTableMismatch {
                name: name.to_string(),
                detail: format!("expected {shape:?}, got {got:?}"),
            });
        }
    }
    let schedule_logits = match arrays.iter().find(|a| a.name == PARAM_GROUPS[8]) {
        Some(a) => Some(a.to_matrix()?.into_vec()),
        None => None,
    };
    Ok(ModelParams {
        kernel: KernelHyperparams {
            log_lengthscales: ls.into_vec(),
            log_signal_variance: get(PARAM_GROUPS[1])?.item(),
        },
        noise: NoiseVariance {
            log_sigma2: get(PARAM_GROUPS[2])?.item(),
        },
        latent: LatentVariational {
            mean,
            scale_raw: get(PARAM_GROUPS[4])?,
        },
        inducing: InducingVariational {
            z,
            mean: get(PARAM_GROUPS[6])?,
            scale_raw: get(PARAM_GROUPS[7])?,
        },
        schedule_logits,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&text)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptCheckpoint("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    ckpt.model_params()?;
    if let Some(opt) = &ckpt.optimizer {
        for (i, m) in opt.m.iter().chain(&opt.v).enumerate() {
            if m.as_slice().len() != m.rows() * m.cols() {
                return Err(Error::ShapeTableMismatch {
                    name: format!("optimizer[{i}]"),
                    detail: "shape does not match value count".into(),
                });
            }
        }
    }
    Ok(ckpt)
}
