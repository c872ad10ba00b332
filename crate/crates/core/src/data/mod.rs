//! Data sets, preprocessing, checkpoints, metric streams and synthetic data.

mod checkpoint;
mod dataset;
mod metrics;
pub mod synth;

pub use checkpoint::{
    load_checkpoint, params_from_arrays, params_to_arrays, parse_checkpoint, save_checkpoint, Checkpoint,
    NamedArray, FORMAT_VERSION,
};
pub use dataset::{
    apply_missing, load_csv, load_mask_csv, rows_with_missing, standardize, Dataset, Standardization,
};
pub use metrics::{read_metrics, MetricRecord, MetricsWriter};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Writes `x` as headerless CSV with optional trailing integer labels.
pub fn write_csv(path: &Path, x: &Matrix, labels: Option<&[i64]>) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for i in 0..x.rows() {
        let mut line: Vec<String> = x.row(i).iter().map(|v| format!("{v}")).collect();
        if let Some(l) = labels {
            line.push(l[i].to_string());
        }
        writeln!(out, "{}", line.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
