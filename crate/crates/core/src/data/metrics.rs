use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the metric stream. Quantities are per data point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub neg_elbo: Option<f64>,
    pub mse: Option<f64>,
    pub nell: Option<f64>,
    pub wall_ms: Option<f64>,
    pub skipped_flag: bool,
}

/// JSON-lines writer over any byte sink.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out }
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|source| Error::Io {
                path: "<metrics>".into(),
                source,
            })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            row: i + 1,
            col: 0,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![
            MetricRecord { iter: 0, neg_elbo: Some(1.25), mse: None, nell: None, wall_ms: None, skipped_flag: false },
            MetricRecord { iter: 1, neg_elbo: None, mse: Some(0.1), nell: Some(-2.0), wall_ms: None, skipped_flag: true },
        ];
        let mut w = MetricsWriter::new(std::fs::File::create(&p).unwrap());
        for r in &recs {
            w.write(r).unwrap();
        }
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("{\"iter\":0,\"neg_elbo\":1.25,\"mse\":null"));
        assert_eq!(read_metrics(&p).unwrap(), recs);
    }
}
