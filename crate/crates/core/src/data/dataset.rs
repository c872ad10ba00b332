use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};
use crate::model::Batch;

/// Per-column affine map applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Standardization {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Maps original values to standardized units.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }

    /// Maps standardized values back to original units.
    pub fn invert(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] * self.scale[j] + self.mean[j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Option<Vec<i64>>,
    /// Row-major `N x D` observed flags.
    pub mask: Vec<bool>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    /// Fully observed data set.
    pub fn new(x: Matrix) -> Self {
        let mask = vec![true; x.len()];
        Dataset {
            x,
            labels: None,
            mask,
            standardization: None,
        }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.d() + j]
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&o| !o).count()
    }

    pub fn fully_observed(&self) -> bool {
        self.mask.iter().all(|&o| o)
    }

    /// Row-major flat indices of the unobserved cells.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &o)| !o).map(|(k, _)| k).collect()
    }

    /// Marks non-finite cells unobserved and zeroes their values.
    pub fn mask_nonfinite(mut self) -> Self {
        for (v, o) in self.x.as_mut_slice().iter_mut().zip(self.mask.iter_mut()) {
            if !v.is_finite() {
                *v = 0.0;
                *o = false;
            }
        }
        self
    }

    /// Observed flags, or `None` when every entry is observed.
    pub fn observed(&self) -> Option<&[bool]> {
        (!self.fully_observed()).then_some(self.mask.as_slice())
    }

    /// Rows `idx` as a model batch.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let d = self.d();
        let x = self.x.select_rows(idx);
        let observed: Vec<bool> = idx
            .iter()
            .flat_map(|&i| self.mask[i * d..(i + 1) * d].iter().copied())
            .collect();
        let observed = if observed.iter().all(|&o| o) { None } else { Some(observed) };
        Batch {
            idx: idx.to_vec(),
            x,
            observed,
        }
    }

    /// The data in original units.
    pub fn original_x(&self) -> Matrix {
        match &self.standardization {
            Some(s) => s.invert(&self.x),
            None => self.x.clone(),
        }
    }

    /// `NxD:` followed by a SHA-256 over the shape, values and mask.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        h.update((self.d() as u64).to_le_bytes());
        for v in self.x.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &o in &self.mask {
            h.update([o as u8]);
        }
        let digest = h.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("{}x{}:{hex}", self.n(), self.d())
    }
}

fn parse_cell(tok: &str, row: usize, col: usize) -> Result<f64> {
    tok.trim().parse::<f64>().map_err(|e| Error::Parse {
        row,
        col,
        msg: format!("{tok:?}: {e}"),
    })
}

/// Reads a comma-separated numeric table. Rows are numbered from 1 in
/// errors, counting the header when present.
pub fn load_csv(path: &Path, has_header: bool, label_column: Option<usize>) -> Result<Dataset> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    read_csv(file, has_header, label_column)
}

pub(crate) fn read_csv<R: std::io::Read>(reader: R, has_header: bool, label_column: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let offset = if has_header { 2 } else { 1 };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (r, rec) in rdr.records().enumerate() {
        let row = r + offset;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(Error::RaggedRows {
                row,
                expected,
                got: rec.len(),
            });
        }
        for (c, tok) in rec.iter().enumerate() {
            if Some(c) == label_column {
                let v = parse_cell(tok, row, c + 1)?;
                if v.fract() != 0.0 {
                    return Err(Error::Parse {
                        row,
                        col: c + 1,
                        msg: format!("label {tok:?} is not an integer"),
                    });
                }
                labels.push(v as i64);
            } else {
                data.push(parse_cell(tok, row, c + 1)?);
            }
        }
    }
    let width = width.unwrap_or(0);
    if let Some(lc) = label_column {
        if lc >= width {
            return Err(Error::config("label_column", format!("column {lc} out of range for {width} columns")));
        }
    }
    let d = width - usize::from(label_column.is_some());
    let n = if d == 0 { 0 } else { data.len() / d };
    let mut ds = Dataset::new(Matrix::from_vec(n, d, data)?);
    if label_column.is_some() {
        ds.labels = Some(labels);
    }
    Ok(ds)
}

/// Replaces the mask with a 0/1 CSV of the same shape (1 = observed).
pub fn load_mask_csv(path: &Path, ds: &Dataset) -> Result<Dataset> {
    let m = load_csv(path, false, None)?;
    if m.x.shape() != ds.x.shape() {
        return Err(Error::shape("mask", format!("{:?}", ds.x.shape()), format!("{:?}", m.x.shape())));
    }
    let mut mask = Vec::with_capacity(m.x.len());
    for (k, &v) in m.x.as_slice().iter().enumerate() {
        match v {
            v if v == 1.0 => mask.push(true),
            v if v == 0.0 => mask.push(false),
            _ => {
                return Err(Error::Parse {
                    row: k / ds.d() + 1,
                    col: k % ds.d() + 1,
                    msg: format!("mask entry {v} is not 0 or 1"),
                })
            }
        }
    }
    Ok(Dataset { mask, ..ds.clone() })
}

/// Centers and scales each column to zero mean and unit variance over its
/// observed entries; unobserved entries go through the same map but never
/// enter the statistics. Composes with an existing standardization.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let (n, d) = ds.x.shape();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for j in 0..d {
        let vals: Vec<f64> = (0..n).filter(|&i| ds.is_observed(i, j)).map(|i| ds.x[(i, j)]).collect();
        if vals.len() < 2 {
            return Err(Error::DegenerateColumn(j));
        }
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        if !(var > 1e-24 * mu.abs().max(1.0).powi(2)) {
            return Err(Error::DegenerateColumn(j));
        }
        mean[j] = mu;
        scale[j] = var.sqrt();
    }
    let x = Matrix::from_fn(n, d, |i, j| (ds.x[(i, j)] - mean[j]) / scale[j]);
    let prior = ds.standardization.clone().unwrap_or_else(|| Standardization::identity(d));
    let composed = Standardization {
        mean: (0..d).map(|j| prior.mean[j] + prior.scale[j] * mean[j]).collect(),
        scale: (0..d).map(|j| prior.scale[j] * scale[j]).collect(),
    };
    Ok(Dataset {
        x,
        standardization: Some(composed),
        ..ds.clone()
    })
}

/// Masks `⌈pixel_fraction·D⌉` entries in each of `⌈row_fraction·N⌉`
/// randomly chosen rows. Previously masked entries stay masked.
pub fn apply_missing(ds: &Dataset, row_fraction: f64, pixel_fraction: f64, rng: &mut RngStream) -> Result<Dataset> {
    for (name, f) in [("missing_rows", row_fraction), ("missing_pixels", pixel_fraction)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config(name, format!("fraction {f} outside [0, 1]")));
        }
    }
    let (n, d) = ds.x.shape();
    let rows = ((row_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let cols = ((pixel_fraction * d as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut out = ds.clone();
    if rows == 0 || cols == 0 {
        return Ok(out);
    }
    let mut chosen = rng.sample_indices(n, rows);
    chosen.sort_unstable();
    for i in chosen {
        for j in rng.sample_indices(d, cols) {
            out.mask[i * d + j] = false;
        }
    }
    Ok(out)
}

/// Rows that contain at least one masked entry.
pub fn rows_with_missing(ds: &Dataset) -> Vec<usize> {
    (0..ds.n()).filter(|&i| (0..ds.d()).any(|j| !ds.is_observed(i, j))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn csv_basic_and_labels() {
        let ds = read_csv("1,2\n3,4\n5,6\n".as_bytes(), false, None).unwrap();
        assert_eq!(ds.x.shape(), (3, 2));
        assert_eq!(ds.x[(2, 1)], 6.0);
        assert!(ds.fully_observed());

        let ds = read_csv("a,b,label\n1.5,2,0\n3,4,2\n".as_bytes(), true, Some(2)).unwrap();
        assert_eq!(ds.x.shape(), (2, 2));
        assert_eq!(ds.labels, Some(vec![0, 2]));
    }

    #[test]
    fn csv_errors_name_the_cell() {
        match read_csv("1,2\n3,x\n".as_bytes(), false, None) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_csv("1,2\n3\n".as_bytes(), false, None),
            Err(Error::RaggedRows { row: 2, expected: 2, got: 1 })
        ));
    }

    #[test]
    fn mask_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::File::create(&p).unwrap().write_all(b"1,0\n1,1\n").unwrap();
        let ds = Dataset::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let m = load_mask_csv(&p, &ds).unwrap();
        assert_eq!(m.mask, vec![true, false, true, true]);
        std::fs::File::create(&p).unwrap().write_all(b"1,2\n1,1\n").unwrap();
        assert!(load_mask_csv(&p, &ds).is_err());
    }

    #[test]
    fn standardize_examples() {
        let ds = Dataset::new(Matrix::column(&[0.0, 2.0]));
        let s = standardize(&ds).unwrap();
        assert_eq!(s.x.as_slice(), &[-1.0, 1.0]);
        let again = standardize(&s).unwrap();
        assert!(again.x.sub(&s.x).unwrap().max_abs() < 1e-12);
        assert!(again.original_x().sub(&ds.x).unwrap().max_abs() < 1e-12);

        let constant = Dataset::new(Matrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 3.0]]).unwrap());
        assert!(matches!(standardize(&constant), Err(Error::DegenerateColumn(1))));
    }

    #[test]
    fn standardize_ignores_masked_entries() {
        let mut rng = RngStream::new(5);
        let ds = Dataset::new(rng.normal_matrix(30, 4).scale(3.0));
        let masked = apply_missing(&ds, 0.3, 0.5, &mut rng).unwrap();
        let mut poked = masked.clone();
        for k in 0..poked.mask.len() {
            if !poked.mask[k] {
                poked.x.as_mut_slice()[k] = 1e6;
            }
        }
        let a = standardize(&masked).unwrap();
        let b = standardize(&poked).unwrap();
        assert_eq!(a.standardization, b.standardization);
        for k in 0..a.mask.len() {
            if a.mask[k] {
                assert_eq!(a.x.as_slice()[k], b.x.as_slice()[k]);
            }
        }
        for j in 0..4 {
            let vals: Vec<f64> = (0..30).filter(|&i| a.is_observed(i, j)).map(|i| a.x[(i, j)]).collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mu.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
        let back = a.original_x();
        for k in 0..a.mask.len() {
            if a.mask[k] {
                assert!((back.as_slice()[k] - masked.x.as_slice()[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn missing_fractions() {
        let mut rng = RngStream::new(6);
        let ds = Dataset::new(rng.normal_matrix(100, 20));
        assert_eq!(apply_missing(&ds, 0.0, 0.9, &mut rng).unwrap().mask, ds.mask);
        let m = apply_missing(&ds, 0.05, 0.75, &mut RngStream::new(9)).unwrap();
        let rows = rows_with_missing(&m);
        assert_eq!(rows.len(), 5);
        for i in rows {
            assert_eq!((0..20).filter(|&j| !m.is_observed(i, j)).count(), 15);
        }
        let again = apply_missing(&ds, 0.05, 0.75, &mut RngStream::new(9)).unwrap();
        assert_eq!(m.mask, again.mask);
        assert!(apply_missing(&ds, 1.5, 0.1, &mut rng).is_err());
    }

    #[test]
    fn batch_drops_trivial_mask() {
        let mut rng = RngStream::new(7);
        let ds = Dataset::new(rng.normal_matrix(6, 3));
        let mut m = ds.clone();
        m.mask[4] = false;
        assert!(m.batch(&[0, 2]).observed.is_none());
        let b = m.batch(&[1, 0]);
        assert_eq!(b.observed.unwrap(), vec![true, false, true, true, true, true]);
        assert_ne!(ds.fingerprint(), m.fingerprint());
    }
}
