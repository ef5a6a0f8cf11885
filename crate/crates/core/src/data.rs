//! Classification datasets: CSV loading and seeded synthetic generators.
//!
//! Two-moons sample `i` has label `i mod 2`, `θ ~ U[0, π)` and
//!
//! * label 0: `(cos θ, sin θ)`
//! * label 1: `(1 − cos θ, 0.5 − sin θ)`
//!
//! plus isotropic Gaussian noise with standard deviation `noise`.
//!
//! Gaussian-blob sample `i` has label `k = i mod classes`, centred at
//! `3·(cos 2πk/classes, sin 2πk/classes, 0, …)` with per-coordinate noise of
//! standard deviation `spread`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} feature values do not split into {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(Dataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows gathered in the given order, as a feature block plus labels.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            x.extend_from_slice(self.sample(r));
            y.push(self.labels[r]);
        }
        (x, y)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::Data(e.to_string()))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.sample(i).iter().map(|v| v.to_string()).collect();
            row.push(self.labels[i].to_string());
            w.write_record(&row)
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise).map_err(|e| Error::Param(e.to_string()))?;
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let theta = rng.random::<f64>() * PI;
        let label = i % 2;
        let (x, y) = if label == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        features.push(x + jitter.sample(&mut rng));
        features.push(y + jitter.sample(&mut rng));
        labels.push(label);
    }
    Dataset::new(features, labels, 2)
}

pub fn gaussian_blobs(
    n: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::Param(
            "blobs need at least 2 classes and 2 dimensions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, spread).map_err(|e| Error::Param(e.to_string()))?;
    let mut features = Vec::with_capacity(dim * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let angle = 2.0 * PI * k as f64 / classes as f64;
        for d in 0..dim {
            let centre = match d {
                0 => 3.0 * angle.cos(),
                1 => 3.0 * angle.sin(),
                _ => 0.0,
            };
            features.push(centre + jitter.sample(&mut rng));
        }
        labels.push(k);
    }
    Dataset::new(features, labels, dim)
}

/// Reads rows of `features…, label`. Lines starting with `#` are skipped, as
/// is a first row that does not parse as numbers (a header).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if row == 0 => continue,
            Err(e) => {
                return Err(Error::Data(format!(
                    "{} row {}: {e}",
                    path.display(),
                    row + 1
                )))
            }
        };
        if values.len() < 2 {
            return Err(Error::Data(format!(
                "{} row {}: need at least one feature and a label",
                path.display(),
                row + 1
            )));
        }
        let width = values.len() - 1;
        if *dim.get_or_insert(width) != width {
            return Err(Error::Data(format!(
                "{} row {}: expected {} features",
                path.display(),
                row + 1,
                dim.unwrap()
            )));
        }
        let label = values[width];
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::Data(format!(
                "{} row {}: label {label} is not a class index",
                path.display(),
                row + 1
            )));
        }
        features.extend_from_slice(&values[..width]);
        labels.push(label as usize);
    }
    Dataset::new(features, labels, dim.unwrap_or(0))
}
