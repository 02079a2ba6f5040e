//! Datasets: CSV ingestion, splits, standardization and synthetic generators.

mod prior;
mod toy;

pub use prior::{sample_prior_paths, PriorMode, PriorPaths};
pub use toy::{gen_toy_letters, Mask, DEFAULT_TOY_N};

use crate::adcore::Tensor;
use crate::config::Task;
use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Inputs `[N, D]`.
    pub x: Tensor,
    pub y: Vec<f64>,
    pub task: Task,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<f64>, task: Task) -> Result<Self> {
        if x.rank() != 2 || x.shape()[0] != y.len() {
            return Err(Error::Data(format!("inputs {:?} do not match {} targets", x.shape(), y.len())));
        }
        if let Some(k) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {}: non-finite input", k / x.shape()[1].max(1) + 1)));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {}: non-finite target", i + 1)));
        }
        if task == Task::Binary {
            if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("row {}: binary label must be 0 or 1, got {}", i + 1, y[i])));
            }
        }
        Ok(Dataset { x, y, task })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x.data()[i * d..(i + 1) * d]
    }

    /// Rows `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        Dataset { x: Tensor::matrix(idx.len(), d, x), y: idx.iter().map(|&i| self.y[i]).collect(), task: self.task }
    }
}

/// Parses comma-separated decimal rows. `label_column` defaults to the last
/// column; with `header` the first line is skipped.
pub fn parse_csv(text: &str, label_column: Option<usize>, task: Task, header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(header).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 1 + header as usize;
        let record = record.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {line}, column {}: cannot parse {field:?}", c + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Data(format!("line {line}: expected {} columns, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    let Some(first) = rows.first() else {
        return Err(Error::Data("no data rows".into()));
    };
    let cols = first.len();
    if cols < 2 {
        return Err(Error::Data("need at least one feature and one label column".into()));
    }
    let label = label_column.unwrap_or(cols - 1);
    if label >= cols {
        return Err(Error::Data(format!("label column {label} out of range for {cols} columns")));
    }
    let mut x = Vec::with_capacity(rows.len() * (cols - 1));
    let mut y = Vec::with_capacity(rows.len());
    for row in &rows {
        for (c, &v) in row.iter().enumerate() {
            if c == label {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    Dataset::new(Tensor::matrix(rows.len(), cols - 1, x), y, task)
}

pub fn load_csv(path: &Path, label_column: Option<usize>, task: Task, header: bool) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_csv(&text, label_column, task, header)
}

/// Inverse of [`parse_csv`]: the label goes back to `label_column` (last by
/// default) and values print in shortest round-trip form.
pub fn to_csv(ds: &Dataset, label_column: Option<usize>, header: bool) -> String {
    let d = ds.dim();
    let label = label_column.unwrap_or(d).min(d);
    let mut out = String::new();
    if header {
        let names: Vec<String> = (0..=d)
            .map(|c| match c.cmp(&label) {
                std::cmp::Ordering::Equal => "y".to_string(),
                std::cmp::Ordering::Less => format!("x{}", c + 1),
                std::cmp::Ordering::Greater => format!("x{c}"),
            })
            .collect();
        out.push_str(&names.join(","));
        out.push('\n');
    }
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        fields.insert(label, ds.y[i].to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Fractions `(train, test, val)` and the permutation seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: (f64, f64, f64),
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec { seed, fractions: (0.8, 0.1, 0.1) }
    }
}

/// Index sets `(train, test, val)`: a seeded permutation cut into
/// `floor(N·f)`-sized test and validation parts, the remainder training.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 rows to split, got {n}")));
    }
    let (a, b, c) = spec.fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must be nonnegative and sum to 1".into()));
    }
    let perm = Rng::new(spec.seed, crate::rng::stream::SPLIT).permutation(n);
    let n_test = (n as f64 * b + 1e-9).floor() as usize;
    let n_val = (n as f64 * c + 1e-9).floor() as usize;
    let n_train = n - n_test - n_val;
    Ok((perm[..n_train].to_vec(), perm[n_train..n_train + n_test].to_vec(), perm[n_train + n_test..].to_vec()))
}

pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, te, va) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&tr), ds.subset(&te), ds.subset(&va)))
}

/// Per-column affine standardization fit on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    /// Target moments; `None` for classification.
    pub y_mean: Option<f64>,
    pub y_std: Option<f64>,
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // constant columns are left unscaled
    (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.dim();
        let (x_mean, x_std) = (0..d).map(|j| moments(ds.x.data().iter().skip(j).step_by(d).copied())).unzip();
        let (y_mean, y_std) = match ds.task {
            Task::Regression => {
                let (m, s) = moments(ds.y.iter().copied());
                (Some(m), Some(s))
            }
            Task::Binary => (None, None),
        };
        Standardizer { x_mean, x_std, y_mean, y_std }
    }

    pub fn transform_x(&self, x: &Tensor) -> Tensor {
        let d = self.x_mean.len();
        Tensor::from_fn(x.shape().to_vec(), |k| (x.data()[k] - self.x_mean[k % d]) / self.x_std[k % d])
    }

    pub fn inverse_x(&self, x: &Tensor) -> Tensor {
        let d = self.x_mean.len();
        Tensor::from_fn(x.shape().to_vec(), |k| x.data()[k] * self.x_std[k % d] + self.x_mean[k % d])
    }

    pub fn transform_y(&self, y: &[f64]) -> Vec<f64> {
        match (self.y_mean, self.y_std) {
            (Some(m), Some(s)) => y.iter().map(|v| (v - m) / s).collect(),
            _ => y.to_vec(),
        }
    }

    pub fn inverse_y(&self, y: &[f64]) -> Vec<f64> {
        match (self.y_mean, self.y_std) {
            (Some(m), Some(s)) => y.iter().map(|v| v * s + m).collect(),
            _ => y.to_vec(),
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        Dataset { x: self.transform_x(&ds.x), y: self.transform_y(&ds.y), task: ds.task }
    }
}
