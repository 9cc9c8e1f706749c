use std::fs;
use std::path::Path;

use crate::error::{GavgError, Result};
use crate::numerics::RngStream;

/// `N x D` row-major inputs with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    pub inputs: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl DataBatch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(GavgError::Dimension {
                expected: dim * labels.len(),
                got: inputs.len(),
            });
        }
        Ok(DataBatch {
            inputs,
            dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> DataBatch {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        DataBatch {
            inputs,
            dim: self.dim,
            labels,
        }
    }

    /// Shuffled minibatches covering every example once. The last may be
    /// short; a single leftover example joins the previous batch so that
    /// batch statistics are always defined.
    pub fn minibatches(&self, batch_size: usize, rng: &mut RngStream) -> Vec<DataBatch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        self.split_indices(&idx, batch_size)
    }

    /// Consecutive slices without shuffling, same tail rule as `minibatches`.
    pub fn chunks(&self, batch_size: usize) -> Vec<DataBatch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.split_indices(&idx, batch_size)
    }

    fn split_indices(&self, idx: &[usize], batch_size: usize) -> Vec<DataBatch> {
        let mut parts: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
        if parts.len() > 1 && parts.last().is_some_and(|p| p.len() == 1) && batch_size > 1 {
            let tail = parts.pop().expect("nonempty");
            let start = idx.len() - tail.len() - parts.last().expect("nonempty").len();
            *parts.last_mut().expect("nonempty") = &idx[start..];
        }
        parts.into_iter().map(|c| self.subset(c)).collect()
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|l| *l >= classes) {
            Some(i) => Err(GavgError::domain(format!(
                "label {} at row {i} outside [0, {classes})",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Train/validation/test split of one labelled pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: DataBatch,
    pub val: DataBatch,
    pub test: DataBatch,
    pub classes: usize,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.dim
    }

    /// Shuffles `pool` and splits it 70/15/15.
    pub fn split(pool: &DataBatch, classes: usize, rng: &mut RngStream) -> Result<Dataset> {
        pool.check_labels(classes)?;
        let n = pool.len();
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let n_train = n * 70 / 100;
        let n_val = n * 15 / 100;
        if n_train == 0 || n_val == 0 || n - n_train - n_val == 0 {
            return Err(GavgError::domain(format!(
                "{n} examples are too few to split 70/15/15"
            )));
        }
        Ok(Dataset {
            train: pool.subset(&idx[..n_train]),
            val: pool.subset(&idx[n_train..n_train + n_val]),
            test: pool.subset(&idx[n_train + n_val..]),
            classes,
        })
    }
}

/// `c` unit-covariance Gaussian clusters in `d` dimensions with every
/// pair of centers `sep` apart (centers `sep/sqrt(2) * e_k`, so `c <= d`).
/// Classes are balanced. After the 70/15/15 split, `round(label_noise *
/// n_train)` training labels are moved to a uniformly chosen other class.
/// Noise draws come from substream 1 of `rng`, so clean and noisy datasets
/// share features for the same seed.
pub fn make_blobs(
    rng: &mut RngStream,
    n: usize,
    d: usize,
    c: usize,
    sep: f64,
    label_noise: f64,
) -> Result<Dataset> {
    if c < 2 || d < c {
        return Err(GavgError::domain(format!(
            "blobs need 2 <= classes <= dims, got c={c}, d={d}"
        )));
    }
    if !(sep > 0.0 && sep.is_finite()) {
        return Err(GavgError::domain("sep must be > 0"));
    }
    if !(0.0..0.5).contains(&label_noise) {
        return Err(GavgError::domain("label_noise must lie in [0, 0.5)"));
    }
    let offset = sep / std::f64::consts::SQRT_2;
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        for j in 0..d {
            let center = if j == k { offset } else { 0.0 };
            inputs.push(center + rng.standard_normal());
        }
        labels.push(k);
    }
    let pool = DataBatch::new(inputs, d, labels)?;
    let mut ds = Dataset::split(&pool, c, rng)?;

    let mut noise_rng = rng.substream(rng.stream_id().wrapping_add(1));
    let n_train = ds.train.len();
    let flips = (label_noise * n_train as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n_train).collect();
    // Partial Fisher-Yates: the first `flips` entries are a uniform subset.
    for i in 0..flips {
        let j = i + noise_rng.below(n_train - i);
        idx.swap(i, j);
    }
    for &i in &idx[..flips] {
        let old = ds.train.labels[i];
        ds.train.labels[i] = (old + 1 + noise_rng.below(c - 1)) % c;
    }
    Ok(ds)
}

/// Reads the `f0,...,f{d-1},label` CSV format.
pub fn load_csv(path: &Path) -> Result<DataBatch> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<DataBatch> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| GavgError::config("empty CSV dataset"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = cols.len().saturating_sub(1);
    let expected: Vec<String> = (0..d)
        .map(|i| format!("f{i}"))
        .chain(["label".to_string()])
        .collect();
    if d == 0 || cols != expected {
        return Err(GavgError::config(format!(
            "CSV header must be f0,...,f{{d-1}},label; got {header:?}"
        )));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(GavgError::config(format!(
                "CSV row {} has {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| {
                GavgError::config(format!("bad feature {f:?} on row {}", lineno + 2))
            })?;
            inputs.push(v);
        }
        let label: usize = fields[d].parse().map_err(|_| {
            GavgError::config(format!("bad label {:?} on row {}", fields[d], lineno + 2))
        })?;
        labels.push(label);
    }
    DataBatch::new(inputs, d, labels)
}
