//! LIBSVM ingestion, synthetic datasets and row partitioning.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{CsrRows, LogisticShard};

/// Sparse binary-classification dataset. Column indices are stored 0-based;
/// the text format is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: CsrRows,
    pub labels: Vec<f64>,
    pub dim: usize,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    /// Widens the feature space (e.g. a test split missing the last column).
    pub fn with_dim(mut self, dim: usize) -> Result<Self> {
        if dim < self.dim {
            return Err(Error::Data(format!(
                "requested dim {dim} is below the max feature index {}",
                self.dim
            )));
        }
        self.dim = dim;
        Ok(self)
    }
}

pub fn parse_libsvm<R: Read>(reader: R) -> Result<Dataset> {
    let reader = BufReader::new(reader);
    let mut rows = CsrRows::new();
    let mut labels = Vec::new();
    let mut dim = 0usize;
    let mut row = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let raw: f64 = label_tok
            .parse()
            .map_err(|_| err(format!("label {label_tok:?} is not numeric")))?;
        let label = if raw == 1.0 {
            1.0
        } else if raw == 0.0 || raw == -1.0 {
            -1.0
        } else {
            return Err(err(format!("label {label_tok} is not in {{-1, 0, +1}}")));
        };

        row.clear();
        let mut last = 0u64;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("token {tok:?} is not index:value")))?;
            let idx: u64 = idx
                .parse()
                .map_err(|_| err(format!("index {idx:?} is not a positive integer")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| err(format!("value {val:?} is not numeric")))?;
            if idx == 0 || idx > u32::MAX as u64 {
                return Err(err(format!("index {idx} out of range (1-based)")));
            }
            if idx <= last {
                return Err(err(format!("index {idx} does not ascend (previous {last})")));
            }
            if !val.is_finite() {
                return Err(err(format!("value {val} is not finite")));
            }
            last = idx;
            row.push(((idx - 1) as u32, val));
        }
        dim = dim.max(last as usize);
        rows.push_row(row.iter().copied());
        labels.push(label);
    }

    Ok(Dataset { rows, labels, dim })
}

pub fn load_libsvm(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_libsvm(file)
}

/// Inverse of [`parse_libsvm`]: one `label idx:val ...` line per row.
pub fn to_libsvm(ds: &Dataset) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for (r, &label) in ds.labels.iter().enumerate() {
        out.push_str(if label > 0.0 { "+1" } else { "-1" });
        let (idx, val) = ds.rows.row(r);
        for (&i, &v) in idx.iter().zip(val) {
            write!(out, " {}:{}", i + 1, v).expect("write to String");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// Consecutive blocks in file order.
    #[default]
    Contiguous,
    /// Seeded permutation, then consecutive blocks.
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub n_workers: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

/// Row indices per worker. Each worker gets `rows / n` rows; the remainder
/// goes to the last worker.
pub fn partition_indices(n_rows: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = spec.n_workers;
    if n == 0 {
        return Err(Error::Config("n_workers must be at least 1".into()));
    }
    if n > n_rows {
        return Err(Error::Config(format!("{n} workers but only {n_rows} rows")));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    if spec.mode == PartitionMode::Shuffled {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    }
    let block = n_rows / n;
    Ok((0..n)
        .map(|i| {
            let end = if i + 1 == n { n_rows } else { (i + 1) * block };
            order[i * block..end].to_vec()
        })
        .collect())
}

pub fn partition(ds: &Dataset, spec: &PartitionSpec, reg_mu: f64) -> Result<Vec<LogisticShard>> {
    partition_indices(ds.n_rows(), spec)?
        .into_iter()
        .map(|idx| {
            let mut rows = CsrRows::new();
            let mut labels = Vec::with_capacity(idx.len());
            for &r in &idx {
                let (i, v) = ds.rows.row(r);
                rows.push_row(i.iter().copied().zip(v.iter().copied()));
                labels.push(ds.labels[r]);
            }
            LogisticShard::new(rows, labels, reg_mu, ds.dim)
        })
        .collect()
}

/// Dense Gaussian features with labels drawn from a planted logistic model.
pub fn synthetic_gaussian(n_rows: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut rows = CsrRows::new();
    let mut labels = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let a: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z: f64 = a.iter().zip(&truth).map(|(x, t)| x * t).sum::<f64>() * scale * 2.0;
        let p = 1.0 / (1.0 + (-z).exp());
        labels.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
        rows.push_row(a.into_iter().enumerate().map(|(i, v)| (i as u32, v)));
    }
    Dataset { rows, labels, dim }
}

/// One-hot group sizes of a 123-feature, 14-field binary layout.
pub const ONEHOT_123_GROUPS: [usize; 14] = [5, 8, 5, 16, 7, 14, 6, 5, 2, 2, 2, 5, 41, 5];

/// Categorical data: each row activates exactly one feature (value 1) per
/// group, drawn from a skewed per-group distribution; labels follow a planted
/// logistic model with a negative bias (about a quarter positives).
pub fn synthetic_onehot(n_rows: usize, groups: &[usize], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim: usize = groups.iter().sum();
    let truth: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.8).collect();
    // Zipf-like popularity inside each group.
    let weights: Vec<Vec<f64>> = groups
        .iter()
        .map(|&g| (0..g).map(|k| 1.0 / (k as f64 + 1.0)).collect())
        .collect();
    let mut rows = CsrRows::new();
    let mut labels = Vec::with_capacity(n_rows);
    let mut active = Vec::with_capacity(groups.len());
    for _ in 0..n_rows {
        active.clear();
        let mut offset = 0;
        for (g, w) in groups.iter().zip(&weights) {
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = g - 1;
            for (k, wk) in w.iter().enumerate() {
                if u < *wk {
                    pick = k;
                    break;
                }
                u -= wk;
            }
            active.push(offset + pick);
            offset += g;
        }
        let z: f64 = active.iter().map(|&i| truth[i]).sum::<f64>() - 1.2;
        let p = 1.0 / (1.0 + (-z).exp());
        labels.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
        rows.push_row(active.iter().map(|&i| (i as u32, 1.0)));
    }
    Dataset { rows, labels, dim }
}
