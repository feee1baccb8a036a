//! Local objective oracles: value, (stochastic) gradient and Hessian-sketch
//! products `∇²f_i(w) S`, computed as Hessian-vector products.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};

/// Compressed sparse rows with 0-based column indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsrRows {
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrRows {
    pub fn new() -> Self {
        Self {
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a row given as `(index, value)` pairs.
    pub fn push_row<I: IntoIterator<Item = (u32, f64)>>(&mut self, row: I) {
        for (i, v) in row {
            self.indices.push(i);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
    }

    pub fn from_dense(a: &DenseMatrix) -> Self {
        let mut out = Self::new();
        for r in 0..a.nrows() {
            out.push_row(
                (0..a.ncols())
                    .filter(|&c| a[(r, c)] != 0.0)
                    .map(|c| (c as u32, a[(r, c)])),
            );
        }
        out
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.iter().copied().max()
    }

    #[inline]
    fn dot(&self, r: usize, w: &[f64]) -> f64 {
        let (idx, val) = self.row(r);
        idx.iter().zip(val).map(|(&i, &v)| v * w[i as usize]).sum()
    }

    #[inline]
    fn axpy(&self, r: usize, alpha: f64, out: &mut [f64]) {
        let (idx, val) = self.row(r);
        for (&i, &v) in idx.iter().zip(val) {
            out[i as usize] += alpha * v;
        }
    }
}

/// `f(w) = (1/r) Σ_j log(1 + exp(-b_j a_j^T w)) + (mu/2) ||w||^2`
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticShard {
    features: CsrRows,
    labels: Vec<f64>,
    reg_mu: f64,
    dim: usize,
}

impl LogisticShard {
    pub fn new(features: CsrRows, labels: Vec<f64>, reg_mu: f64, dim: usize) -> Result<Self> {
        if features.n_rows() == 0 {
            return Err(Error::Data("logistic shard needs at least one row".into()));
        }
        if features.n_rows() != labels.len() {
            return Err(dim_err(format!(
                "{} feature rows vs {} labels",
                features.n_rows(),
                labels.len()
            )));
        }
        if let Some(b) = labels.iter().find(|&&b| b != 1.0 && b != -1.0) {
            return Err(Error::Data(format!("label {b} is not in {{-1, +1}}")));
        }
        if !(reg_mu >= 0.0) || !reg_mu.is_finite() {
            return Err(Error::Config(format!("reg_mu must be >= 0, got {reg_mu}")));
        }
        if features.max_index().is_some_and(|i| i as usize >= dim) {
            return Err(dim_err(format!("feature index exceeds dim {dim}")));
        }
        if !features.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            reg_mu,
            dim,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self) -> &CsrRows {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn reg_mu(&self) -> f64 {
        self.reg_mu
    }
}

/// `f(w) = (1/2) w^T H w + b^T w`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticShard {
    h: DenseMatrix,
    b: DenseVector,
}

impl QuadraticShard {
    pub fn new(h: DenseMatrix, b: DenseVector) -> Result<Self> {
        if !h.is_square() || h.nrows() != b.len() {
            return Err(dim_err(format!(
                "quadratic: H is {}x{}, b has {}",
                h.nrows(),
                h.ncols(),
                b.len()
            )));
        }
        if crate::linalg::asymmetry(&h) > 1e-12 {
            return Err(Error::Data("quadratic H is not symmetric".into()));
        }
        Ok(Self { h, b })
    }

    pub fn hessian(&self) -> &DenseMatrix {
        &self.h
    }

    pub fn linear(&self) -> &DenseVector {
        &self.b
    }

    /// `-H^{-1} b`, when H is invertible.
    pub fn minimizer(&self) -> Option<DenseVector> {
        self.h.clone().lu().solve(&(-&self.b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shard {
    Logistic(LogisticShard),
    Quadratic(QuadraticShard),
}

/// Exact or minibatch oracle. Minibatches are drawn without replacement on
/// every call; quadratic shards have no sample structure and are always exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BatchSpec {
    #[default]
    Full,
    Minibatch(usize),
}

impl std::str::FromStr for BatchSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "full" {
            return Ok(BatchSpec::Full);
        }
        let size = s
            .strip_prefix("minibatch:")
            .and_then(|n| n.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("batch must be full or minibatch:<size>, got {s:?}")))?;
        Ok(BatchSpec::Minibatch(size))
    }
}

impl std::fmt::Display for BatchSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchSpec::Full => write!(f, "full"),
            BatchSpec::Minibatch(b) => write!(f, "minibatch:{b}"),
        }
    }
}

impl TryFrom<String> for BatchSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BatchSpec> for String {
    fn from(b: BatchSpec) -> String {
        b.to_string()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-t))` without overflow.
#[inline]
fn log1p_exp_neg(t: f64) -> f64 {
    (-t).max(0.0) + (-t.abs()).exp().ln_1p()
}

fn batch_rows<R: Rng + ?Sized>(r: usize, batch: BatchSpec, rng: &mut R) -> Result<Option<Vec<usize>>> {
    match batch {
        BatchSpec::Full => Ok(None),
        BatchSpec::Minibatch(b) if b == 0 || b > r => Err(Error::Config(format!(
            "minibatch size {b} outside [1, {r}]"
        ))),
        BatchSpec::Minibatch(b) if b == r => Ok(None),
        BatchSpec::Minibatch(b) => {
            let mut rows = index::sample(rng, r, b).into_vec();
            // summation order independent of draw order
            rows.sort_unstable();
            Ok(Some(rows))
        }
    }
}

impl Shard {
    pub fn dim(&self) -> usize {
        match self {
            Shard::Logistic(s) => s.dim,
            Shard::Quadratic(q) => q.b.len(),
        }
    }

    fn check_w(&self, w: &DenseVector) -> Result<()> {
        if w.len() != self.dim() {
            return Err(dim_err(format!("w has {} entries, shard dim is {}", w.len(), self.dim())));
        }
        Ok(())
    }

    pub fn value(&self, w: &DenseVector) -> Result<f64> {
        self.check_w(w)?;
        Ok(match self {
            Shard::Logistic(s) => {
                let ws = w.as_slice();
                let loss: f64 = (0..s.n_rows())
                    .map(|j| log1p_exp_neg(s.labels[j] * s.features.dot(j, ws)))
                    .sum();
                loss / s.n_rows() as f64 + 0.5 * s.reg_mu * w.norm_squared()
            }
            Shard::Quadratic(q) => 0.5 * w.dot(&(&q.h * w)) + q.b.dot(w),
        })
    }

    /// Exact `∇f_i(w)`.
    pub fn full_gradient(&self, w: &DenseVector) -> Result<DenseVector> {
        self.check_w(w)?;
        Ok(match self {
            Shard::Logistic(s) => logistic_gradient(s, w, None),
            Shard::Quadratic(q) => &q.h * w + &q.b,
        })
    }

    pub fn gradient<R: Rng + ?Sized>(
        &self,
        w: &DenseVector,
        batch: BatchSpec,
        rng: &mut R,
    ) -> Result<DenseVector> {
        self.check_w(w)?;
        match self {
            Shard::Logistic(s) => {
                let rows = batch_rows(s.n_rows(), batch, rng)?;
                Ok(logistic_gradient(s, w, rows.as_deref()))
            }
            Shard::Quadratic(_) => self.full_gradient(w),
        }
    }

    /// `∇²f_i(w) S` (or an unbiased minibatch estimate), column by column.
    pub fn hessian_sketch<R: Rng + ?Sized>(
        &self,
        w: &DenseVector,
        sketch: &DenseMatrix,
        batch: BatchSpec,
        rng: &mut R,
    ) -> Result<DenseMatrix> {
        self.check_w(w)?;
        if sketch.nrows() != self.dim() {
            return Err(dim_err(format!(
                "sketch has {} rows, shard dim is {}",
                sketch.nrows(),
                self.dim()
            )));
        }
        match self {
            Shard::Logistic(s) => {
                let rows = batch_rows(s.n_rows(), batch, rng)?;
                Ok(logistic_hessian_sketch(s, w, sketch, rows.as_deref()))
            }
            Shard::Quadratic(q) => Ok(&q.h * sketch),
        }
    }
}

fn logistic_gradient(s: &LogisticShard, w: &DenseVector, rows: Option<&[usize]>) -> DenseVector {
    let ws = w.as_slice();
    let mut g = vec![0.0; s.dim];
    let mut visit = |j: usize| {
        let b = s.labels[j];
        let z = s.features.dot(j, ws);
        s.features.axpy(j, -b * sigmoid(-b * z), &mut g);
    };
    let count = match rows {
        Some(rows) => {
            rows.iter().for_each(|&j| visit(j));
            rows.len()
        }
        None => {
            (0..s.n_rows()).for_each(&mut visit);
            s.n_rows()
        }
    };
    let inv = 1.0 / count as f64;
    DenseVector::from_iterator(s.dim, g.iter().zip(ws).map(|(gi, wi)| gi * inv + s.reg_mu * wi))
}

fn logistic_hessian_sketch(
    s: &LogisticShard,
    w: &DenseVector,
    sketch: &DenseMatrix,
    rows: Option<&[usize]>,
) -> DenseMatrix {
    let ws = w.as_slice();
    let m = sketch.ncols();
    let cols: Vec<&[f64]> = (0..m)
        .map(|c| {
            let start = c * sketch.nrows();
            &sketch.as_slice()[start..start + sketch.nrows()]
        })
        .collect();
    let mut out = DenseMatrix::zeros(s.dim, m);
    let mut visit = |j: usize| {
        let sig = sigmoid(s.features.dot(j, ws));
        let weight = sig * (1.0 - sig);
        if weight == 0.0 {
            return;
        }
        for (c, col) in cols.iter().enumerate() {
            let t = weight * s.features.dot(j, col);
            if t != 0.0 {
                let start = c * s.dim;
                s.features.axpy(j, t, &mut out.as_mut_slice()[start..start + s.dim]);
            }
        }
    };
    let count = match rows {
        Some(rows) => {
            rows.iter().for_each(|&j| visit(j));
            rows.len()
        }
        None => {
            (0..s.n_rows()).for_each(&mut visit);
            s.n_rows()
        }
    };
    out /= count as f64;
    out + sketch * s.reg_mu
}

/// `F(w) = (1/n) Σ f_i(w)` and its gradient.
pub fn global_value_and_grad(shards: &[Shard], w: &DenseVector) -> Result<(f64, DenseVector)> {
    if shards.is_empty() {
        return Err(Error::Config("global objective over an empty shard list".into()));
    }
    let mut value = 0.0;
    let mut grad = DenseVector::zeros(w.len());
    for s in shards {
        value += s.value(w)?;
        grad += s.full_gradient(w)?;
    }
    let n = shards.len() as f64;
    Ok((value / n, grad / n))
}
