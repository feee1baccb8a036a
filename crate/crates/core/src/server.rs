//! Server side of a round: decoding compressed differences, per-worker
//! Hessian-approximation updates, the search direction and the iterate step.
//!
//! Directions follow the descent convention `p = -A g̃` where `A` is the
//! truncated inverse (or its FedSONIA variant) and `w ← w + α p`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{
    apply_truncated_inverse, default_pinv_tol, pinv, qr_thin, sym_eig, symmetrize,
    truncated_inverse_apply, DenseMatrix, DenseVector, TruncationBand,
};
use crate::protocol::{sample_sketch, DownlinkMessage, SketchSpec, UplinkMessage};
use crate::worker::apply_feedback;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HessianUpdate {
    #[default]
    Lsr1,
    Direct,
}

/// Middle matrix of the L-SR1 correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lsr1Middle {
    /// `M - S^T B S`: the SR1 curvature-pair matrix.
    #[default]
    SecantResidual,
    /// `M - S^T Ỹ`, kept only for comparison runs; it vanishes under exact
    /// compression, which disables the update.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionKind {
    #[default]
    Truncated,
    Fedsonia,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub rho: f64,
    pub band: TruncationBand,
    pub hessian_update: HessianUpdate,
    pub lsr1_middle: Lsr1Middle,
    pub direction: DirectionKind,
    pub sketch: SketchSpec,
    /// Run the per-worker Hessian updates on the rayon pool.
    pub parallel: bool,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must be in (0, 1], got {}", self.beta));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return bad(format!("rho must be > 0, got {}", self.rho));
        }
        if self.sketch.m == 0 {
            return bad("memory size m must be at least 1".into());
        }
        Ok(())
    }
}

/// Server-side reconstructions of one round.
#[derive(Debug, Clone)]
pub struct AggregateBundle {
    pub g_tilde: DenseVector,
    pub y_tilde: DenseMatrix,
    pub m: DenseMatrix,
    pub g_per_worker: Vec<DenseVector>,
    pub y_per_worker: Vec<DenseMatrix>,
    pub m_per_worker: Vec<DenseMatrix>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub w: DenseVector,
    /// Per-worker Hessian approximations `B^i_k`.
    pub b: Vec<DenseMatrix>,
    /// Replicas of every worker's error-feedback memory.
    pub h_shadow: Vec<DenseVector>,
    pub cfg: ServerConfig,
}

/// What a round produced besides the state change.
#[derive(Debug, Clone)]
pub struct ServerRoundOutput {
    pub g_tilde: DenseVector,
    pub direction: DenseVector,
    pub downlinks: Vec<DownlinkMessage>,
}

/// L-SR1 correction with small-eigenvalue skipping:
/// `B⁺ = B + R U [L^{-1}]_ω U^T R^T` with `R = Ỹ - B S` and `U L U^T` the
/// eigen-decomposition of the middle matrix. Eigenvalues with `|l| < ω`
/// contribute nothing.
pub fn lsr1_update(
    b: &DenseMatrix,
    y_tilde: &DenseMatrix,
    m: &DenseMatrix,
    s: &DenseMatrix,
    omega_trunc: f64,
    middle: Lsr1Middle,
) -> Result<DenseMatrix> {
    let (d, k) = s.shape();
    if b.shape() != (d, d) || y_tilde.shape() != (d, k) || m.shape() != (k, k) {
        return Err(dim_err(format!(
            "lsr1_update: B {:?}, Ỹ {:?}, M {:?}, S {:?}",
            b.shape(),
            y_tilde.shape(),
            m.shape(),
            s.shape()
        )));
    }
    let bs = b * s;
    let residual = y_tilde - &bs;
    let mid = match middle {
        Lsr1Middle::SecantResidual => m - s.tr_mul(&bs),
        Lsr1Middle::Printed => m - s.tr_mul(y_tilde),
    };
    let eig = sym_eig(&symmetrize(&mid))?;
    let inv: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| if l.abs() >= omega_trunc { 1.0 / l } else { 0.0 })
        .collect();
    if inv.iter().all(|&x| x == 0.0) {
        return Ok(b.clone());
    }
    let ru = residual * &eig.vectors;
    let correction = crate::linalg::scaled_outer(&ru, &inv);
    Ok(symmetrize(&(b + correction)))
}

/// `B⁺ = (1-β) B + β Ỹ M† Ỹ^T`.
pub fn direct_update(b: &DenseMatrix, y_tilde: &DenseMatrix, m: &DenseMatrix, beta: f64) -> Result<DenseMatrix> {
    let (d, k) = y_tilde.shape();
    if b.shape() != (d, d) || m.shape() != (k, k) {
        return Err(dim_err(format!(
            "direct_update: B {:?}, Ỹ {:?}, M {:?}",
            b.shape(),
            y_tilde.shape(),
            m.shape()
        )));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("beta must be in (0, 1], got {beta}")));
    }
    let fresh = y_tilde * pinv(m, None) * y_tilde.transpose();
    Ok(symmetrize(&(b * (1.0 - beta) + fresh * beta)))
}

/// `p = -(|B|_ω^Ω)^{-1} g̃`.
pub fn direction_truncated(b_avg: &DenseMatrix, g_tilde: &DenseVector, band: TruncationBand) -> Result<DenseVector> {
    Ok(-truncated_inverse_apply(b_avg, g_tilde, band)?)
}

/// FedSONIA direction. The truncated inverse of `Ỹ M† Ỹ^T` acts on the
/// projection of `g̃` onto `range(Ỹ)`; the orthogonal remainder is scaled by
/// `ρ`. When `Ỹ` is column-rank deficient the QR basis is reduced to the
/// numerical range first, so directions outside `range(Ỹ)` always get `ρ`.
pub fn direction_fedsonia(
    y_tilde: &DenseMatrix,
    m: &DenseMatrix,
    g_tilde: &DenseVector,
    band: TruncationBand,
    rho: f64,
) -> Result<DenseVector> {
    let (d, k) = y_tilde.shape();
    if g_tilde.len() != d || m.shape() != (k, k) {
        return Err(dim_err(format!(
            "direction_fedsonia: Ỹ {:?}, M {:?}, g̃ {}",
            y_tilde.shape(),
            m.shape(),
            g_tilde.len()
        )));
    }
    let (q, r) = qr_thin(y_tilde)?;
    let (basis, coords) = match range_basis(&q, &r) {
        Some(pair) => pair,
        None => return Ok(-g_tilde * rho),
    };
    let core = symmetrize(&(&coords * pinv(m, None) * coords.transpose()));
    let eig = sym_eig(&core)?;
    let v_tilde = &basis * &eig.vectors;

    let mut coeff = v_tilde.tr_mul(g_tilde);
    let g_par = &v_tilde * &coeff;
    for (c, &l) in coeff.iter_mut().zip(eig.values.iter()) {
        *c /= band.clamp(l);
    }
    let g_perp = g_tilde - g_par;
    Ok(-(&v_tilde * coeff) - g_perp * rho)
}

/// Orthonormal basis of `range(QR)` and the coordinates of the columns in it.
/// Full column rank keeps `(Q, R)` as is; otherwise rotates by the left
/// singular vectors of `R` and drops the null part. `None` for a zero range.
fn range_basis(q: &DenseMatrix, r: &DenseMatrix) -> Option<(DenseMatrix, DenseMatrix)> {
    let svd = r.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    if !(sigma_max > 0.0) {
        return None;
    }
    let tol = default_pinv_tol(sigma_max, q.nrows(), r.ncols());
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    if keep.len() == r.nrows() {
        return Some((q.clone(), r.clone()));
    }
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let u_r = u.select_columns(&keep);
    let mut coords = v_t.select_rows(&keep);
    for (row, &i) in keep.iter().enumerate() {
        coords.row_mut(row).scale_mut(svd.singular_values[i]);
    }
    Some((q * u_r, coords))
}

impl ServerState {
    /// `B^i_0 = 0`, `h^i_0 = 0` for `n` workers.
    pub fn new(w0: DenseVector, n_workers: usize, cfg: ServerConfig) -> Result<Self> {
        cfg.validate()?;
        if n_workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        let d = w0.len();
        if cfg.sketch.m > d {
            return Err(Error::Config(format!("m={} exceeds d={d}", cfg.sketch.m)));
        }
        Ok(Self {
            b: vec![DenseMatrix::zeros(d, d); n_workers],
            h_shadow: vec![DenseVector::zeros(d); n_workers],
            w: w0,
            cfg,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn n_workers(&self) -> usize {
        self.b.len()
    }

    pub fn sketch(&self, round: u64) -> Result<DenseMatrix> {
        sample_sketch(&self.cfg.sketch, self.dim(), round)
    }

    /// Downlinks for `round` given the current `w` and `B`.
    pub fn downlinks(&self, round: u64) -> Result<Vec<DownlinkMessage>> {
        let s = self.sketch(round)?;
        Ok(self
            .b
            .iter()
            .map(|b| DownlinkMessage::new(self.w.clone(), b * &s))
            .collect())
    }

    /// Decodes `g̃^i = c^i + h^i`, `Ỹ^i = C^i + B^i S`, averages, then
    /// advances the shadow memories exactly as the workers did.
    pub fn aggregate(&mut self, msgs: &[UplinkMessage], s: &DenseMatrix) -> Result<AggregateBundle> {
        let n = self.n_workers();
        if msgs.len() != n {
            return Err(Error::Data(format!("expected {n} uplinks, got {}", msgs.len())));
        }
        let (d, k) = (self.dim(), s.ncols());
        let mut g_per_worker = Vec::with_capacity(n);
        let mut y_per_worker = Vec::with_capacity(n);
        let mut m_per_worker = Vec::with_capacity(n);
        for (i, msg) in msgs.iter().enumerate() {
            if msg.grad.value.len() != d || msg.hess.value.shape() != (d, k) || msg.curvature.shape() != (k, k) {
                return Err(dim_err(format!("uplink {i} has inconsistent shapes")));
            }
            g_per_worker.push(&msg.grad.value + &self.h_shadow[i]);
            y_per_worker.push(&msg.hess.value + &self.b[i] * s);
            m_per_worker.push(msg.curvature.clone());
        }
        for (h, msg) in self.h_shadow.iter_mut().zip(msgs) {
            *h = apply_feedback(h, &msg.grad.value, self.cfg.gamma);
        }
        let inv = 1.0 / n as f64;
        let g_tilde = g_per_worker.iter().fold(DenseVector::zeros(d), |acc, g| acc + g) * inv;
        let y_tilde = y_per_worker.iter().fold(DenseMatrix::zeros(d, k), |acc, y| acc + y) * inv;
        let m = m_per_worker.iter().fold(DenseMatrix::zeros(k, k), |acc, m| acc + m) * inv;
        Ok(AggregateBundle {
            g_tilde,
            y_tilde,
            m,
            g_per_worker,
            y_per_worker,
            m_per_worker,
        })
    }

    fn update_hessians(&mut self, bundle: &AggregateBundle, s: &DenseMatrix) -> Result<()> {
        let cfg = self.cfg;
        let update = |(i, b): (usize, &DenseMatrix)| -> Result<DenseMatrix> {
            let (y, m) = (&bundle.y_per_worker[i], &bundle.m_per_worker[i]);
            match cfg.hessian_update {
                HessianUpdate::Lsr1 => lsr1_update(b, y, m, s, cfg.band.lower(), cfg.lsr1_middle),
                HessianUpdate::Direct => direct_update(b, y, m, cfg.beta),
            }
        };
        let next: Vec<DenseMatrix> = if cfg.parallel {
            self.b.par_iter().enumerate().map(update).collect::<Result<_>>()?
        } else {
            self.b.iter().enumerate().map(update).collect::<Result<_>>()?
        };
        self.b = next;
        Ok(())
    }

    pub fn average_hessian(&self) -> DenseMatrix {
        let d = self.dim();
        self.b.iter().fold(DenseMatrix::zeros(d, d), |acc, b| acc + b) / self.n_workers() as f64
    }

    /// Search direction for the current bundle and `B_{k+1}`.
    pub fn direction(&self, bundle: &AggregateBundle) -> Result<DenseVector> {
        match self.cfg.direction {
            DirectionKind::Truncated => {
                let eig = sym_eig(&self.average_hessian())?;
                Ok(-apply_truncated_inverse(&eig, &bundle.g_tilde, self.cfg.band))
            }
            DirectionKind::Fedsonia => {
                direction_fedsonia(&bundle.y_tilde, &bundle.m, &bundle.g_tilde, self.cfg.band, self.cfg.rho)
            }
        }
    }

    /// Server half of round `k`: aggregate, update every `B^i`, step, and
    /// build the downlinks carrying `B^i_{k+1} S_{k+1}`.
    pub fn round(&mut self, msgs: &[UplinkMessage], k: u64) -> Result<ServerRoundOutput> {
        let s = self.sketch(k)?;
        let bundle = self.aggregate(msgs, &s)?;
        self.update_hessians(&bundle, &s)?;
        let p = self.direction(&bundle)?;
        if !p.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite search direction at round {k}")));
        }
        self.w += &p * self.cfg.alpha;
        let downlinks = self.downlinks(k + 1)?;
        Ok(ServerRoundOutput {
            g_tilde: bundle.g_tilde,
            direction: p,
            downlinks,
        })
    }
}
