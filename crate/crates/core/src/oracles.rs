//! Independent verification oracles for tests and the `selftest` command.
//!
//! Nothing on the algorithm path calls into this module. The dense
//! references use their own cyclic Jacobi eigensolver rather than the
//! production decomposition.

use crate::error::{dim_err, Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::objective::Shard;

/// Central differences of `shard.value` per coordinate.
pub fn finite_diff_gradient(shard: &Shard, w: &DenseVector, step: f64) -> Result<DenseVector> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut out = DenseVector::zeros(w.len());
    let mut probe = w.clone();
    for i in 0..w.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = shard.value(&probe)?;
        probe[i] = orig - step;
        let down = shard.value(&probe)?;
        probe[i] = orig;
        out[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// Central differences of the exact gradient along `direction`.
pub fn finite_diff_hvp(shard: &Shard, w: &DenseVector, direction: &DenseVector, step: f64) -> Result<DenseVector> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let up = shard.full_gradient(&(w + direction * step))?;
    let down = shard.full_gradient(&(w - direction * step))?;
    Ok((up - down) / (2.0 * step))
}

/// `||a - b|| / max(||b||, floor)`
pub fn relative_error(a: &DenseVector, b: &DenseVector, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

#[derive(Debug, Clone)]
pub struct UnbiasednessReport {
    pub draws: usize,
    pub mean: DenseVector,
    /// Per-coordinate `(mean - target) / (sd / sqrt(draws))`.
    pub z: Vec<f64>,
    pub max_abs_z: f64,
    pub pass: bool,
}

pub const Z_THRESHOLD: f64 = 4.0;

/// Monte-Carlo check of `E[sampler()] = target`: passes iff every
/// coordinate's z-score is at most 4 in magnitude. A coordinate with zero
/// sample variance scores 0 when its mean equals the target exactly and
/// infinity otherwise.
pub fn statistical_unbiasedness<F>(mut sampler: F, target: &DenseVector, draws: usize) -> Result<UnbiasednessReport>
where
    F: FnMut() -> Result<DenseVector>,
{
    if draws < 10_000 {
        return Err(Error::Config(format!("need at least 10^4 draws, got {draws}")));
    }
    let d = target.len();
    // Welford
    let mut mean = DenseVector::zeros(d);
    let mut m2 = DenseVector::zeros(d);
    for t in 0..draws {
        let x = sampler()?;
        if x.len() != d {
            return Err(dim_err(format!("sampler returned {} entries, target has {d}", x.len())));
        }
        let n = (t + 1) as f64;
        for i in 0..d {
            let delta = x[i] - mean[i];
            mean[i] += delta / n;
            m2[i] += delta * (x[i] - mean[i]);
        }
    }
    let n = draws as f64;
    let z: Vec<f64> = (0..d)
        .map(|i| {
            let diff = mean[i] - target[i];
            let var = m2[i] / (n - 1.0);
            let se = (var / n).sqrt();
            if se > 0.0 {
                diff / se
            } else if diff.abs() <= 1e-12 * target[i].abs().max(1e-300) {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let max_abs_z = z.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    Ok(UnbiasednessReport {
        draws,
        mean,
        z,
        max_abs_z,
        pass: max_abs_z <= Z_THRESHOLD,
    })
}

/// Exact `E||Q(x)||^2` of random dithering by enumerating the two outcomes
/// of every coordinate.
pub fn dithering_second_moment(x: &DenseVector, levels: u32, norm: f64) -> f64 {
    if norm == 0.0 {
        return 0.0;
    }
    let s = levels as f64;
    let unit = norm / s;
    x.iter()
        .map(|&xi| {
            let u = s * xi.abs() / norm;
            let lo = u.floor();
            let p_up = u - lo;
            unit * unit * ((1.0 - p_up) * lo * lo + p_up * (lo + 1.0) * (lo + 1.0))
        })
        .sum()
}

/// Cyclic Jacobi eigensolver for small symmetric matrices. Returns
/// eigenvalues (unsorted) and the matching eigenvector columns.
pub fn jacobi_eigen(a: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let n = a.nrows();
    let mut a = (a + a.transpose()) * 0.5;
    let mut v = DenseMatrix::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

fn clamp_abs(l: f64, lo: f64, hi: f64) -> f64 {
    l.abs().max(lo).min(hi)
}

/// Pseudo-inverse of a symmetric matrix through [`jacobi_eigen`].
fn sym_pinv(m: &DenseMatrix) -> DenseMatrix {
    let (vals, vecs) = jacobi_eigen(m);
    let top = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-12 * top;
    let mut out = DenseMatrix::zeros(m.nrows(), m.ncols());
    for (j, &l) in vals.iter().enumerate() {
        if l.abs() > tol && top > 0.0 {
            let col = vecs.column(j);
            out += col * col.transpose() / l;
        }
    }
    out
}

const REFERENCE_MAX_DIM: usize = 200;

fn check_reference_dim(d: usize) -> Result<()> {
    if d > REFERENCE_MAX_DIM {
        return Err(Error::Config(format!(
            "dense reference refuses d={d} (limit {REFERENCE_MAX_DIM})"
        )));
    }
    Ok(())
}

/// `-(|B|_lo^hi)^{-1} g` with the d×d inverse formed explicitly.
pub fn dense_reference_truncated(b: &DenseMatrix, g: &DenseVector, lower: f64, upper: f64) -> Result<DenseVector> {
    check_reference_dim(g.len())?;
    let (vals, vecs) = jacobi_eigen(b);
    let mut inv = DenseMatrix::zeros(g.len(), g.len());
    for (j, &l) in vals.iter().enumerate() {
        let col = vecs.column(j);
        inv += col * col.transpose() / clamp_abs(l, lower, upper);
    }
    Ok(-(inv * g))
}

/// FedSONIA direction built from explicit d×d matrices: an orthonormal basis
/// `U` of `range(Ỹ)` from the eigenvectors of `Ỹ^T Ỹ`, the restriction
/// `U^T (Ỹ M† Ỹ^T) U`, its truncated inverse, and the projector `I - U U^T`.
pub fn dense_reference_direction(
    y_tilde: &DenseMatrix,
    m: &DenseMatrix,
    g: &DenseVector,
    lower: f64,
    upper: f64,
    rho: f64,
) -> Result<DenseVector> {
    let d = g.len();
    check_reference_dim(d)?;
    if y_tilde.nrows() != d {
        return Err(dim_err("Ỹ rows must match g"));
    }
    let gram = y_tilde.transpose() * y_tilde;
    let (gvals, gvecs) = jacobi_eigen(&gram);
    let smax = gvals.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();
    let mut basis_cols = Vec::new();
    for (j, &l) in gvals.iter().enumerate() {
        let sigma = l.max(0.0).sqrt();
        if smax > 0.0 && sigma > 1e-7 * smax {
            basis_cols.push(y_tilde * gvecs.column(j) / sigma);
        }
    }
    let identity = DenseMatrix::identity(d, d);
    if basis_cols.is_empty() {
        return Ok(-(identity * g) * rho);
    }
    let u = DenseMatrix::from_columns(&basis_cols);
    let b_full = y_tilde * sym_pinv(m) * y_tilde.transpose();
    let restricted = u.transpose() * &b_full * &u;
    let (vals, vecs) = jacobi_eigen(&restricted);
    let r = vals.len();
    let mut inner = DenseMatrix::zeros(r, r);
    for (j, &l) in vals.iter().enumerate() {
        let col = vecs.column(j);
        inner += col * col.transpose() / clamp_abs(l, lower, upper);
    }
    let projector = &u * u.transpose();
    let operator = &u * inner * u.transpose() + (identity - projector) * rho;
    Ok(-(operator * g))
}
