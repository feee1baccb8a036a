//! Dense linear-algebra kernels and the eigenvalue truncation operator.
//!
//! Matrices are `nalgebra` dense matrices; indexing is `(row, col)` regardless
//! of the underlying storage order.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dim_err, Error, Result};

pub type DenseMatrix = DMatrix<f64>;
pub type DenseVector = DVector<f64>;

/// Eigen-decomposition of a symmetric matrix.
///
/// `values` are sorted in descending order and column `j` of `vectors` is the
/// eigenvector for `values[j]`. Each eigenvector is oriented so that its first
/// non-negligible component is positive.
#[derive(Debug, Clone)]
pub struct SymEigDecomposition {
    pub values: DenseVector,
    pub vectors: DenseMatrix,
}

impl SymEigDecomposition {
    /// `V diag(values) V^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        scaled_outer(&self.vectors, self.values.as_slice())
    }
}

/// Lower/upper clamp applied to eigenvalue magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationBand {
    lower: f64,
    upper: f64,
}

impl TruncationBand {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0) || !(lower <= upper) || !upper.is_finite() {
            return Err(Error::Config(format!(
                "truncation band requires 0 < lower <= upper < inf, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// `min(max(|lambda|, lower), upper)`
    #[inline]
    pub fn clamp(&self, lambda: f64) -> f64 {
        lambda.abs().max(self.lower).min(self.upper)
    }
}

pub fn ensure_finite_matrix(a: &DenseMatrix, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite entries")))
    }
}

pub fn ensure_finite_vector(v: &DenseVector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite entries")))
    }
}

/// `(A + A^T) / 2`
pub fn symmetrize(a: &DenseMatrix) -> DenseMatrix {
    (a + a.transpose()) * 0.5
}

/// Largest absolute asymmetry `max |A_ij - A_ji|`.
pub fn asymmetry(a: &DenseMatrix) -> f64 {
    let n = a.nrows().min(a.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// `V diag(d) V^T` for a column matrix `V`.
pub fn scaled_outer(v: &DenseMatrix, d: &[f64]) -> DenseMatrix {
    let mut vd = v.clone();
    for (j, &dj) in d.iter().enumerate() {
        vd.column_mut(j).scale_mut(dj);
    }
    vd * v.transpose()
}

pub fn sym_eig(a: &DenseMatrix) -> Result<SymEigDecomposition> {
    if !a.is_square() {
        return Err(dim_err(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    ensure_finite_matrix(a, "sym_eig input")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(SymEigDecomposition {
            values: DenseVector::zeros(0),
            vectors: DenseMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    if !eig.eigenvalues.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("eigenvalues did not converge".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut values = DenseVector::zeros(n);
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let flip = col
            .iter()
            .find(|x| x.abs() > 1e-12)
            .is_some_and(|&x| x < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        vectors.column_mut(dst).copy_from(&(col * sign));
    }
    Ok(SymEigDecomposition { values, vectors })
}

/// Thin Householder QR: `A (d x m) = Q (d x m) R (m x m)`.
pub fn qr_thin(a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let (d, m) = a.shape();
    if d < m {
        return Err(dim_err(format!("qr_thin needs rows >= cols, got {d}x{m}")));
    }
    ensure_finite_matrix(a, "qr_thin input")?;
    let qr = a.clone().qr();
    Ok((qr.q(), qr.r()))
}

/// Default rank cutoff `max(rows, cols) * eps * sigma_max`.
pub fn default_pinv_tol(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Moore-Penrose pseudo-inverse via SVD. Singular values `<= tol` are
/// treated as zero; `tol = None` selects [`default_pinv_tol`].
pub fn pinv(m: &DenseMatrix, tol: Option<f64>) -> DenseMatrix {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 || m.iter().all(|&x| x == 0.0) {
        return DenseMatrix::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = tol.unwrap_or_else(|| default_pinv_tol(sigma_max, rows, cols));
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");

    let mut out = DenseMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            // out += v_k u_k^T / s
            out.ger(1.0 / s, &v_t.row(k).transpose(), &u.column(k), 1.0);
        }
    }
    out
}

/// Elementwise `min(max(|lambda|, lower), upper)`.
pub fn truncate_spectrum(lambdas: &[f64], lower: f64, upper: f64) -> Result<Vec<f64>> {
    let band = TruncationBand::new(lower, upper)?;
    Ok(truncate_with(lambdas, band))
}

pub fn truncate_with(lambdas: &[f64], band: TruncationBand) -> Vec<f64> {
    lambdas.iter().map(|&l| band.clamp(l)).collect()
}

/// `(|B|_band)^{-1} v = V diag(1 / clamp(lambda)) V^T v`.
pub fn truncated_inverse_apply(
    b: &DenseMatrix,
    v: &DenseVector,
    band: TruncationBand,
) -> Result<DenseVector> {
    if !b.is_square() || b.nrows() != v.len() {
        return Err(dim_err(format!(
            "truncated_inverse_apply: matrix {}x{} vs vector {}",
            b.nrows(),
            b.ncols(),
            v.len()
        )));
    }
    let eig = sym_eig(b)?;
    Ok(apply_truncated_inverse(&eig, v, band))
}

/// Same as [`truncated_inverse_apply`] with a precomputed decomposition.
pub fn apply_truncated_inverse(
    eig: &SymEigDecomposition,
    v: &DenseVector,
    band: TruncationBand,
) -> DenseVector {
    let mut coeffs = eig.vectors.tr_mul(v);
    for (c, &l) in coeffs.iter_mut().zip(eig.values.iter()) {
        *c /= band.clamp(l);
    }
    &eig.vectors * coeffs
}
