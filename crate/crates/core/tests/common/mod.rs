#![allow(dead_code)]

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flecs_cgd::objective::{CsrRows, LogisticShard, QuadraticShard, Shard};
use flecs_cgd::{DenseMatrix, DenseVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> DenseVector {
    DenseVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random orthogonal matrix from the QR of a Gaussian matrix.
pub fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DenseMatrix {
    gaussian_mat(rng, d, d).qr().q()
}

/// `Q diag(eigs) Q^T` with a random orthogonal `Q`.
pub fn with_spectrum(rng: &mut ChaCha8Rng, eigs: &[f64]) -> DenseMatrix {
    let q = orthogonal(rng, eigs.len());
    let d = DenseMatrix::from_diagonal(&DenseVector::from_row_slice(eigs));
    let a = &q * d * q.transpose();
    (&a + a.transpose()) * 0.5
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DenseMatrix {
    let eigs: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..5.0)).collect();
    with_spectrum(rng, &eigs)
}

pub fn random_logistic(rng: &mut ChaCha8Rng, d: usize, r: usize, reg_mu: f64) -> Shard {
    let a = gaussian_mat(rng, r, d) / (d as f64).sqrt();
    let labels = (0..r).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    Shard::Logistic(LogisticShard::new(CsrRows::from_dense(&a), labels, reg_mu, d).unwrap())
}

pub fn quadratic(h: DenseMatrix, b: DenseVector) -> Shard {
    Shard::Quadratic(QuadraticShard::new(h, b).unwrap())
}

/// Writes straight to the process stderr so the line survives test output
/// capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}
