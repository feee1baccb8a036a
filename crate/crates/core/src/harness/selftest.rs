//! Statistical invariant suites behind the `selftest` subcommand.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::compress::{compress_vector, CompressorSpec, NormOrder};
use crate::error::Result;
use crate::linalg::{DenseMatrix, DenseVector};
use crate::objective::{BatchSpec, CsrRows, LogisticShard, Shard};
use crate::oracles::statistical_unbiasedness;
use crate::worker::error_feedback_step;

/// Allowed relative gap between the second-moment ratios of two halves.
pub const MOMENT_STABILITY_TOL: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Ten deterministic probe vectors: a few structured shapes plus Gaussian
/// draws, some with heavy outliers.
pub fn probe_vectors(d: usize, seed: u64) -> Vec<DenseVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        DenseVector::from_element(d, 1.0),
        DenseVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        DenseVector::from_fn(d, |i, _| (i as f64 + 1.0) / d as f64),
        DenseVector::from_fn(d, |i, _| if i % 2 == 0 { 0.3 } else { -0.7 }),
        DenseVector::from_fn(d, |i, _| ((i as f64) * 0.37).sin() * 1e-3),
    ];
    while out.len() < 10 {
        let k = out.len();
        let mut v = DenseVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        if k % 2 == 0 {
            v[k] *= 50.0;
        }
        out.push(v);
    }
    out
}

/// Unbiasedness of dithering on the probe vectors, plus agreement of the
/// empirical `E||Q(x)||^2 / ||x||^2` between the two halves of the draws.
pub fn compressor_suite(levels: u32, norm: NormOrder, d: usize, draws: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let spec = CompressorSpec::dithering(levels, norm)?;
    let p = match norm {
        NormOrder::Two => "2",
        NormOrder::Inf => "inf",
    };
    let mut results = Vec::new();
    for (idx, x) in probe_vectors(d, seed).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64 + 1).wrapping_mul(0x9e37_79b9));
        let half = draws / 2;
        let mut sq = [0.0f64; 2];
        let mut t = 0usize;
        let report = statistical_unbiasedness(
            || {
                let q = compress_vector(x, &spec, &mut rng)?.value;
                sq[usize::from(t >= half)] += q.norm_squared();
                t += 1;
                Ok(q)
            },
            x,
            draws,
        )?;
        let nx = x.norm_squared();
        let r1 = sq[0] / half as f64 / nx;
        let r2 = sq[1] / (draws - half) as f64 / nx;
        let gap = (r1 - r2).abs() / r1.min(r2);
        results.push(SuiteResult {
            name: format!("dithering s={levels} p={p} probe {idx}"),
            pass: report.pass && gap <= MOMENT_STABILITY_TOL,
            detail: format!(
                "max|z| = {:.3}, moment ratio {r1:.5} vs {r2:.5} (gap {:.2}%)",
                report.max_abs_z,
                gap * 100.0
            ),
        });
    }
    Ok(results)
}

/// `E[h_{k+1}] = (1 - gamma) h + gamma g` for one error-feedback step.
pub fn error_feedback_suite(gammas: &[f64], d: usize, draws: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let spec = CompressorSpec::dithering(64, NormOrder::Inf)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DenseVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g = DenseVector::from_fn(d, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    gammas
        .iter()
        .map(|&gamma| {
            let target = &h * (1.0 - gamma) + &g * gamma;
            let report = statistical_unbiasedness(
                || Ok(error_feedback_step(&h, &g, gamma, &spec, &mut rng)?.1),
                &target,
                draws,
            )?;
            Ok(SuiteResult {
                name: format!("error feedback gamma={gamma}"),
                pass: report.pass,
                detail: format!("max|z| = {:.3}", report.max_abs_z),
            })
        })
        .collect()
}

/// Minibatch gradient and Hessian-sketch estimates average to the exact
/// oracle values.
pub fn minibatch_suite(draws: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let (d, r, b) = (8, 40, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DenseMatrix::from_fn(r, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let labels: Vec<f64> = (0..r).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let shard = Shard::Logistic(LogisticShard::new(CsrRows::from_dense(&a), labels, 1e-2, d)?);
    let w = DenseVector::from_fn(d, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let s = DenseMatrix::from_fn(d, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let batch = BatchSpec::Minibatch(b);

    let grad_target = shard.full_gradient(&w)?;
    let grad = statistical_unbiasedness(|| shard.gradient(&w, batch, &mut rng), &grad_target, draws)?;

    let hs_target = shard.hessian_sketch(&w, &s, BatchSpec::Full, &mut rng)?;
    let flat = |m: DenseMatrix| DenseVector::from_column_slice(m.as_slice());
    let hess = statistical_unbiasedness(
        || Ok(flat(shard.hessian_sketch(&w, &s, batch, &mut rng)?)),
        &flat(hs_target),
        draws,
    )?;
    Ok(vec![
        SuiteResult {
            name: format!("minibatch gradient b={b}/{r}"),
            pass: grad.pass,
            detail: format!("max|z| = {:.3}", grad.max_abs_z),
        },
        SuiteResult {
            name: format!("minibatch Hessian sketch b={b}/{r}"),
            pass: hess.pass,
            detail: format!("max|z| = {:.3}", hess.max_abs_z),
        },
    ])
}

/// Every suite with `draws` samples per check.
pub fn run_all(draws: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = compressor_suite(64, NormOrder::Inf, 100, draws, seed)?;
    out.extend(compressor_suite(64, NormOrder::Two, 100, draws, seed)?);
    out.extend(error_feedback_suite(&[0.25, 1.0], 50, draws, seed)?);
    out.extend(minibatch_suite(draws, seed)?);
    Ok(out)
}
