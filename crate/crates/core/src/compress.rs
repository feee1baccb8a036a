//! Unbiased compression operators with exact bit accounting.
//!
//! Random dithering: with `l = ||x||_p` and `u_i = s |x_i| / l`, coordinate
//! `i` is rounded to `floor(u_i)` or `floor(u_i) + 1` with probability
//! `frac(u_i)` and reconstructed as `sign(x_i) * l * level / s`. The payload is
//! one float (the norm) plus a sign bit and a fixed-width level index per
//! coordinate. No entropy coding is modelled.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};

pub const DEFAULT_FLOAT_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormOrder {
    Two,
    Inf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorKind {
    Identity,
    Dithering { levels: u32, norm: NormOrder },
}

/// Compressor configuration. Text form: `identity` or
/// `dither:s=<levels>,p=<2|inf>[,float_bits=<n>]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CompressorSpec {
    pub kind: CompressorKind,
    pub float_bits: u32,
}

impl CompressorSpec {
    pub const fn identity() -> Self {
        Self {
            kind: CompressorKind::Identity,
            float_bits: DEFAULT_FLOAT_BITS,
        }
    }

    pub fn dithering(levels: u32, norm: NormOrder) -> Result<Self> {
        let spec = Self {
            kind: CompressorKind::Dithering { levels, norm },
            float_bits: DEFAULT_FLOAT_BITS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.float_bits == 0 {
            return Err(Error::Config("float_bits must be positive".into()));
        }
        if let CompressorKind::Dithering { levels, .. } = self.kind {
            if levels == 0 {
                return Err(Error::Config("dithering needs at least one level".into()));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, CompressorKind::Identity)
    }

    /// Bits of one level index: `ceil(log2(s + 1))`.
    pub fn level_bits(&self) -> u32 {
        match self.kind {
            CompressorKind::Identity => 0,
            CompressorKind::Dithering { levels, .. } => u32::BITS - levels.leading_zeros(),
        }
    }

    /// Nominal payload of one `dim`-vector (no escapes).
    pub fn vector_bits(&self, dim: usize) -> u64 {
        let dim = dim as u64;
        match self.kind {
            CompressorKind::Identity => self.float_bits as u64 * dim,
            CompressorKind::Dithering { .. } => {
                self.float_bits as u64 + dim * (1 + self.level_bits() as u64)
            }
        }
    }
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CompressorKind::Identity => write!(f, "identity")?,
            CompressorKind::Dithering { levels, norm } => {
                let p = match norm {
                    NormOrder::Two => "2",
                    NormOrder::Inf => "inf",
                };
                write!(f, "dither:s={levels},p={p}")?;
            }
        }
        if self.float_bits != DEFAULT_FLOAT_BITS {
            write!(f, ",float_bits={}", self.float_bits)?;
        }
        Ok(())
    }
}

impl FromStr for CompressorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("bad compressor spec {s:?}: {why}"));
        let s_trim = s.trim();
        let (head, rest) = match s_trim.split_once(':') {
            Some((h, r)) => (h, r),
            None => match s_trim.split_once(',') {
                Some((h, r)) => (h, r),
                None => (s_trim, ""),
            },
        };
        let mut levels = None;
        let mut norm = NormOrder::Inf;
        let mut float_bits = DEFAULT_FLOAT_BITS;
        for kv in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k.trim() {
                "s" | "levels" => {
                    levels = Some(v.trim().parse::<u32>().map_err(|_| bad("levels not an integer"))?)
                }
                "p" | "norm" => {
                    norm = match v.trim() {
                        "2" => NormOrder::Two,
                        "inf" | "infinity" => NormOrder::Inf,
                        _ => return Err(bad("norm must be 2 or inf")),
                    }
                }
                "float_bits" => {
                    float_bits = v.trim().parse().map_err(|_| bad("float_bits not an integer"))?
                }
                other => return Err(bad(&format!("unknown key {other}"))),
            }
        }
        let kind = match head {
            "identity" | "none" => {
                if levels.is_some() {
                    return Err(bad("identity takes no levels"));
                }
                CompressorKind::Identity
            }
            "dither" | "dithering" => CompressorKind::Dithering {
                levels: levels.ok_or_else(|| bad("missing s=<levels>"))?,
                norm,
            },
            _ => return Err(bad("kind must be identity or dither")),
        };
        let spec = CompressorSpec { kind, float_bits };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for CompressorSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CompressorSpec> for String {
    fn from(s: CompressorSpec) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedVector {
    /// Dequantized value as the receiver reconstructs it.
    pub value: DenseVector,
    pub bits: u64,
    /// Transmitted norm (0 for identity).
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMatrix {
    pub value: DenseMatrix,
    pub bits: u64,
}

fn norm_of(x: &DenseVector, p: NormOrder) -> f64 {
    match p {
        NormOrder::Two => x.norm(),
        NormOrder::Inf => x.amax(),
    }
}

pub fn compress_vector<R: Rng + ?Sized>(
    x: &DenseVector,
    spec: &CompressorSpec,
    rng: &mut R,
) -> Result<CompressedVector> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("compress_vector input is not finite".into()));
    }
    let (levels, norm_order) = match spec.kind {
        CompressorKind::Identity => {
            return Ok(CompressedVector {
                value: x.clone(),
                bits: spec.vector_bits(x.len()),
                norm: 0.0,
            })
        }
        CompressorKind::Dithering { levels, norm } => (levels, norm),
    };

    let mut bits = spec.vector_bits(x.len());
    let norm = norm_of(x, norm_order);
    if norm == 0.0 {
        return Ok(CompressedVector {
            value: DenseVector::zeros(x.len()),
            bits,
            norm,
        });
    }

    let s = levels as f64;
    let mut value = DenseVector::zeros(x.len());
    for (out, &xi) in value.iter_mut().zip(x.iter()) {
        let u = s * xi.abs() / norm;
        let floor = u.floor();
        let up = rng.random::<f64>() < (u - floor);
        if u > s {
            // p=2 rounding overshoot: escape, send the coordinate verbatim
            *out = xi;
            bits += spec.float_bits as u64;
            continue;
        }
        let level = floor + if up { 1.0 } else { 0.0 };
        *out = xi.signum() * norm * level / s;
    }
    Ok(CompressedVector { value, bits, norm })
}

/// Column-wise [`compress_vector`], drawing from one stream in column order.
pub fn compress_matrix<R: Rng + ?Sized>(
    a: &DenseMatrix,
    spec: &CompressorSpec,
    rng: &mut R,
) -> Result<CompressedMatrix> {
    let mut value = DenseMatrix::zeros(a.nrows(), a.ncols());
    let mut bits = 0u64;
    for j in 0..a.ncols() {
        let col = compress_vector(&a.column(j).into_owned(), spec, rng)?;
        value.set_column(j, &col.value);
        bits += col.bits;
    }
    Ok(CompressedMatrix { value, bits })
}

/// Monte-Carlo `E||Q(x)||^2 / ||x||^2`.
pub fn second_moment_ratio<R: Rng + ?Sized>(
    x: &DenseVector,
    spec: &CompressorSpec,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let denom = x.norm_squared();
    if denom == 0.0 {
        return Ok(1.0);
    }
    let mut acc = 0.0;
    for _ in 0..trials {
        acc += compress_vector(x, spec, rng)?.value.norm_squared();
    }
    Ok(acc / trials as f64 / denom)
}

/// Empirical variance parameter: the largest `E||Q(x)||^2 - 1` over a small
/// family of unit probes (first basis vector, the normalized all-ones vector,
/// and eight random directions).
pub fn estimate_omega_q<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    dim: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials < 10_000 {
        return Err(Error::Config(format!(
            "estimate_omega_q needs at least 10^4 trials, got {trials}"
        )));
    }
    if dim == 0 || spec.is_identity() {
        return Ok(0.0);
    }
    let mut probes = vec![
        DenseVector::from_fn(dim, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        DenseVector::from_element(dim, 1.0 / (dim as f64).sqrt()),
    ];
    for _ in 0..8 {
        let v = DenseVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let n = v.norm();
        if n > 0.0 {
            probes.push(v / n);
        }
    }
    let mut worst = 0.0f64;
    for p in &probes {
        worst = worst.max(second_moment_ratio(p, spec, trials, rng)? - 1.0);
    }
    Ok(worst)
}
