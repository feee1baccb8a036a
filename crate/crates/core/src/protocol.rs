//! Round messages, shared-seed sketches, bit formulas and RNG streams.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compress::{CompressedMatrix, CompressedVector, CompressorSpec};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};

/// Width of every uncompressed float on the wire.
pub const WIRE_FLOAT_BITS: u64 = 32;

/// Worker id used for server-side streams.
pub const SERVER_ID: u64 = u64::MAX;

/// Purpose tag of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamTag {
    Sketch = 1,
    GradBatch = 2,
    HessBatch = 3,
    GradCompress = 4,
    HessCompress = 5,
    Partition = 6,
    Synthetic = 7,
    Diagnostics = 8,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream for `(global_seed, worker, round, tag)`.
pub fn stream_seed(global_seed: u64, worker: u64, round: u64, tag: StreamTag) -> u64 {
    let mut h = splitmix64(global_seed);
    h = splitmix64(h ^ worker);
    h = splitmix64(h ^ round);
    splitmix64(h ^ tag as u64)
}

/// Independent, reproducible stream; no state is shared between streams, so
/// evaluation order and thread placement cannot change results.
pub fn stream(global_seed: u64, worker: u64, round: u64, tag: StreamTag) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(global_seed, worker, round, tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchKind {
    /// i.i.d. `N(0, 1/m)` entries.
    #[default]
    Gaussian,
    /// `m` distinct standard basis vectors.
    Coordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchSpec {
    pub kind: SketchKind,
    pub m: usize,
    pub global_seed: u64,
}

/// `S_k`, a pure function of `(spec, d, round)`. Worker and server both call
/// this instead of exchanging the sketch.
pub fn sample_sketch(spec: &SketchSpec, d: usize, round: u64) -> Result<DenseMatrix> {
    let m = spec.m;
    if m == 0 || m > d {
        return Err(Error::Config(format!("sketch width m={m} must be in [1, d={d}]")));
    }
    let mut rng = stream(spec.global_seed, SERVER_ID, round, StreamTag::Sketch);
    Ok(match spec.kind {
        SketchKind::Gaussian => {
            let scale = 1.0 / (m as f64).sqrt();
            // column-major fill
            DenseMatrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
        }
        SketchKind::Coordinate => {
            let picks = index::sample(&mut rng, d, m);
            let mut s = DenseMatrix::zeros(d, m);
            for (j, i) in picks.iter().enumerate() {
                s[(i, j)] = 1.0;
            }
            s
        }
    })
}

/// Worker-to-server payload of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkMessage {
    /// `c = Q(g - h)`
    pub grad: CompressedVector,
    /// `C = 𝒞(Y - B S)`
    pub hess: CompressedMatrix,
    /// `M = S^T Y`, sent uncompressed.
    pub curvature: DenseMatrix,
    pub bits: u64,
}

impl UplinkMessage {
    pub fn new(grad: CompressedVector, hess: CompressedMatrix, curvature: DenseMatrix) -> Result<Self> {
        let d = grad.value.len();
        let m = curvature.nrows();
        if !curvature.is_square() || hess.value.shape() != (d, m) {
            return Err(dim_err(format!(
                "uplink shapes: c {d}, C {:?}, M {:?}",
                hess.value.shape(),
                curvature.shape()
            )));
        }
        let bits = grad.bits + hess.bits + WIRE_FLOAT_BITS * (m * m) as u64;
        Ok(Self {
            grad,
            hess,
            curvature,
            bits,
        })
    }
}

/// Server-to-worker payload: the iterate and `B^i S_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkMessage {
    pub w: DenseVector,
    pub bs: DenseMatrix,
    pub bits: u64,
}

impl DownlinkMessage {
    pub fn new(w: DenseVector, bs: DenseMatrix) -> Self {
        let bits = downlink_bits(w.len(), bs.ncols());
        Self { w, bs, bits }
    }
}

/// Exact per-node uplink bits of one round under the fixed-width bit model.
pub fn uplink_bits(d: usize, m: usize, grad_spec: &CompressorSpec, hess_spec: &CompressorSpec) -> Result<u64> {
    if m == 0 {
        return Err(Error::Config("memory size m must be at least 1".into()));
    }
    grad_spec.validate()?;
    hess_spec.validate()?;
    Ok(grad_spec.vector_bits(d) + m as u64 * hess_spec.vector_bits(d) + WIRE_FLOAT_BITS * (m * m) as u64)
}

/// `32 d + 32 d m`
pub fn downlink_bits(d: usize, m: usize) -> u64 {
    WIRE_FLOAT_BITS * (d + d * m) as u64
}
