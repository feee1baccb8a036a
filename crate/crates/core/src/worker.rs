//! Worker side of a round: local oracles, compression and the
//! error-feedback memory update.

use rand::Rng;

use crate::compress::{compress_matrix, compress_vector, CompressedVector, CompressorSpec};
use crate::error::{dim_err, Result};
use crate::linalg::{ensure_finite_matrix, ensure_finite_vector, DenseMatrix, DenseVector};
use crate::objective::{BatchSpec, Shard};
use crate::protocol::{stream, StreamTag, UplinkMessage};

/// Per-round knobs shared by every worker.
#[derive(Debug, Clone, Copy)]
pub struct WorkerRoundParams {
    pub global_seed: u64,
    pub round: u64,
    pub gamma: f64,
    pub grad_spec: CompressorSpec,
    pub hess_spec: CompressorSpec,
    pub batch: BatchSpec,
}

#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: usize,
    /// Error-feedback gradient memory `h^i_k`.
    pub h: DenseVector,
    pub shard: Shard,
}

/// `c = Q(g - h)`, `h' = h + gamma * c`.
pub fn error_feedback_step<R: Rng + ?Sized>(
    h: &DenseVector,
    g: &DenseVector,
    gamma: f64,
    spec: &CompressorSpec,
    rng: &mut R,
) -> Result<(CompressedVector, DenseVector)> {
    let c = compress_vector(&(g - h), spec, rng)?;
    let next = apply_feedback(h, &c.value, gamma);
    Ok((c, next))
}

/// `h + gamma * c`. The server mirrors workers through this same function so
/// both copies of `h` stay bit-identical.
pub fn apply_feedback(h: &DenseVector, c: &DenseVector, gamma: f64) -> DenseVector {
    h + c * gamma
}

impl WorkerState {
    /// Starts with `h_0 = 0`.
    pub fn new(id: usize, shard: Shard) -> Self {
        let d = shard.dim();
        Self {
            id,
            h: DenseVector::zeros(d),
            shard,
        }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    /// Runs one round given the broadcast iterate `w`, the product `B^i S`
    /// and the shared sketch `S`. Mutates `h` and returns the uplink.
    pub fn round(
        &mut self,
        w: &DenseVector,
        bs: &DenseMatrix,
        sketch: &DenseMatrix,
        params: &WorkerRoundParams,
    ) -> Result<UplinkMessage> {
        let d = self.dim();
        if w.len() != d || sketch.nrows() != d || bs.shape() != sketch.shape() {
            return Err(dim_err(format!(
                "worker {}: w {}, BS {:?}, S {:?} for dim {d}",
                self.id,
                w.len(),
                bs.shape(),
                sketch.shape()
            )));
        }
        let id = self.id as u64;
        let rs = |tag| stream(params.global_seed, id, params.round, tag);

        let g = self.shard.gradient(w, params.batch, &mut rs(StreamTag::GradBatch))?;
        ensure_finite_vector(&g, "local gradient")?;
        let y = self
            .shard
            .hessian_sketch(w, sketch, params.batch, &mut rs(StreamTag::HessBatch))?;
        ensure_finite_matrix(&y, "local Hessian sketch")?;
        let curvature = sketch.tr_mul(&y);

        let (c, h_next) = error_feedback_step(
            &self.h,
            &g,
            params.gamma,
            &params.grad_spec,
            &mut rs(StreamTag::GradCompress),
        )?;
        let hess = compress_matrix(&(&y - bs), &params.hess_spec, &mut rs(StreamTag::HessCompress))?;
        self.h = h_next;
        UplinkMessage::new(c, hess, curvature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::NormOrder;
    use crate::objective::QuadraticShard;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quad(d: usize) -> Shard {
        let a = DenseMatrix::from_fn(d, d, |i, j| ((i * 5 + j * 3) % 7) as f64 / 7.0);
        let h = a.tr_mul(&a) + DenseMatrix::identity(d, d);
        let b = DenseVector::from_fn(d, |i, _| i as f64 - 1.0);
        Shard::Quadratic(QuadraticShard::new(h, b).unwrap())
    }

    fn params(grad: CompressorSpec, hess: CompressorSpec, gamma: f64) -> WorkerRoundParams {
        WorkerRoundParams {
            global_seed: 7,
            round: 0,
            gamma,
            grad_spec: grad,
            hess_spec: hess,
            batch: BatchSpec::Full,
        }
    }

    #[test]
    fn identity_memory_tracks_gradient() {
        let mut wk = WorkerState::new(0, quad(4));
        wk.h = DenseVector::from_element(4, 0.3);
        let w = DenseVector::from_row_slice(&[1.0, -1.0, 0.5, 2.0]);
        let s = DenseMatrix::from_fn(4, 2, |i, j| (i + j) as f64);
        let bs = DenseMatrix::zeros(4, 2);
        let id = CompressorSpec::identity();
        let msg = wk.round(&w, &bs, &s, &params(id, id, 1.0)).unwrap();
        let g = wk.shard.full_gradient(&w).unwrap();
        assert!((&wk.h - &g).norm() < 1e-14);

        let Shard::Quadratic(q) = &wk.shard else { unreachable!() };
        let hs = q.hessian() * &s;
        assert_eq!(msg.hess.value, hs);
        assert_eq!(msg.curvature, s.tr_mul(&hs));
        assert_eq!(msg.bits, 32 * 4 + 2 * 32 * 4 + 32 * 4);
    }

    #[test]
    fn exact_memory_sends_zero() {
        let mut wk = WorkerState::new(1, quad(3));
        let w = DenseVector::from_row_slice(&[0.2, 0.1, -0.4]);
        wk.h = wk.shard.full_gradient(&w).unwrap();
        let before = wk.h.clone();
        let s = DenseMatrix::from_fn(3, 1, |i, _| i as f64);
        let dq = CompressorSpec::dithering(8, NormOrder::Inf).unwrap();
        let msg = wk.round(&w, &DenseMatrix::zeros(3, 1), &s, &params(dq, dq, 0.5)).unwrap();
        assert_eq!(msg.grad.value, DenseVector::zeros(3));
        assert_eq!(wk.h, before);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let mut wk = WorkerState::new(0, quad(3));
        let id = CompressorSpec::identity();
        let r = wk.round(
            &DenseVector::zeros(3),
            &DenseMatrix::zeros(3, 2),
            &DenseMatrix::zeros(3, 1),
            &params(id, id, 1.0),
        );
        assert!(matches!(r, Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn error_feedback_identity_step() {
        let h = DenseVector::from_row_slice(&[1.0, 2.0]);
        let g = DenseVector::from_row_slice(&[0.5, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, next) = error_feedback_step(&h, &g, 0.25, &CompressorSpec::identity(), &mut rng).unwrap();
        assert_eq!(c.value, &g - &h);
        assert!((next - (&h * 0.75 + &g * 0.25)).norm() < 1e-15);
    }
}
