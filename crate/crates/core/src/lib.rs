//! Compressed second-order federated optimization.
//!
//! Workers hold shards of a regularized logistic-regression (or quadratic)
//! problem. Each round they send a compressed gradient difference, a
//! compressed Hessian-sketch residual and a small `m x m` curvature matrix.
//! The server keeps per-worker Hessian approximations, builds a truncated
//! quasi-Newton direction and broadcasts the next iterate. Every message is
//! bit-counted exactly.
//!
//! Module map:
//! - [`linalg`]: dense kernels and spectrum truncation
//! - [`compress`]: unbiased random-dithering compressors and bit costs
//! - [`objective`]: value / gradient / Hessian-sketch oracles
//! - [`dataio`]: LIBSVM ingestion and sharding
//! - [`protocol`]: messages, shared-seed sketches, bit formulas, RNG streams
//! - [`worker`] / [`server`]: the two halves of one round
//! - [`harness`]: configuration, driver, CSV traces
//! - [`oracles`]: independent checks used by tests and `selftest`

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compress;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod objective;
pub mod oracles;
pub mod protocol;
pub mod server;
pub mod worker;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, DenseVector};
