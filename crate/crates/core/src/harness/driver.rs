use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{RunConfig, SyntheticKind, Variant};
use super::trace::TraceRow;
use crate::compress::CompressorSpec;
use crate::dataio::{self, PartitionSpec};
use crate::error::{Error, Result};
use crate::linalg::DenseVector;
use crate::objective::{BatchSpec, Shard};
use crate::protocol::{
    downlink_bits, sample_sketch, stream_seed, uplink_bits, DownlinkMessage, StreamTag, UplinkMessage,
    WIRE_FLOAT_BITS,
};
use crate::server::ServerState;
use crate::worker::{WorkerRoundParams, WorkerState};

/// Loads (or synthesizes) the dataset and splits it into worker shards.
pub fn load_shards(cfg: &RunConfig) -> Result<Vec<Shard>> {
    cfg.validate()?;
    let ds = match &cfg.data_path {
        Some(path) => dataio::load_libsvm(path)?,
        None => {
            let seed = stream_seed(cfg.global_seed, 0, 0, StreamTag::Synthetic);
            match cfg.synthetic {
                SyntheticKind::Gaussian => dataio::synthetic_gaussian(cfg.synthetic_rows, cfg.synthetic_dim, seed),
                SyntheticKind::Onehot123 => {
                    dataio::synthetic_onehot(cfg.synthetic_rows, &dataio::ONEHOT_123_GROUPS, seed)
                }
            }
        }
    };
    let ds = match cfg.dim {
        Some(d) => ds.with_dim(d)?,
        None => ds,
    };
    if ds.n_rows() == 0 || ds.dim == 0 {
        return Err(Error::Data("dataset has no rows or no features".into()));
    }
    if cfg.n_workers > ds.n_rows() {
        return Err(Error::Data(format!(
            "{} workers but only {} rows",
            cfg.n_workers,
            ds.n_rows()
        )));
    }
    let spec = PartitionSpec {
        n_workers: cfg.n_workers,
        mode: cfg.partition,
        seed: stream_seed(cfg.global_seed, 0, 0, StreamTag::Partition),
    };
    Ok(dataio::partition(&ds, &spec, cfg.reg_mu)?
        .into_iter()
        .map(Shard::Logistic)
        .collect())
}

/// All mutable state of a run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub workers: Vec<WorkerState>,
    pub server: ServerState,
    cfg: RunConfig,
    pending: Vec<DownlinkMessage>,
    round: u64,
    uplink_total: u64,
    downlink_total: u64,
}

impl Simulation {
    /// `w_0 = 0`, `B_0 = 0`, `h_0 = 0`.
    pub fn new(cfg: &RunConfig, shards: Vec<Shard>) -> Result<Self> {
        cfg.validate()?;
        let d = shards
            .first()
            .map(Shard::dim)
            .ok_or_else(|| Error::Config("no shards".into()))?;
        if shards.iter().any(|s| s.dim() != d) {
            return Err(Error::Data("shards disagree on dimension".into()));
        }
        if let BatchSpec::Minibatch(b) = cfg.batch {
            let smallest = shards
                .iter()
                .filter_map(|s| match s {
                    Shard::Logistic(l) => Some(l.n_rows()),
                    Shard::Quadratic(_) => None,
                })
                .min();
            if smallest.is_some_and(|r| b > r) {
                return Err(Error::Config(format!(
                    "minibatch size {b} exceeds the smallest shard ({} rows)",
                    smallest.unwrap_or(0)
                )));
            }
        }
        if cfg.memory > d {
            return Err(Error::Config(format!("memory m={} exceeds d={d}", cfg.memory)));
        }
        let server = ServerState::new(DenseVector::zeros(d), shards.len(), cfg.server_config()?)?;
        let workers: Vec<WorkerState> = shards
            .into_iter()
            .enumerate()
            .map(|(i, s)| WorkerState::new(i, s))
            .collect();
        // the initial broadcast of (w_0, B_0 S_0) is not billed
        let pending = server.downlinks(0)?;
        Ok(Self {
            workers,
            server,
            cfg: cfg.clone(),
            pending,
            round: 0,
            uplink_total: 0,
            downlink_total: 0,
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn shards(&self) -> Vec<Shard> {
        self.workers.iter().map(|w| w.shard.clone()).collect()
    }

    /// Exact `F(w_k)` and `||∇F(w_k)||^2` over all shards.
    pub fn metrics(&self) -> Result<(f64, f64)> {
        let shards: Vec<&Shard> = self.workers.iter().map(|w| &w.shard).collect();
        let w = &self.server.w;
        let n = shards.len() as f64;
        let mut value = 0.0;
        let mut grad = DenseVector::zeros(w.len());
        for s in shards {
            value += s.value(w)?;
            grad += s.full_gradient(w)?;
        }
        Ok((value / n, (grad / n).norm_squared()))
    }

    pub fn row(&self, ms: u64) -> Result<TraceRow> {
        let (objective, grad_sq_norm) = self.metrics()?;
        let n = self.workers.len() as f64;
        Ok(TraceRow {
            k: self.round as usize,
            objective,
            grad_sq_norm,
            uplink_bits: self.uplink_total as f64 / n,
            downlink_bits: self.downlink_total as f64 / n,
            ms,
        })
    }

    /// One synchronous round; returns the uplinks that were sent.
    pub fn step(&mut self) -> Result<Vec<UplinkMessage>> {
        let k = self.round;
        let params = WorkerRoundParams {
            global_seed: self.cfg.global_seed,
            round: k,
            gamma: self.cfg.gamma,
            grad_spec: self.cfg.grad_compressor,
            hess_spec: self.cfg.hess_compressor,
            batch: self.cfg.batch,
        };
        let sketch_spec = self.cfg.sketch_spec();
        let d = self.server.dim();
        let work = |(wk, dl): (&mut WorkerState, &DownlinkMessage)| -> Result<UplinkMessage> {
            let s = sample_sketch(&sketch_spec, d, k)?;
            wk.round(&dl.w, &dl.bs, &s, &params)
        };
        let uplinks: Vec<UplinkMessage> = if self.cfg.parallel {
            self.workers
                .par_iter_mut()
                .zip(self.pending.par_iter())
                .map(work)
                .collect::<Result<_>>()?
        } else {
            self.workers
                .iter_mut()
                .zip(self.pending.iter())
                .map(work)
                .collect::<Result<_>>()?
        };
        self.uplink_total += uplinks.iter().map(|u| u.bits).sum::<u64>();

        let out = self.server.round(&uplinks, k)?;
        self.downlink_total += out.downlinks.iter().map(|m| m.bits).sum::<u64>();
        self.pending = out.downlinks;
        self.round += 1;
        Ok(uplinks)
    }
}

/// Runs `cfg.rounds` rounds on the given shards; row `k` holds the metrics of
/// `w_k` and the bits sent in rounds `0..k`.
pub fn run_with_shards(cfg: &RunConfig, shards: Vec<Shard>) -> Result<Vec<TraceRow>> {
    let start = Instant::now();
    let ms = |cfg: &RunConfig| if cfg.timing { start.elapsed().as_millis() as u64 } else { 0 };
    let mut sim = Simulation::new(cfg, shards)?;
    let mut rows = Vec::with_capacity(cfg.rounds + 1);
    rows.push(sim.row(ms(cfg))?);
    for _ in 0..cfg.rounds {
        sim.step()?;
        let row = sim.row(ms(cfg))?;
        if !row.objective.is_finite() || !row.grad_sq_norm.is_finite() {
            return Err(Error::Numeric(format!("metrics diverged at round {}", row.k)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn run(cfg: &RunConfig) -> Result<Vec<TraceRow>> {
    let shards = load_shards(cfg)?;
    run_with_shards(cfg, shards)
}

/// Runs each variant on the same data, partition and seed.
pub fn compare(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<(String, Vec<TraceRow>)>> {
    if variants.is_empty() {
        return Err(Error::Config("compare needs at least one variant".into()));
    }
    let shards = load_shards(cfg)?;
    variants
        .iter()
        .map(|v| Ok((v.name().to_string(), run_with_shards(&v.apply(cfg), shards.clone())?)))
        .collect()
}

/// Per-round, per-node bit budget of a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitsReport {
    pub d: usize,
    pub m: usize,
    pub grad_spec: CompressorSpec,
    pub hess_spec: CompressorSpec,
    pub grad_bits: u64,
    pub hess_bits: u64,
    pub curvature_bits: u64,
    pub uplink: u64,
    pub uplink_uncompressed_grad: u64,
    pub downlink: u64,
}

impl BitsReport {
    pub fn new(d: usize, m: usize, grad_spec: CompressorSpec, hess_spec: CompressorSpec) -> Result<Self> {
        let uplink = uplink_bits(d, m, &grad_spec, &hess_spec)?;
        Ok(Self {
            d,
            m,
            grad_spec,
            hess_spec,
            grad_bits: grad_spec.vector_bits(d),
            hess_bits: m as u64 * hess_spec.vector_bits(d),
            curvature_bits: WIRE_FLOAT_BITS * (m * m) as u64,
            uplink,
            uplink_uncompressed_grad: uplink_bits(d, m, &CompressorSpec::identity(), &hess_spec)?,
            downlink: downlink_bits(d, m),
        })
    }
}

impl fmt::Display for BitsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d = {}, m = {}", self.d, self.m)?;
        writeln!(f, "gradient ({}): {}", self.grad_spec, self.grad_bits)?;
        writeln!(f, "hessian sketch ({}): {}", self.hess_spec, self.hess_bits)?;
        writeln!(f, "curvature m x m: {}", self.curvature_bits)?;
        writeln!(f, "uplink_bits = {}", self.uplink)?;
        writeln!(f, "uplink_bits_uncompressed_gradient = {}", self.uplink_uncompressed_grad)?;
        writeln!(f, "downlink_bits = {}", self.downlink)
    }
}

/// Bit budget for a config; `d` comes from `dim`, the synthetic layout, or
/// the data file.
pub fn bits_report(cfg: &RunConfig) -> Result<BitsReport> {
    cfg.validate()?;
    let d = match (cfg.dim, &cfg.data_path, cfg.synthetic) {
        (Some(d), _, _) => d,
        (None, Some(path), _) => dataio::load_libsvm(path)?.dim,
        (None, None, SyntheticKind::Gaussian) => cfg.synthetic_dim,
        (None, None, SyntheticKind::Onehot123) => dataio::ONEHOT_123_GROUPS.iter().sum(),
    };
    BitsReport::new(d, cfg.memory, cfg.grad_compressor, cfg.hess_compressor)
}
