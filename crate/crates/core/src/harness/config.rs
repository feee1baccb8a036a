use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compress::{CompressorSpec, NormOrder};
use crate::dataio::PartitionMode;
use crate::error::{Error, Result};
use crate::linalg::TruncationBand;
use crate::objective::BatchSpec;
use crate::protocol::{SketchKind, SketchSpec};
use crate::server::{DirectionKind, HessianUpdate, Lsr1Middle, ServerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Dense Gaussian rows, `synthetic_dim` features.
    #[default]
    Gaussian,
    /// 14 one-hot fields over 123 binary features.
    Onehot123,
}

/// Everything a run needs. Stored as flat `key = value` text (TOML); every
/// key is optional and falls back to the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// LIBSVM file; when absent a synthetic dataset is generated.
    pub data_path: Option<PathBuf>,
    /// Force the feature dimension (must be >= the largest index seen).
    pub dim: Option<usize>,
    pub synthetic: SyntheticKind,
    pub synthetic_rows: usize,
    pub synthetic_dim: usize,

    pub n_workers: usize,
    pub partition: PartitionMode,

    /// Sketch width `m`.
    pub memory: usize,
    pub sketch: SketchKind,
    pub grad_compressor: CompressorSpec,
    pub hess_compressor: CompressorSpec,

    pub hessian_update: HessianUpdate,
    pub lsr1_middle: Lsr1Middle,
    pub direction: DirectionKind,

    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Scale on the complement of the sketch range; defaults to `1 / omega_trunc_max`.
    pub rho: Option<f64>,
    pub omega_trunc: f64,
    pub omega_trunc_max: f64,
    pub reg_mu: f64,
    pub batch: BatchSpec,

    pub rounds: usize,
    pub global_seed: u64,
    /// Fan worker rounds and Hessian updates out over threads.
    pub parallel: bool,
    /// Fill the `ms` column with wall-clock time; off keeps traces byte-stable.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dither = CompressorSpec::dithering(64, NormOrder::Inf).expect("valid default");
        Self {
            data_path: None,
            dim: None,
            synthetic: SyntheticKind::Gaussian,
            synthetic_rows: 2000,
            synthetic_dim: 50,
            n_workers: 4,
            partition: PartitionMode::Contiguous,
            memory: 1,
            sketch: SketchKind::Gaussian,
            grad_compressor: dither,
            hess_compressor: dither,
            hessian_update: HessianUpdate::Lsr1,
            lsr1_middle: Lsr1Middle::SecantResidual,
            direction: DirectionKind::Fedsonia,
            alpha: 1.0,
            gamma: 1.0,
            beta: 1.0,
            rho: None,
            omega_trunc: 1e-5,
            omega_trunc_max: 1e8,
            reg_mu: 1e-3,
            batch: BatchSpec::Full,
            rounds: 100,
            global_seed: 0,
            parallel: false,
            timing: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = text.parse()?;
        // relative data paths resolve against the config file
        if let (Some(data), Some(dir)) = (&cfg.data_path, path.parent()) {
            if data.is_relative() && !data.exists() {
                cfg.data_path = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or(1.0 / self.omega_trunc_max)
    }

    pub fn band(&self) -> Result<TruncationBand> {
        TruncationBand::new(self.omega_trunc, self.omega_trunc_max)
    }

    pub fn sketch_spec(&self) -> SketchSpec {
        SketchSpec {
            kind: self.sketch,
            m: self.memory,
            global_seed: self.global_seed,
        }
    }

    pub fn server_config(&self) -> Result<ServerConfig> {
        let cfg = ServerConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            beta: self.beta,
            rho: self.rho(),
            band: self.band()?,
            hessian_update: self.hessian_update,
            lsr1_middle: self.lsr1_middle,
            direction: self.direction,
            sketch: self.sketch_spec(),
            parallel: self.parallel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        self.server_config()?;
        self.grad_compressor.validate()?;
        self.hess_compressor.validate()?;
        if self.n_workers == 0 {
            return Err(Error::Config("n_workers must be at least 1".into()));
        }
        if !(self.reg_mu >= 0.0) {
            return Err(Error::Config(format!("reg_mu must be >= 0, got {}", self.reg_mu)));
        }
        if self.data_path.is_none() {
            if self.synthetic_rows == 0 {
                return Err(Error::Config("synthetic_rows must be positive".into()));
            }
            if self.synthetic == SyntheticKind::Gaussian && self.synthetic_dim == 0 {
                return Err(Error::Config("synthetic_dim must be positive".into()));
            }
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Named algorithm variants run side by side by `compare`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// The configuration as given (compressed gradients).
    Cgd,
    /// Same, with uncompressed gradients.
    Flecs,
    /// No compression anywhere.
    Plain,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Cgd => "cgd",
            Variant::Flecs => "flecs",
            Variant::Plain => "plain",
        }
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        match self {
            Variant::Cgd => {}
            Variant::Flecs => out.grad_compressor = CompressorSpec::identity(),
            Variant::Plain => {
                out.grad_compressor = CompressorSpec::identity();
                out.hess_compressor = CompressorSpec::identity();
            }
        }
        out
    }

    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse())
            .collect()
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cgd" => Ok(Variant::Cgd),
            "flecs" => Ok(Variant::Flecs),
            "plain" => Ok(Variant::Plain),
            other => Err(Error::Config(format!("unknown variant {other:?} (cgd, flecs, plain)"))),
        }
    }
}
