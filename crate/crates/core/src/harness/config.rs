use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SamplerMode;
use crate::encoder::{Backend, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind, PlacementConfig};
use crate::metrics::{TieBreak, DEFAULT_R_FRACTION};
use crate::probe::ProbeConfig;
use crate::theory::{CollapseThresholds, DEFAULT_EPS_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub rho: f64,
    pub m: usize,
    pub separation: f64,
    pub spread: f64,
    /// Augmentation noise; `None` resolves to `0.1 · spread`.
    pub sigma_aug: Option<f64>,
    /// Fraction of minority samples held out as the probe test split (free table).
    pub split_fraction: f64,
    /// Balanced test-set size for encoders that can embed unseen inputs.
    pub test_n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            rho: 0.01,
            m: 16,
            separation: 6.0,
            spread: 1.0,
            sigma_aug: None,
            split_fraction: 0.5,
            test_n: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    FreeTable,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    NearCollapsed,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: BackendKind,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub init: InitMode,
    pub eta: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::FreeTable,
            dim: 32,
            hidden: vec![64, 64],
            init: InitMode::NearCollapsed,
            eta: DEFAULT_ETA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Step on the loss averaged over anchors.
    #[default]
    Mean,
    /// Step on the summed loss.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warm-up from `lr/10` over `warmup_epochs`, then cosine decay to 0.
    Cosine { warmup_epochs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: SamplerMode,
    pub reduction: Reduction,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.0625,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 200,
            batch_size: 256,
            sampler: SamplerMode::Uniform,
            reduction: Reduction::Mean,
            schedule: Schedule::Constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PrototypeConfig {
    pub placement: PlacementConfig,
    /// Re-place prototypes every this many epochs; `None` places them once.
    pub refresh_every: Option<usize>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub r_fraction: f64,
    pub tie_break: TieBreak,
    pub probe: ProbeConfig,
    pub probe_fraction: f64,
    pub collapse: CollapseThresholds,
    pub eps_max: f64,
    /// Evaluate the gradient bound on the first batch at initialization.
    pub verify_bound: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r_fraction: DEFAULT_R_FRACTION,
            tie_break: TieBreak::Index,
            probe: ProbeConfig::default(),
            probe_fraction: 1.0,
            collapse: CollapseThresholds::default(),
            eps_max: DEFAULT_EPS_MAX,
            verify_bound: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub batch: u64,
    pub augment: u64,
    pub probe: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed,
            batch: seed,
            augment: seed,
            probe: seed,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::all(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub prototypes: PrototypeConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
}


impl RunConfig {
    pub fn with_loss(mut self, kind: LossKind) -> Self {
        self.loss.kind = kind;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::all(seed);
        self
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Copy with every optional default filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if c.data.sigma_aug.is_none() {
            c.data.sigma_aug = Some(0.1 * c.data.spread);
        }
        c
    }

    pub fn sigma_aug(&self) -> f64 {
        self.data.sigma_aug.unwrap_or(0.1 * self.data.spread)
    }

    pub fn backend(&self) -> Backend {
        match self.encoder.backend {
            BackendKind::FreeTable => Backend::FreeTable {
                views: 2 * self.data.n,
                dim: self.encoder.dim,
            },
            BackendKind::Mlp => Backend::Mlp {
                input: self.data.m,
                hidden: self.encoder.hidden.clone(),
                output: self.encoder.dim,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let d = &self.data;
        if d.n < 4 {
            return Err(Error::config("data.n must be >= 4"));
        }
        if !(d.rho > 0.0 && d.rho <= 0.5) {
            return Err(Error::config(format!("data.rho must lie in (0, 0.5], got {}", d.rho)));
        }
        if d.m == 0 || !(d.spread > 0.0) || !(d.separation >= 0.0) {
            return Err(Error::config("data.m, data.spread and data.separation must be positive"));
        }
        if !(d.split_fraction > 0.0 && d.split_fraction < 1.0) {
            return Err(Error::config("data.split_fraction must lie in (0, 1)"));
        }
        if self.sigma_aug() < 0.0 {
            return Err(Error::config("data.sigma_aug must be >= 0"));
        }
        if self.encoder.dim < 2 {
            return Err(Error::config("encoder.dim must be >= 2"));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(Error::config("optim: need lr > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        if o.batch_size < 2 || o.batch_size > d.n {
            return Err(Error::config(format!(
                "optim.batch_size must lie in [2, n = {}], got {}",
                d.n, o.batch_size
            )));
        }
        if !(self.eval.r_fraction > 0.0 && self.eval.r_fraction < 1.0) {
            return Err(Error::config("eval.r_fraction must lie in (0, 1)"));
        }
        if !(self.eval.probe_fraction > 0.0 && self.eval.probe_fraction <= 1.0) {
            return Err(Error::config("eval.probe_fraction must lie in (0, 1]"));
        }
        if self.prototypes.refresh_every == Some(0) {
            return Err(Error::config("prototypes.refresh_every must be >= 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of the resolved config.
    pub fn run_id(&self) -> String {
        let body = serde_json::to_vec(&self.resolved()).expect("config serializes");
        hex::encode(Sha256::digest(&body))
    }
}
