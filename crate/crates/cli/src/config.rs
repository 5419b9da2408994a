//! TOML experiment files.
//!
//! ```toml
//! [problem]
//! kind = "quadratic"   # quadratic | logistic | mlp
//! n = 16
//! d = 20
//! spread = 1.0
//! noise = 0.5
//! seed = 3             # optional: problem data seed, defaults to fl.seed
//!
//! [fl]
//! m = 16               # defaults to n
//! T = 200
//! K = 5
//! eta = 1.0
//! eta_l = 0.1
//! batch = "full"       # or a size; defaults: full for quadratics, 32 otherwise
//! optimizer = "sgd"    # sgd | ams
//! seed = 0
//!
//! [compression]
//! upload = "topk:0.1"  # identity | topk:K | sign | heavysign:K | stoc:B
//! download = "sign"    # optional; enables the compressed broadcast
//! ef = true
//! restart_S = 10       # optional
//! restart_start = 50
//!
//! [output]
//! dir = "out"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use fedef_core::compressors::CompressorSpec;
use fedef_core::federation_engine::{RestartPolicy, RunConfig};
use fedef_core::local_trainer::Hyperparams;
use fedef_core::problems::ProblemSpec;
use fedef_core::server::GlobalOptimizer;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::CliError;

/// Mini-batch size used for data problems when `fl.batch` is absent.
pub const DEFAULT_DATA_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub fl: FlSection,
    #[serde(default)]
    pub compression: CompressionSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// The problem description plus an optional data seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSection {
    pub spec: ProblemSpec,
    pub seed: Option<u64>,
}

impl<'de> Deserialize<'de> for ProblemSection {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let mut table = toml::Table::deserialize(deserializer)?;
        let seed = match table.remove("seed") {
            None => None,
            Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(other) => {
                return Err(D::Error::custom(format!(
                    "seed: expected a nonnegative integer, got {other}"
                )))
            }
        };
        let spec = ProblemSpec::deserialize(table).map_err(D::Error::custom)?;
        Ok(Self { spec, seed })
    }
}

impl Serialize for ProblemSection {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut table = toml::Table::try_from(&self.spec).map_err(serde::ser::Error::custom)?;
        if let Some(seed) = self.seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        table.serialize(serializer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSetting {
    Size(usize),
    Named(FullBatch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullBatch {
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "K", default = "defaults::local_steps")]
    pub local_steps: usize,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default = "defaults::eta_l")]
    pub eta_l: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchSetting>,
    #[serde(default)]
    pub optimizer: GlobalOptimizer,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::one")]
    pub metrics_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSection {
    #[serde(default = "defaults::upload")]
    pub upload: CompressorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub download: Option<CompressorSpec>,
    #[serde(default = "defaults::yes")]
    pub ef: bool,
    #[serde(rename = "restart_S", default, skip_serializing_if = "Option::is_none")]
    pub restart_threshold: Option<usize>,
    #[serde(default = "defaults::one")]
    pub restart_start: usize,
}

impl Default for CompressionSection {
    fn default() -> Self {
        Self {
            upload: defaults::upload(),
            download: None,
            ef: true,
            restart_threshold: None,
            restart_start: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "defaults::dir")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: defaults::dir() }
    }
}

mod defaults {
    use super::*;

    pub fn local_steps() -> usize {
        1
    }
    pub fn eta() -> f64 {
        Hyperparams::default().eta
    }
    pub fn eta_l() -> f64 {
        Hyperparams::default().eta_l
    }
    pub fn beta1() -> f64 {
        Hyperparams::default().beta1
    }
    pub fn beta2() -> f64 {
        Hyperparams::default().beta2
    }
    pub fn epsilon() -> f64 {
        Hyperparams::default().epsilon
    }
    pub fn one() -> usize {
        1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn upload() -> CompressorSpec {
        CompressorSpec::Identity
    }
    pub fn dir() -> PathBuf {
        PathBuf::from("out")
    }
}

impl ExperimentConfig {
    /// Parses TOML text; errors name the offending key.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Parse {
            field: "<document>".into(),
            message: e.message().to_string(),
        })?;
        serde_path_to_error::deserialize(table).map_err(|e| {
            let field = e.path().to_string();
            CliError::Parse {
                field,
                message: e.into_inner().message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    /// The engine configuration, validated.
    pub fn to_run_config(&self) -> Result<RunConfig, CliError> {
        let fl = &self.fl;
        let c = &self.compression;
        let spec = self.problem.spec.clone();
        let batch_size = match fl.batch {
            Some(BatchSetting::Size(b)) => Some(b),
            Some(BatchSetting::Named(FullBatch::Full)) => None,
            None if spec.has_data() => Some(DEFAULT_DATA_BATCH),
            None => None,
        };
        let hp = Hyperparams {
            eta: fl.eta,
            eta_l: fl.eta_l,
            local_steps: fl.local_steps,
            beta1: fl.beta1,
            beta2: fl.beta2,
            epsilon: fl.epsilon,
            batch_size,
        };
        let config = RunConfig {
            participants: fl.m.unwrap_or_else(|| spec.num_clients()),
            problem: spec,
            problem_seed: self.problem.seed,
            rounds: fl.rounds,
            hp,
            optimizer: fl.optimizer,
            upload: c.upload,
            download: c.download,
            ef: c.ef,
            restart: c.restart_threshold.map(|threshold| RestartPolicy {
                threshold,
                start_round: c.restart_start,
            }),
            master_seed: fl.seed,
            metrics_every: fl.metrics_every,
        };
        config.validate()?;
        Ok(config)
    }
}
