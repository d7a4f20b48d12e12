//! JSON run configuration: one optional section per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use linkgnn::baselines::GaConfig;
use linkgnn::harness::{ComparisonConfig, SweepSpec};
use linkgnn::lognn::{DEFAULT_HIDDEN, DEFAULT_LAYERS};
use linkgnn::trainer::TrainConfig;
use linkgnn::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lognn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    /// Message-passing layers for LOGNN; ignored by the MLP.
    pub n_layers: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Lognn,
            hidden_dim: DEFAULT_HIDDEN,
            n_layers: DEFAULT_LAYERS,
            seed: 0,
        }
    }
}

/// Model files a sweep loads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactPaths {
    pub lognn: Option<PathBuf>,
    pub mlp_di: Option<PathBuf>,
    /// Keyed `"NxM"`, e.g. `"20x10"`.
    pub mlp_tr: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub model: Option<PathBuf>,
    /// Dataset directory; the held-out set of the train section otherwise.
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub n_users: usize,
    pub n_servers: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Corrupts the backward rule of this op, as a negative control.
    pub fault: Option<linkgnn::autodiff::OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 5,
            n_users: 4,
            n_servers: 2,
            seed: 0,
            hidden_dim: DEFAULT_HIDDEN,
            n_layers: DEFAULT_LAYERS,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Training settings; `gen-data` uses its sample count, sizes and seed.
    pub train: TrainConfig,
    pub model: ModelSpec,
    /// Dataset directory written by `gen-data`.
    pub dataset: Option<PathBuf>,
    /// Required by supervised training; used by sweeps when present.
    pub ga: Option<GaConfig>,
    pub sweep: SweepSpec,
    pub artifacts: ArtifactPaths,
    pub bench: ComparisonConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// Applies `--seed` to every section that carries a seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.model.seed = seed;
        if let Some(ga) = &mut self.ga {
            ga.seed = seed;
        }
        self.sweep.seed = seed;
        self.bench.train.seed = seed;
        self.bench.model_seed = seed;
        self.bench.ga.seed = seed;
        self.gradcheck.seed = seed;
    }
}

/// Parses an `"NxM"` key.
pub fn parse_size(key: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("size key {key:?} is not of the form NxM"));
    let (n, m) = key.split_once('x').ok_or_else(bad)?;
    Ok((
        n.trim().parse().map_err(|_| bad())?,
        m.trim().parse().map_err(|_| bad())?,
    ))
}
