//! Experiment configuration.
//!
//! A config file is TOML with dotted section keys (`landscape.resolution = 41`
//! or a `[landscape]` table). It is deep-merged over the defaults of the
//! chosen experiment, then `--set key=value` overrides are applied on top.
//! The fully resolved config is what gets hashed and echoed to the output
//! directory.

use std::fmt;
use std::path::{Path, PathBuf};

use pugd_core::landscape::Normalization;
use pugd_core::{Activation, LossKind, OptimizerConfig, OptimizerKind, ScheduleKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TrainHistory,
    Landscape3d,
    Trajectory2d,
    SharedLandscapeRace,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TrainHistory => "train_history",
            ExperimentKind::Landscape3d => "landscape_3d",
            ExperimentKind::Trajectory2d => "trajectory_2d",
            ExperimentKind::SharedLandscapeRace => "shared_landscape_race",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Random,
    Pca,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Step,
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub sam_rho: f64,
    pub asam_rho: f64,
    pub adagrad_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Falls back to `$PUGD_DATA_DIR`, then `data/mnist`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub train_subset: usize,
    pub test_subset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub lr_min: f64,
    pub granularity: Granularity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub resolution: usize,
    pub direction_mode: DirectionMode,
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction_seed: Option<u64>,
    pub start_alpha: f64,
    pub start_beta: f64,
    pub clip: f64,
    /// Radius of the `(alpha, beta)` ring used for the endpoint flatness proxy.
    pub flatness_radius: f64,
    /// Directory of a finished `history` run to take the anchor and
    /// snapshots from; when absent the run is trained in-process.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_run: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// Steps for non-perturbed optimizers; perturbed ones run half as many.
    pub iterations: u64,
    pub batch_size: usize,
    pub sample_stride: u64,
    pub output_dir: PathBuf,
    pub loss: LossKind,
    pub optimizers: Vec<OptimizerKind>,
    pub optimizer: OptimizerSection,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub landscape: LandscapeSection,
}

pub const DATA_DIR_ENV: &str = "PUGD_DATA_DIR";

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let race = kind == ExperimentKind::SharedLandscapeRace;
        let base = OptimizerConfig::new(OptimizerKind::Sgd);
        Self {
            experiment: kind,
            seed: 0,
            iterations: if race { 10_000 } else { 200 },
            batch_size: 100,
            sample_stride: if race { 100 } else { 10 },
            output_dir: PathBuf::from("out").join(kind.name()),
            loss: if race { LossKind::Mse } else { LossKind::CrossEntropy },
            optimizers: match kind {
                ExperimentKind::SharedLandscapeRace | ExperimentKind::TrainHistory => OptimizerKind::ALL.to_vec(),
                _ => vec![OptimizerKind::Pugd],
            },
            optimizer: OptimizerSection {
                lr_max: base.lr_max,
                weight_decay: base.weight_decay,
                momentum: base.momentum,
                nesterov: base.nesterov,
                sam_rho: OptimizerConfig::DEFAULT_SAM_RHO,
                asam_rho: OptimizerConfig::DEFAULT_ASAM_RHO,
                adagrad_eps: base.eps,
            },
            model: ModelSection {
                layer_dims: vec![784, 16, 10],
                activation: Activation::Tanh,
            },
            dataset: DatasetSection {
                root: None,
                train_subset: if race { 100 } else { 1000 },
                test_subset: if race { 100 } else { 1000 },
            },
            schedule: ScheduleSection {
                kind: ScheduleKind::CosineAnnealing,
                lr_min: 0.0,
                granularity: Granularity::Step,
            },
            landscape: LandscapeSection {
                alpha_min: if race { -20.0 } else { -1.0 },
                alpha_max: if race { 20.0 } else { 1.0 },
                beta_min: if race { -20.0 } else { -1.0 },
                beta_max: if race { 20.0 } else { 1.0 },
                resolution: if race { 41 } else { 21 },
                direction_mode: DirectionMode::Random,
                normalization: Normalization::FilterNorm,
                anchor_seed: None,
                direction_seed: None,
                start_alpha: if race { -10.1 } else { 0.0 },
                start_beta: if race { -15.0 } else { 0.0 },
                clip: pugd_core::landscape::DEFAULT_CLIP,
                flatness_radius: 0.5,
                anchor_run: None,
            },
        }
    }

    /// Resolves defaults, an optional config file and `key=value` overrides.
    pub fn load(kind: ExperimentKind, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = to_table(&Self::defaults(kind))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
            let user: Table = text
                .parse()
                .map_err(|e| LabError::config(format!("{}: {e}", path.display())))?;
            if let Some(v) = user.get("experiment") {
                if v.as_str() != Some(kind.name()) {
                    return Err(LabError::config(format!(
                        "config file is for experiment {v}, not {kind}"
                    )));
                }
            }
            deep_merge(&mut table, user);
        }
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 || self.batch_size > self.dataset.train_subset {
            return bad(format!(
                "batch_size must lie in 1..={} (the train subset), got {}",
                self.dataset.train_subset, self.batch_size
            ));
        }
        if self.dataset.test_subset == 0 {
            return bad("dataset.test_subset must be >= 1".into());
        }
        if self.sample_stride == 0 {
            return bad("sample_stride must be >= 1".into());
        }
        if self.optimizers.is_empty() {
            return bad("at least one optimizer is required".into());
        }
        for (i, k) in self.optimizers.iter().enumerate() {
            if self.optimizers[..i].contains(k) {
                return bad(format!("optimizer {k} listed twice"));
            }
            self.optimizer_config(*k).validate()?;
        }
        if !(0.0 <= self.schedule.lr_min && self.schedule.lr_min <= self.optimizer.lr_max) {
            return bad("schedule.lr_min must lie in [0, optimizer.lr_max]".into());
        }
        let l = &self.landscape;
        if l.resolution == 0 || !(l.alpha_min <= l.alpha_max) || !(l.beta_min <= l.beta_max) {
            return bad("landscape axes need resolution >= 1 and min <= max".into());
        }
        if !(l.clip > 0.0) || !(l.flatness_radius > 0.0) {
            return bad("landscape.clip and landscape.flatness_radius must be positive".into());
        }
        if self.model.layer_dims.len() < 2 || self.model.layer_dims.contains(&0) {
            return bad(format!("model.layer_dims invalid: {:?}", self.model.layer_dims));
        }
        Ok(())
    }

    pub fn optimizer_config(&self, kind: OptimizerKind) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            kind,
            lr_max: o.lr_max,
            weight_decay: o.weight_decay,
            momentum: o.momentum,
            nesterov: o.nesterov,
            rho: if kind == OptimizerKind::Asam { o.asam_rho } else { o.sam_rho },
            eps: o.adagrad_eps,
        }
    }

    pub fn iterations_for(&self, kind: OptimizerKind) -> u64 {
        if kind.is_perturbed() {
            (self.iterations / 2).max(1)
        } else {
            self.iterations
        }
    }

    pub fn data_root(&self) -> PathBuf {
        self.dataset
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    pub fn anchor_seed(&self) -> u64 {
        self.landscape
            .anchor_seed
            .unwrap_or_else(|| derive_seed(self.seed, "anchor"))
    }

    pub fn direction_seed(&self) -> u64 {
        self.landscape
            .direction_seed
            .unwrap_or_else(|| derive_seed(self.seed, "directions"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Independent per-purpose seed derived from the master seed, so streams for
/// init, batching and directions never share state.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn to_table(cfg: &ExperimentConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| LabError::config(e.to_string()))
}

fn deep_merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| LabError::config("empty key"))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(LabError::config(format!("{key}: {p} is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| LabError::config(format!("override {raw:?} is not key=value")))
}
