use std::path::{Path, PathBuf};

use gmrl_core::data::{DataFormat, NormMode, SplitSpec, SynthSpec};
use gmrl_core::model::ModelConfig;
use gmrl_core::trainer::{TrainConfig, Variant};
use gmrl_core::{GmrlError, Result};
use serde::{Deserialize, Serialize};

/// Prefix of environment overrides. `GMRL_TRAIN__LEARNING_RATE=1e-3` sets
/// `train.learning_rate`; `__` separates nesting levels.
pub const ENV_PREFIX: &str = "GMRL_";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub ablation: AblationConfig,
    pub gradcheck: GradcheckConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub norm: NormMode,
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub seasonal_period: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { seasonal_period: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub suite: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            suite: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub locations: usize,
    pub sources: usize,
    pub batch_size: usize,
    pub delta: f64,
    pub tol: f64,
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            locations: 3,
            sources: 2,
            batch_size: 2,
            delta: 1e-4,
            tol: 1e-3,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

/// Every accepted key with its meaning. `--help` prints this table and a
/// test keeps it equal to the set of fields the structs above accept.
pub const SCHEMA: &[(&str, &str)] = &[
    ("data.path", "dataset file: long-form CSV (.csv) or tensor snapshot (anything else)"),
    ("data.format", "`csv` or `snapshot`; inferred from the extension when unset"),
    ("data.norm", "z-score statistics: `global` or `per_source`, from the training range"),
    ("data.synth", "generate the dataset instead of reading data.path"),
    ("data.synth.k_true", "number of ground-truth components"),
    ("data.synth.components", "list of { mean, std } per component"),
    ("data.synth.assignment", "component per (location, source), row-major; random when unset"),
    ("data.synth.locations", "number of locations L"),
    ("data.synth.sources", "number of sources S"),
    ("data.synth.steps", "number of time steps"),
    ("data.synth.amplitude", "amplitude of the seasonal sine"),
    ("data.synth.period", "period of the seasonal sine in steps"),
    ("data.synth.random_phase", "draw a phase per series"),
    ("data.synth.noise_std", "standard deviation of additive observation noise"),
    ("data.synth.seed", "generator seed"),
    ("data.synth.start", "timestamp of the first step (RFC 3339)"),
    ("data.synth.step_seconds", "seconds between steps"),
    ("split.train_fraction", "leading share of steps used for training"),
    ("split.val_fraction", "share of steps after training used for validation; the rest is test"),
    ("model.input_len", "input window T"),
    ("model.horizon", "forecast horizon O"),
    ("model.layers", "number of GMRE/TE layers"),
    ("model.components", "mixture components K per channel"),
    ("model.embed_dim", "embedding width d_z"),
    ("model.hidden_dim", "hidden channels d_k (must exceed d_z)"),
    ("model.memory_slots", "memory records m"),
    ("model.memory_dim", "memory record width d_m"),
    ("model.kernel_size", "temporal convolution kernel size"),
    ("model.cluster_eps", "stabilizer added to the deviation in Cluster Norm"),
    ("model.kl_mode", "`batch_average` or `per_sample` KL between posteriors and priors"),
    ("model.assignment", "`posterior` (mixture) or `nearest_center` (hard clustering)"),
    ("model.gmre", "enable the mixture representation extractor"),
    ("model.hra", "enable the memory augmentation"),
    ("model.per_position_query", "one memory query per (location, source) instead of one per sample"),
    ("model.skip_fusion", "`sum` of per-layer projections or `concat_project`"),
    ("train.batch_size", "training batch size"),
    ("train.learning_rate", "Adam step size"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator stabilizer"),
    ("train.max_epochs", "upper bound on epochs"),
    ("train.patience", "epochs without validation improvement before stopping"),
    ("train.lambda", "weight of the cluster objective"),
    ("train.grad_clip", "global gradient-norm clip; 0 disables"),
    ("train.seed", "seed for initialization and shuffling"),
    ("train.eval_batch_size", "batch size for evaluation"),
    ("baseline.seasonal_period", "cycle length of the seasonal-mean baseline"),
    ("ablation.suite", "variants to compare: full, no_gmre, hard_clustering, no_hra, no_cluster_loss"),
    ("gradcheck.locations", "locations of the random gradient-check batch"),
    ("gradcheck.sources", "sources of the random gradient-check batch"),
    ("gradcheck.batch_size", "samples in the gradient-check batch"),
    ("gradcheck.delta", "finite-difference step"),
    ("gradcheck.tol", "largest accepted relative error"),
    ("gradcheck.max_entries_per_param", "sample this many entries per parameter; all when unset"),
    ("gradcheck.seed", "seed of the random batch and entry sampling"),
    ("output.dir", "parent of the timestamped run directories"),
];

pub fn schema_help() -> String {
    let width = SCHEMA.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (TOML; override with GMRL_<SECTION>__<KEY>, e.g. GMRL_TRAIN__SEED=3):\n");
    for (key, doc) in SCHEMA {
        out.push_str(&format!("  {key:width$}  {doc}\n"));
    }
    out
}

fn config_err(msg: impl Into<String>) -> GmrlError {
    GmrlError::Config(msg.into())
}

fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    if !rest.contains("__") {
        return None;
    }
    Some(rest.split("__").map(|p| p.to_ascii_lowercase()).collect::<Vec<_>>().join("."))
}

fn parse_env_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then `GMRL_*__*` variables from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| GmrlError::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut overrides: Vec<(String, String, String)> =
            env.into_iter().filter_map(|(k, v)| env_key(&k).map(|key| (key, k, v))).collect();
        overrides.sort();
        for (key, var, raw) in overrides {
            if !SCHEMA.iter().any(|(k, _)| *k == key) {
                return Err(config_err(format!("{var} names unknown config key `{key}`")));
            }
            set_path(&mut table, &key, parse_env_value(&raw))?;
        }
        let cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| {
            let origin = path.map(|p| format!("{}: ", p.display())).unwrap_or_default();
            config_err(format!("{origin}{e}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.split;
        if !(s.train_fraction > 0.0 && s.val_fraction > 0.0 && s.train_fraction + s.val_fraction < 1.0) {
            return Err(config_err(format!(
                "split fractions must be positive and leave room for a test range, got train {} val {}",
                s.train_fraction, s.val_fraction
            )));
        }
        if self.baseline.seasonal_period == 0 {
            return Err(config_err("baseline.seasonal_period must be at least 1"));
        }
        let gc = &self.gradcheck;
        if gc.locations == 0 || gc.sources == 0 || gc.batch_size == 0 || !(gc.delta > 0.0) || !(gc.tol > 0.0) {
            return Err(config_err(
                "gradcheck extents must be positive, and so must gradcheck.delta and gradcheck.tol",
            ));
        }
        if let Some(spec) = &self.data.synth {
            spec.validate()?;
        }
        self.suite()?;
        Ok(())
    }

    pub fn suite(&self) -> Result<Vec<Variant>> {
        self.ablation.suite.iter().map(|s| s.parse()).collect()
    }

    pub fn split_for(&self, steps: usize) -> SplitSpec {
        SplitSpec::by_fraction(steps, self.split.train_fraction, self.split.val_fraction)
    }

    /// Resolved configuration as TOML. Unset optional keys are omitted.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(format!("cannot serialize config: {e}")))
    }
}
