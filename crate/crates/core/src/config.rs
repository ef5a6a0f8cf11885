//! Run configuration for the command-line tool.
//!
//! A config file is flat TOML, one `key = value` per line. Every key can also
//! be given as an environment variable `WFN_<KEY>` (upper case) or as
//! `--set key=value`. Later sources win: defaults < file < environment <
//! flag. Values from the environment and flags are read as TOML literals and
//! fall back to plain strings, so `WFN_DATASET=blobs` and `--set
//! widths=[2,8,2]` both work.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::data::{gaussian_blobs, load_csv, two_moons, Dataset};
use crate::error::Result as WfnResult;
use crate::fixer::{FixerConfig, Schedule};
use crate::trainer::{AdamParams, BaselineConfig, TrainConfig};

pub const ENV_PREFIX: &str = "WFN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Csv,
}

pub struct KeyInfo {
    pub name: &'static str,
    pub module: &'static str,
    pub help: &'static str,
}

macro_rules! config_keys {
    ($( $name:ident : $ty:ty = $default:expr, $module:literal, $help:literal; )*) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $( pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $name: $default, )* }
            }
        }

        pub const KEYS: &[KeyInfo] = &[
            $( KeyInfo { name: stringify!($name), module: $module, help: $help }, )*
        ];

        impl RunConfig {
            fn set_value(&mut self, key: &str, value: toml::Value) -> Result<(), String> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value.try_into().map_err(|e: toml::de::Error| {
                            format!("expected {}: {}", stringify!($ty), e.message())
                        })?;
                    } )*
                    _ => return Err("unknown key".into()),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    dataset: DatasetKind = DatasetKind::TwoMoons, "data", "two_moons, blobs or csv";
    train_path: String = String::new(), "data", "training CSV (dataset = csv)";
    eval_path: String = String::new(), "data", "evaluation CSV (dataset = csv)";
    n_train: usize = 2000, "data", "generated training samples";
    n_eval: usize = 1000, "data", "generated evaluation samples";
    data_noise: f64 = 0.2, "data", "two_moons noise / blobs spread";
    data_seed: u64 = 1, "data", "seed of the generated training set";
    eval_seed: u64 = 2, "data", "seed of the generated evaluation set";
    widths: Vec<usize> = vec![2, 16, 16, 2], "model", "MLP layer widths, input first";
    net_seed: u64 = 3, "model", "initialisation seed";
    baseline_eta: f64 = 1e-3, "trainer", "baseline learning rate";
    baseline_epochs: usize = 100, "trainer", "baseline epochs";
    batch_size: usize = 32, "trainer", "minibatch size";
    seed: u64 = 0, "trainer", "shuffling seed";
    eta: f64 = 5e-3, "trainer", "learning rate while fixing";
    alpha: f64 = 0.4, "trainer", "regulariser weight";
    epochs_per_iteration: usize = 20, "trainer", "training epochs after each fixing step";
    adam_beta1: f64 = 0.9, "trainer", "Adam first-moment decay";
    adam_beta2: f64 = 0.999, "trainer", "Adam second-moment decay";
    adam_eps: f64 = 1e-8, "trainer", "Adam epsilon";
    fix_norm_params: bool = true, "trainer", "whether norm-layer parameters are fixed";
    iterations: usize = 5, "fixer", "fixing iterations T";
    fractions: Vec<f64> = Vec::new(), "fixer", "fixed fraction per iteration (empty: t/T)";
    delta: f64 = 0.01, "cluster-gen", "relative distance budget";
    delta0: f64 = 1e-3, "cluster-gen", "prune threshold";
    omega_max: usize = 12, "apot", "highest order tried before the full-precision fallback";
    out_dir: String = "out".into(), "cli", "directory for every artifact";
    baseline_path: String = "out/baseline.wfnm".into(), "cli", "baseline model file";
    noise_betas: Vec<f64> = vec![0.0, 0.1, 0.25, 0.5, 1.0], "experiments", "noise scales";
    noise_repeats: usize = 20, "experiments", "trials per noise cell";
    noise_layers: Vec<usize> = Vec::new(), "experiments", "layers to perturb (empty: all but norm)";
    noise_seed: u64 = 0, "experiments", "noise seed";
    prune_fractions: Vec<f64> = vec![0.0, 0.3], "experiments", "prune-at-init fractions";
    prune_seed: u64 = 0, "experiments", "prune selection seed";
    sweep_deltas: Vec<f64> = vec![0.005, 0.01, 0.02, 0.04], "experiments", "deltas for the sweep";
}

/// Where a key's value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Default,
    File { path: PathBuf, line: usize },
    Env(String),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Env(var) => write!(f, "environment {var}"),
            Origin::Flag => write!(f, "--set"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: Option<Origin>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(o) = &self.origin {
            write!(f, "{o}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "{k}: ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// A config together with the origin of every key that was set.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub origins: BTreeMap<String, Origin>,
}

fn literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl Loaded {
    pub fn defaults() -> Self {
        Loaded {
            config: RunConfig::default(),
            origins: BTreeMap::new(),
        }
    }

    fn apply(&mut self, key: &str, value: toml::Value, origin: Origin) -> Result<(), ConfigError> {
        self.config
            .set_value(key, value)
            .map_err(|message| ConfigError {
                origin: Some(origin.clone()),
                key: Some(key.to_string()),
                message,
            })?;
        self.origins.insert(key.to_string(), origin);
        Ok(())
    }

    pub fn apply_file_text(&mut self, path: &Path, text: &str) -> Result<(), ConfigError> {
        let table: BTreeMap<Spanned<String>, Spanned<toml::Value>> =
            toml::from_str(text).map_err(|e| ConfigError {
                origin: Some(Origin::File {
                    path: path.to_path_buf(),
                    line: e.span().map_or(1, |s| line_of(text, s.start)),
                }),
                key: None,
                message: e.message().to_string(),
            })?;
        let mut entries: Vec<_> = table.into_iter().collect();
        entries.sort_by_key(|(k, _)| k.span().start);
        for (key, value) in entries {
            let origin = Origin::File {
                path: path.to_path_buf(),
                line: line_of(text, key.span().start),
            };
            self.apply(key.get_ref(), value.into_inner(), origin)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: None,
            key: None,
            message: format!("cannot read config file {}: {e}", path.display()),
        })?;
        self.apply_file_text(path, &text)
    }

    /// Applies every `WFN_*` variable. Unknown names are reported.
    pub fn apply_env(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        let mut vars: Vec<_> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (var, raw) in vars {
            let key = var[ENV_PREFIX.len()..].to_ascii_lowercase();
            self.apply(&key, literal(&raw), Origin::Env(var.clone()))?;
        }
        Ok(())
    }

    pub fn apply_flag(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError {
            origin: Some(Origin::Flag),
            key: None,
            message: format!("expected key=value, got `{assignment}`"),
        })?;
        self.apply(key.trim(), literal(raw.trim()), Origin::Flag)
    }

    /// Range and path checks; the first failure is reported with the origin
    /// of the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.config.problems().into_iter().next() {
            None => Ok(()),
            Some((key, message)) => Err(ConfigError {
                origin: Some(self.origins.get(key).cloned().unwrap_or(Origin::Default)),
                key: Some(key.to_string()),
                message,
            }),
        }
    }
}

/// Reads defaults, then `file`, then the process environment, then `flags`,
/// and validates the result.
pub fn load(file: Option<&Path>, flags: &[String]) -> Result<Loaded, ConfigError> {
    let mut loaded = Loaded::defaults();
    if let Some(p) = file {
        loaded.apply_file(p)?;
    }
    loaded.apply_env(std::env::vars())?;
    for f in flags {
        loaded.apply_flag(f)?;
    }
    loaded.validate()?;
    Ok(loaded)
}

fn in_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl RunConfig {
    /// Every violated constraint as `(key, message)`, in key order.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut check = |ok: bool, key: &'static str, msg: String| {
            if !ok {
                out.push((key, msg));
            }
        };
        match self.dataset {
            DatasetKind::Csv => {
                for (key, p) in [
                    ("train_path", &self.train_path),
                    ("eval_path", &self.eval_path),
                ] {
                    check(!p.is_empty(), key, "required when dataset = csv".into());
                    check(
                        p.is_empty() || Path::new(p).is_file(),
                        key,
                        format!("no such file `{p}`"),
                    );
                }
            }
            DatasetKind::TwoMoons => check(
                self.widths.first() == Some(&2) && self.widths.last() == Some(&2),
                "widths",
                "two_moons needs 2 inputs and 2 outputs".into(),
            ),
            DatasetKind::Blobs => {}
        }
        check(self.n_train > 0, "n_train", "must be at least 1".into());
        check(self.n_eval > 0, "n_eval", "must be at least 1".into());
        check(
            self.data_noise >= 0.0 && self.data_noise.is_finite(),
            "data_noise",
            format!("must be non-negative, got {}", self.data_noise),
        );
        check(
            self.widths.len() >= 2 && self.widths.iter().all(|&w| w > 0),
            "widths",
            "need at least two positive widths".into(),
        );
        check(
            self.dataset != DatasetKind::Blobs || self.widths.last().is_some_and(|&c| c >= 2),
            "widths",
            "blobs needs at least 2 output classes".into(),
        );
        check(
            self.baseline_eta > 0.0,
            "baseline_eta",
            "must be positive".into(),
        );
        check(
            self.batch_size > 0,
            "batch_size",
            "must be at least 1".into(),
        );
        check(
            self.eta > 0.0 && self.eta.is_finite(),
            "eta",
            "must be positive".into(),
        );
        check(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            "alpha",
            "must be non-negative".into(),
        );
        check(
            in_unit(self.adam_beta1),
            "adam_beta1",
            "must lie in (0, 1)".into(),
        );
        check(
            in_unit(self.adam_beta2),
            "adam_beta2",
            "must lie in (0, 1)".into(),
        );
        check(self.adam_eps > 0.0, "adam_eps", "must be positive".into());
        check(
            self.iterations > 0,
            "iterations",
            "must be at least 1".into(),
        );
        check(
            self.fractions.is_empty() || self.fractions.len() == self.iterations,
            "fractions",
            format!("needs {} entries or none", self.iterations),
        );
        if let Err(e) = self.schedule() {
            let key = if self.fractions.is_empty() {
                "delta"
            } else {
                "fractions"
            };
            check(false, key, e.to_string());
        }
        check(
            self.delta0 > 0.0 && self.delta0.is_finite(),
            "delta0",
            "must be positive".into(),
        );
        check(self.omega_max > 0, "omega_max", "must be at least 1".into());
        check(
            !self.out_dir.is_empty(),
            "out_dir",
            "must not be empty".into(),
        );
        check(
            !self.baseline_path.is_empty(),
            "baseline_path",
            "must not be empty".into(),
        );
        check(
            self.noise_betas.iter().all(|&b| b >= 0.0 && b.is_finite()),
            "noise_betas",
            "must be non-negative".into(),
        );
        check(
            self.noise_repeats > 0,
            "noise_repeats",
            "must be at least 1".into(),
        );
        check(
            self.prune_fractions.iter().all(|p| (0.0..1.0).contains(p)),
            "prune_fractions",
            "each must lie in [0, 1)".into(),
        );
        check(
            !self.sweep_deltas.is_empty()
                && self
                    .sweep_deltas
                    .iter()
                    .all(|&d| d > 0.0 && d * (self.iterations as f64) < 1.0),
            "sweep_deltas",
            "need at least one delta, each with delta·iterations < 1".into(),
        );
        out
    }

    pub fn schedule(&self) -> WfnResult<Schedule> {
        if self.fractions.is_empty() {
            Schedule::linear(self.delta, self.iterations)
        } else {
            Schedule::new(self.delta, self.fractions.clone())
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            alpha: self.alpha,
            epochs_per_iteration: self.epochs_per_iteration,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: self.adam(),
            fix_norm_params: self.fix_norm_params,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            eta: self.baseline_eta,
            epochs: self.baseline_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: self.adam(),
        }
    }

    pub fn fixer_config(&self) -> FixerConfig {
        FixerConfig {
            delta0: self.delta0,
            omega_max: self.omega_max,
            exclude_norm: !self.fix_norm_params,
        }
    }

    /// Training and evaluation sets.
    pub fn datasets(&self) -> WfnResult<(Dataset, Dataset)> {
        let classes = self.widths.last().copied().unwrap_or(2);
        let dim = self.widths.first().copied().unwrap_or(2);
        match self.dataset {
            DatasetKind::TwoMoons => Ok((
                two_moons(self.n_train, self.data_noise, self.data_seed)?,
                two_moons(self.n_eval, self.data_noise, self.eval_seed)?,
            )),
            DatasetKind::Blobs => Ok((
                gaussian_blobs(self.n_train, classes, dim, self.data_noise, self.data_seed)?,
                gaussian_blobs(self.n_eval, classes, dim, self.data_noise, self.eval_seed)?,
            )),
            DatasetKind::Csv => Ok((load_csv(&self.train_path)?, load_csv(&self.eval_path)?)),
        }
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.out_dir).join(name)
    }
}

/// The key table shown by `--help`.
pub fn help_table() -> String {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialise");
    let mut out = format!(
        "Config keys (file < {ENV_PREFIX}<KEY> environment < --set key=value):\n\n  {:<22} {:<28} {:<12} {}\n",
        "key", "default", "module", "meaning"
    );
    for k in KEYS {
        let d = defaults
            .get(k.name)
            .map_or_else(String::new, |v| v.to_string());
        out.push_str(&format!(
            "  {:<22} {:<28} {:<12} {}\n",
            k.name, d, k.module, k.help
        ));
    }
    out
}
