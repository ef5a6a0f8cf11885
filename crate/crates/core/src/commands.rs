//! Subcommand bodies. Each returns its artifacts' paths or a [`Failure`]
//! carrying the process exit code.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::apot::{apot_approximate, approximate_set, ApotValue};
use crate::clusters::ProposalSet;
use crate::config::{ConfigError, RunConfig};
use crate::data::Dataset;
use crate::error::Error;
use crate::experiments::{
    delta_sweep, noise_experiment, noise_layers, proposals_for, prune_init_experiment, write_csv,
    RunSetup,
};
use crate::fixer::FixingState;
use crate::metrics::{build_report, MetricsReport};
use crate::model::Network;
use crate::trainer::{accuracy, run_wfn, train_baseline, IterationMetrics};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Pipeline {
        stage: &'static str,
        message: String,
    },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Pipeline { .. } => 4,
        }
    }

    fn stage(stage: &'static str) -> impl FnOnce(Error) -> Failure {
        move |e| Failure::Pipeline {
            stage,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Pipeline { stage, message } => write!(f, "{stage} failed: {message}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn data_err(what: &str) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{what}: {e}"))
}

fn datasets(cfg: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let (train, eval) = cfg.datasets().map_err(data_err("loading datasets"))?;
    let dim = cfg.widths[0];
    let classes = *cfg.widths.last().unwrap();
    for (name, d) in [("training", &train), ("evaluation", &eval)] {
        if d.dim() != dim {
            return Err(Failure::Data(format!(
                "{name} set has {} features, the model expects {dim}",
                d.dim()
            )));
        }
        if d.classes() > classes {
            return Err(Failure::Data(format!(
                "{name} set has {} classes, the model outputs {classes}",
                d.classes()
            )));
        }
    }
    Ok((train, eval))
}

fn load_net(path: &Path) -> Outcome<Network> {
    if !path.is_file() {
        return Err(Failure::Config(format!(
            "model file `{}` does not exist",
            path.display()
        )));
    }
    Network::load(path).map_err(|e| Failure::Data(format!("reading {}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Outcome<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir)
            .map_err(|e| Failure::Data(format!("creating {}: {e}", dir.display()))),
        None => Ok(()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("writing {}: {e}", path.display())))
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Outcome<()> {
    ensure_parent(path)?;
    write_csv(rows, path).map_err(data_err("writing csv"))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serialises");
    s.push('\n');
    s
}

#[derive(Debug)]
pub struct BaselineOutcome {
    pub model: PathBuf,
    pub log: PathBuf,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

/// Trains the float baseline and writes it to `baseline_path`, with the
/// per-epoch log as CSV in `out_dir`.
pub fn cmd_train_baseline(cfg: &RunConfig) -> Outcome<BaselineOutcome> {
    let (train, eval) = datasets(cfg)?;
    let mut net = Network::mlp(&cfg.widths, cfg.net_seed).map_err(Failure::stage("model init"))?;
    let log = train_baseline(&mut net, &train, &cfg.baseline_config())
        .map_err(Failure::stage("baseline training"))?;
    let model = PathBuf::from(&cfg.baseline_path);
    write(&model, net.to_bytes())?;
    let log_path = cfg.out_path("baseline_log.csv");
    write_rows(&log, &log_path)?;
    Ok(BaselineOutcome {
        model,
        log: log_path,
        train_accuracy: accuracy(&net, &train).map_err(Failure::stage("evaluation"))?,
        eval_accuracy: accuracy(&net, &eval).map_err(Failure::stage("evaluation"))?,
    })
}

#[derive(Serialize)]
struct FixingLog<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    history: &'a [IterationMetrics],
    state: &'a FixingState,
}

#[derive(Debug)]
pub struct CompressOutcome {
    pub model: PathBuf,
    pub fixing_log: PathBuf,
    pub report: PathBuf,
    pub steps: PathBuf,
    pub metrics: MetricsReport,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
}

/// Full weight-fixing run from the baseline. Writes `compressed.wfnm`,
/// `fixing_log.json`, `report.json` and `steps.log` to `out_dir`; fails with
/// a pipeline error (after writing) if any eligible weight is left free.
pub fn cmd_compress(cfg: &RunConfig) -> Outcome<CompressOutcome> {
    let baseline = load_net(Path::new(&cfg.baseline_path))?;
    let (train, eval) = datasets(cfg)?;
    let schedule = cfg.schedule().map_err(|e| Failure::Config(e.to_string()))?;
    let fixer = cfg.fixer_config();
    let proposals = proposals_for(&baseline, cfg.delta, cfg.delta0)
        .map_err(Failure::stage("proposal generation"))?;
    let run = run_wfn(
        baseline.clone(),
        &train,
        &eval,
        &proposals,
        &schedule,
        &fixer,
        &cfg.train_config(),
    )
    .map_err(Failure::stage("weight fixing"))?;
    let metrics = build_report(&baseline, &run.network).map_err(Failure::stage("metrics"))?;

    let out = CompressOutcome {
        model: cfg.out_path("compressed.wfnm"),
        fixing_log: cfg.out_path("fixing_log.json"),
        report: cfg.out_path("report.json"),
        steps: cfg.out_path("steps.log"),
        baseline_accuracy: accuracy(&baseline, &eval).map_err(Failure::stage("evaluation"))?,
        final_accuracy: accuracy(&run.network, &eval).map_err(Failure::stage("evaluation"))?,
        metrics,
    };
    write(&out.model, run.network.to_bytes())?;
    let log = FixingLog {
        schema_version: LOG_SCHEMA_VERSION,
        config: cfg,
        history: &run.history,
        state: &run.state,
    };
    write(&out.fixing_log, to_json(&log))?;
    write(
        &out.report,
        out.metrics.to_json().map_err(Failure::stage("metrics"))?,
    )?;
    let steps: String = run.steps.iter().map(|s| format!("{s}\n")).collect();
    write(&out.steps, steps)?;
    if !run.state.all_fixed() {
        return Err(Failure::Pipeline {
            stage: "weight fixing",
            message: format!(
                "{} of {} eligible weights left unfixed",
                run.state.eligible_count() - run.state.fixed_eligible(),
                run.state.eligible_count()
            ),
        });
    }
    Ok(out)
}

/// Report for `model` against `baseline`, written to `out` when given.
pub fn cmd_analyze(model: &Path, baseline: &Path, out: Option<&Path>) -> Outcome<MetricsReport> {
    let m = load_net(model)?;
    let b = load_net(baseline)?;
    let report = build_report(&b, &m).map_err(Failure::stage("analysis"))?;
    if let Some(p) = out {
        write(p, report.to_json().map_err(Failure::stage("analysis"))?)?;
    }
    Ok(report)
}

/// Proposal set and its order-`omega` approximation as plain text, one
/// centre per line.
pub fn cmd_gen_clusters(delta: f64, delta0: f64, w_max: f64, omega: usize) -> Outcome<String> {
    let bad = |e: Error| Failure::Config(e.to_string());
    let proposals = ProposalSet::generate(delta, delta0, w_max).map_err(bad)?;
    if omega == 0 {
        return Err(Failure::Config("omega must be at least 1".into()));
    }
    let mut text = format!(
        "# delta {delta} delta0 {delta0} w_max {w_max} omega {omega}\n# centres {}\n# index proposal apot terms rel_error\n",
        proposals.values().len()
    );
    let codebook = approximate_set(&proposals, omega, delta).map_err(bad)?;
    for (i, &c) in proposals.values().iter().enumerate() {
        let v = if c == 0.0 {
            ApotValue::zero()
        } else {
            apot_approximate(c, omega, delta).map_err(bad)?
        };
        let terms = if v.terms().is_empty() {
            "0".to_string()
        } else {
            v.terms_string()
        };
        text.push_str(&format!(
            "{i} {c:e} {:e} {terms} {:e}\n",
            v.value(),
            if c == 0.0 { 0.0 } else { v.relative_error(c) }
        ));
    }
    text.push_str(&format!("# distinct approximations {}\n", codebook.len()));
    Ok(text)
}

/// Noise tolerance table for `model` (the baseline by default).
pub fn cmd_noise_exp(cfg: &RunConfig, model: Option<&Path>) -> Outcome<PathBuf> {
    let net = load_net(model.unwrap_or(Path::new(&cfg.baseline_path)))?;
    let (_, eval) = datasets(cfg)?;
    let layers = if cfg.noise_layers.is_empty() {
        noise_layers(&net)
    } else {
        cfg.noise_layers.clone()
    };
    let rows = noise_experiment(
        &net,
        &eval,
        &layers,
        &cfg.noise_betas,
        cfg.noise_repeats,
        cfg.noise_seed,
    )
    .map_err(Failure::stage("noise experiment"))?;
    let path = cfg.out_path("noise.csv");
    write_rows(&rows, &path)?;
    Ok(path)
}

pub fn cmd_prune_exp(cfg: &RunConfig) -> Outcome<PathBuf> {
    let net = load_net(Path::new(&cfg.baseline_path))?;
    let (train, eval) = datasets(cfg)?;
    let schedule = cfg.schedule().map_err(|e| Failure::Config(e.to_string()))?;
    let fixer = cfg.fixer_config();
    let tc = cfg.train_config();
    let setup = RunSetup {
        train: &train,
        eval: &eval,
        schedule: &schedule,
        fixer: &fixer,
        train_cfg: &tc,
    };
    let rows = cfg
        .prune_fractions
        .iter()
        .map(|&p| prune_init_experiment(&net, &setup, p, cfg.prune_seed).map(|o| o.row))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::stage("prune experiment"))?;
    let path = cfg.out_path("prune.csv");
    write_rows(&rows, &path)?;
    Ok(path)
}

pub fn cmd_delta_sweep(cfg: &RunConfig) -> Outcome<PathBuf> {
    let net = load_net(Path::new(&cfg.baseline_path))?;
    let (train, eval) = datasets(cfg)?;
    let schedule = cfg.schedule().map_err(|e| Failure::Config(e.to_string()))?;
    let fixer = cfg.fixer_config();
    let tc = cfg.train_config();
    let setup = RunSetup {
        train: &train,
        eval: &eval,
        schedule: &schedule,
        fixer: &fixer,
        train_cfg: &tc,
    };
    let rows =
        delta_sweep(&net, &setup, &cfg.sweep_deltas).map_err(Failure::stage("delta sweep"))?;
    let path = cfg.out_path("delta_sweep.csv");
    write_rows(&rows, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::Config(String::new()).exit_code(), 2);
        assert_eq!(Failure::Data(String::new()).exit_code(), 3);
        let p = Failure::stage("weight fixing")(Error::Param("x".into()));
        assert_eq!(p.exit_code(), 4);
        assert_eq!(p.to_string(), "weight fixing failed: invalid parameter: x");
    }

    #[test]
    fn gen_clusters_lists_every_centre() {
        let text = cmd_gen_clusters(0.1, 0.01, 0.05, 1).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        let n = ProposalSet::generate(0.1, 0.01, 0.05)
            .unwrap()
            .values()
            .len();
        assert_eq!(rows.len(), n);
        assert!(rows
            .iter()
            .any(|r| r.starts_with(&format!("{} 0e0 0e0 0 ", n / 2))));
        assert!(cmd_gen_clusters(0.1, 0.01, 0.05, 0).is_err());
        assert!(cmd_gen_clusters(1.5, 0.01, 0.05, 1).is_err());
    }

    #[test]
    fn missing_baseline_is_a_config_error() {
        let cfg = RunConfig {
            baseline_path: "/no/such/baseline.wfnm".into(),
            ..RunConfig::default()
        };
        assert_eq!(cmd_compress(&cfg).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn corrupt_model_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.wfnm");
        fs::write(&bad, b"WFNM\x01garbage").unwrap();
        assert_eq!(cmd_analyze(&bad, &bad, None).unwrap_err().exit_code(), 3);
    }
}
