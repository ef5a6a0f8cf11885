use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use wfn::commands::{self, Failure};
use wfn::config::{self, RunConfig};

/// Weight fixing: compress a network onto a small powers-of-two codebook.
#[derive(Parser)]
#[command(name = "wfn", version)]
struct Cli {
    /// TOML config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set delta=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the float baseline and save it to `baseline_path`.
    TrainBaseline,
    /// Fix every weight of the baseline and write model, log and report.
    Compress,
    /// Print the metrics report of MODEL measured against BASELINE.
    Analyze {
        model: PathBuf,
        baseline: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the proposal centres and their powers-of-two approximations.
    GenClusters {
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        delta0: Option<f64>,
        #[arg(long)]
        wmax: f64,
        #[arg(long, default_value_t = 1)]
        omega: usize,
    },
    /// Accuracy under relative and absolute weight noise, per layer.
    NoiseExp {
        /// Model to perturb (default: the baseline).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Prune a random fraction at initialisation, then fix.
    PruneExp,
    /// One full run per delta in `sweep_deltas`.
    DeltaSweep,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg: RunConfig = config::load(cli.config.as_deref(), &cli.set)?.config;
    match cli.command {
        Command::TrainBaseline => {
            let o = commands::cmd_train_baseline(&cfg)?;
            println!("baseline written to {}", o.model.display());
            println!(
                "train accuracy {:.4}, eval accuracy {:.4}",
                o.train_accuracy, o.eval_accuracy
            );
        }
        Command::Compress => {
            let o = commands::cmd_compress(&cfg)?;
            let m = &o.metrics;
            println!("model {}", o.model.display());
            println!("fixing log {}", o.fixing_log.display());
            println!("report {}", o.report.display());
            println!("step log {}", o.steps.display());
            println!(
                "accuracy {:.4} -> {:.4}, unique {}, entropy {:.4} bits, CR {:.2}",
                o.baseline_accuracy,
                o.final_accuracy,
                m.unique_counts["full"],
                m.entropy_bits,
                m.compression_ratio
            );
        }
        Command::Analyze {
            model,
            baseline,
            out,
        } => {
            let r = commands::cmd_analyze(&model, &baseline, out.as_deref())?;
            print!("{}", r.to_json().map_err(|e| Failure::Data(e.to_string()))?);
        }
        Command::GenClusters {
            delta,
            delta0,
            wmax,
            omega,
        } => {
            let text = commands::cmd_gen_clusters(
                delta.unwrap_or(cfg.delta),
                delta0.unwrap_or(cfg.delta0),
                wmax,
                omega,
            )?;
            print!("{text}");
        }
        Command::NoiseExp { model } => {
            println!(
                "{}",
                commands::cmd_noise_exp(&cfg, model.as_deref())?.display()
            );
        }
        Command::PruneExp => println!("{}", commands::cmd_prune_exp(&cfg)?.display()),
        Command::DeltaSweep => println!("{}", commands::cmd_delta_sweep(&cfg)?.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = Cli::command()
        .after_long_help(config::help_table())
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wfn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
