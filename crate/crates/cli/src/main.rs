//! `owra`: open-world reliability assessment over classifier score streams.
//!
//! Subcommands cover the full pipeline: calibration, EVM training and
//! scoring, synthetic test generation, trial evaluation, threshold sweeps,
//! and report consolidation. Configuration comes from a declarative TOML
//! file plus flag overrides; `OWRA_SEED` is the seed fallback. Exit codes:
//! 0 success, 1 internal error, 2 usage/input error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use owra_core::dist_stats::FitMethod;
use owra_core::evm::EvmHyper;
use owra_core::policy::PolicyVariant;

use commands::CliError;
use config::{FileConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "owra",
    version,
    about = "Open-world reliability assessment over classifier score streams"
)]
struct Cli {
    /// Root seed; overrides the config file and OWRA_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Declarative TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for trial execution (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Emit machine-readable results on stdout.
    #[arg(long, global = true)]
    stdout: bool,
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the experiment commands; each beats the config file.
#[derive(Args, Debug, Default)]
struct ExperimentArgs {
    /// Trials per configuration.
    #[arg(long)]
    trials: Option<usize>,
    /// Records per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated policies (mean-softmax,kl-softmax,kl-evm,bikl,ond).
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// Calibration fit method: raw or truncated.
    #[arg(long)]
    fit: Option<String>,
    /// Comma-separated phase-2 unknown percentages.
    #[arg(long, value_delimiter = ',')]
    pcts: Option<Vec<u32>>,
    /// Score CSV with is_unknown flags to use as pools instead of synthesis.
    #[arg(long)]
    pools: Option<PathBuf>,
    /// Unknown percentage of the validation runs used for selection.
    #[arg(long)]
    validation_pct: Option<u32>,
    /// Threshold-selection regime: max-true-detection, max-total-accuracy,
    /// or false-cap:<pct>.
    #[arg(long)]
    regime: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit calibration statistics from a validation score CSV.
    Calibrate {
        /// Score CSV (sample_id,max_softmax,max_evm,is_unknown).
        #[arg(long)]
        input: PathBuf,
        /// Fit method: raw or truncated.
        #[arg(long)]
        fit: Option<String>,
        /// Calibration JSON to write.
        #[arg(long)]
        output: PathBuf,
    },
    /// Extreme Value Machine training and scoring.
    Evm {
        #[command(subcommand)]
        command: EvmCommand,
    },
    /// Generate labeled synthetic test sequences as score CSVs.
    GenTests {
        /// Phase-2 unknown percentage of the generated tests.
        #[arg(long)]
        pct: u32,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Calibrate, select thresholds, and evaluate policies over unknown
    /// percentages; writes metrics.csv, trials.jsonl, and a manifest.
    Run {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Sweep one policy's tolerance grid at a fixed unknown percentage.
    Sweep {
        /// Policy to sweep.
        #[arg(long)]
        policy: String,
        /// Unknown percentage (default: the validation percentage).
        #[arg(long)]
        pct: Option<u32>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Consolidate sweep outputs into a per-policy reliability ranking.
    Report {
        /// Directory holding sweep_<policy>.csv files.
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvmCommand {
    /// Train an EVM from a labeled feature CSV.
    Train {
        /// Feature CSV (sample_id,label,f_1,...,f_M).
        #[arg(long)]
        features: PathBuf,
        /// Tail size for Weibull fitting.
        #[arg(long)]
        tail_size: Option<usize>,
        /// Scalar applied to tail distances before fitting.
        #[arg(long)]
        distance_multiplier: Option<f64>,
        /// Minimum inclusion probability for set-cover reduction.
        #[arg(long)]
        cover_threshold: Option<f64>,
        /// Model JSON to write.
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a feature CSV against a trained model.
    Score {
        /// Feature CSV to score.
        #[arg(long)]
        features: PathBuf,
        /// Trained model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Optional sample_id,max_softmax CSV to merge into a canonical
        /// score-stream CSV.
        #[arg(long)]
        softmax: Option<PathBuf>,
        /// Unknown-rejection threshold for the label column.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Output CSV.
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse_fit(s: Option<&str>) -> Result<Option<FitMethod>, CliError> {
    s.map(|s| s.parse::<FitMethod>().map_err(|e| CliError::usage(e.to_string())))
        .transpose()
}

fn parse_policies(names: Option<&[String]>) -> Result<Option<Vec<PolicyVariant>>, CliError> {
    names
        .map(|names| {
            names
                .iter()
                .map(|n| n.parse::<PolicyVariant>().map_err(|e| CliError::usage(e.to_string())))
                .collect()
        })
        .transpose()
}

fn overrides(seed: Option<u64>, exp: &ExperimentArgs) -> Result<Overrides, CliError> {
    Ok(Overrides {
        seed,
        fit: parse_fit(exp.fit.as_deref())?,
        trials: exp.trials,
        batch_size: exp.batch_size,
        policies: parse_policies(exp.policies.as_deref())?,
        pcts: exp.pcts.clone(),
        pools_file: exp.pools.clone(),
        validation_pct: exp.validation_pct,
        regime: exp.regime.clone(),
    })
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Calibrate { input, fit, output } => {
            let fit = parse_fit(fit.as_deref())?.unwrap_or_default();
            commands::cmd_calibrate(&input, fit, &output, cli.stdout)
        }
        Command::Evm { command } => match command {
            EvmCommand::Train {
                features,
                tail_size,
                distance_multiplier,
                cover_threshold,
                output,
            } => {
                let defaults = EvmHyper::default();
                let hyper = EvmHyper {
                    tail_size: tail_size.unwrap_or(defaults.tail_size),
                    distance_multiplier: distance_multiplier.unwrap_or(defaults.distance_multiplier),
                    cover_threshold: cover_threshold.unwrap_or(defaults.cover_threshold),
                };
                commands::cmd_evm_train(&features, hyper, &output)
            }
            EvmCommand::Score {
                features,
                model,
                softmax,
                tau,
                output,
            } => commands::cmd_evm_score(&features, &model, softmax.as_deref(), tau, &output),
        },
        Command::GenTests { pct, out, experiment } => {
            let settings = config::resolve(&file, &overrides(cli.seed, &experiment)?)?;
            commands::cmd_gen_tests(&settings, config_path, pct, &out)
        }
        Command::Run { out, experiment } => {
            let settings = config::resolve(&file, &overrides(cli.seed, &experiment)?)?;
            commands::cmd_run(&settings, config_path, &out, cli.stdout)
        }
        Command::Sweep {
            policy,
            pct,
            out,
            experiment,
        } => {
            let settings = config::resolve(&file, &overrides(cli.seed, &experiment)?)?;
            let variant = policy
                .parse::<PolicyVariant>()
                .map_err(|e| CliError::usage(e.to_string()))?;
            commands::cmd_sweep(&settings, config_path, variant, pct, &out, cli.stdout)
        }
        Command::Report { dir } => commands::cmd_report(&dir, cli.stdout),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        if let Err(e) = pool {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
