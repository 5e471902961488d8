use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use zsrl_core::encoding::FeatureSet;
use zsrl_core::generators::GeneratorSpec;
use zsrl_core::rng::seeded;
use zsrl_lab::config::{hash_of, ExperimentConfig};
use zsrl_lab::experiments::{
    experiment_bandit_overspecialization, experiment_visr_comparison, write_bandit_outputs, write_visr_outputs,
    BanditConfig, VisrConfig,
};
use zsrl_lab::output::{write_atomic, write_json, write_report};
use zsrl_lab::run::{evaluate_features, run_experiment};
use zsrl_lab::verify::{run_suite, Mutation, VerifyOptions, SUITES};
use zsrl_lab::{LabError, LabResult};

#[derive(Parser)]
#[command(name = "zsrl", version, about = "Zero-shot RL on tabular MDPs")]
struct Cli {
    /// Size of the worker pool; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an MDP from a generator spec and write it as JSON.
    GenMdp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train features and evaluate them.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a fixed feature set under a run config. Accepts a feature
    /// file or a `checkpoint.json` written by `train`.
    EvalLoss {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an oracle suite, or all of them.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        mutate: Option<MutationArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a packaged experiment and write its artifacts under `--out`.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    DropCInverse,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentName {
    BanditOverspec,
    VisrCompare,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> LabResult<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

/// Reads the `phi` row table of a feature file or a training checkpoint.
fn read_features(path: &PathBuf) -> LabResult<FeatureSet> {
    #[derive(serde::Deserialize)]
    struct Rows {
        phi: Vec<Vec<f64>>,
    }
    let rows: Rows = read_json(path)?;
    FeatureSet::from_rows(&rows.phi).map_err(LabError::stage("feature load"))
}

fn with_seed(mut config: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config
}

/// Returns whether every verification passed.
fn dispatch(command: Command) -> LabResult<bool> {
    match command {
        Command::GenMdp { config, seed, out } => {
            let spec: GeneratorSpec = read_json(&config)?;
            let mdp = spec.generate(&mut seeded(seed)).map_err(LabError::stage("mdp generation"))?;
            let text = mdp.to_json().map_err(LabError::stage("mdp serialization"))?;
            write_atomic(&out, text.as_bytes())?;
            println!("wrote {} ({} states, {} actions)", out.display(), mdp.n_states(), mdp.n_actions());
            Ok(true)
        }
        Command::Train { config, seed, out } => {
            let config = with_seed(ExperimentConfig::from_path(&config)?, seed);
            let out = out
                .or_else(|| config.out.clone())
                .ok_or_else(|| LabError::Config("no output directory: pass --out or set \"out\"".into()))?;
            let result = run_experiment(&config, &out)?;
            println!(
                "exact loss {:.6} -> {:.6} in {} steps; outputs in {}",
                result.metrics.initial_exact_loss,
                result.metrics.final_exact_loss,
                result.metrics.steps,
                out.display()
            );
            Ok(true)
        }
        Command::EvalLoss { config, features, seed, out } => {
            let config = with_seed(ExperimentConfig::from_path(&config)?, seed);
            let phi = read_features(&features)?;
            let metrics = evaluate_features(&config, phi)?;
            let hash = config.hash();
            write_json(&out, "metrics.json", &hash, &metrics)?;
            let body: String = metrics
                .losses
                .iter()
                .map(|(k, v)| format!("- {k}: {:.6} ± {:.2e}\n", v.value, v.standard_error))
                .collect();
            write_report(&out, &hash, "Loss evaluation", &body)?;
            print!("{body}");
            Ok(true)
        }
        Command::Verify { suite, seed, mutate, out } => {
            let opts = VerifyOptions { seed, mutation: mutate.map(|MutationArg::DropCInverse| Mutation::DropCInverse) };
            let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite.as_str()] };
            let mut reports = Vec::new();
            for name in names {
                let report = run_suite(name, &opts)?;
                for c in &report.checks {
                    println!(
                        "[{}] {}: {} (measured {:.3e}, tolerance {:.3e}){}",
                        report.suite,
                        c.name,
                        if c.passed { "PASS" } else { "FAIL" },
                        c.measured,
                        c.tolerance,
                        if c.detail.is_empty() { String::new() } else { format!(" {}", c.detail) }
                    );
                }
                reports.push(report);
            }
            let passed = reports.iter().all(|r| r.passed);
            let text = serde_json::to_string_pretty(&reports)?;
            match out {
                Some(dir) => {
                    let hash = hash_of(&(&suite, seed, mutate.is_some()));
                    let body = serde_json::json!({ "passed": passed, "suites": reports });
                    write_json(&dir, "metrics.json", &hash, &body)?;
                }
                None => println!("{text}"),
            }
            Ok(passed)
        }
        Command::Experiment { name, config, seed, out } => match name {
            ExperimentName::BanditOverspec => {
                let mut cfg: BanditConfig = config.as_ref().map(read_json).transpose()?.unwrap_or_default();
                if let Some(seed) = seed {
                    cfg.seed = seed;
                }
                let report = experiment_bandit_overspecialization(&cfg)?;
                write_bandit_outputs(&cfg, &report, &out)?;
                for c in &report.cases {
                    println!(
                        "bandit({}) discount {}: {}/{} seeds succeed",
                        c.n_states,
                        c.gamma,
                        c.successes,
                        c.seeds.len()
                    );
                }
                Ok(report.passed)
            }
            ExperimentName::VisrCompare => {
                let mut cfg: VisrConfig = config.as_ref().map(read_json).transpose()?.unwrap_or_default();
                if let Some(seed) = seed {
                    cfg.seed = seed;
                }
                let report = experiment_visr_comparison(&cfg)?;
                write_visr_outputs(&cfg, &report, &out)?;
                println!(
                    "mean exact loss: exact scheme {:.6}, VISR scheme {:.6}, full-rank bound {:.6}",
                    report.mean_exact_scheme, report.mean_visr_scheme, report.full_rank_loss
                );
                Ok(true)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
