use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tailforge::ensemble::{eval_report, per_class_csv, EvalReport};
use tailforge::nnkernel::load_checkpoint;
use tailforge::runner::{ensemble_runs, run_experiment, run_ladder, ExperimentConfig, RunOutcome, Stage};
use tailforge::synthbench::{gen_dataset, gen_validation, write_dataset};
use tailforge::threads::{configured_threads, with_threads};
use tailforge::train::predict_dataset;

#[derive(Parser)]
#[command(name = "tailforge", version, about = "Long-tailed noisy-label training experiments on synthetic glyphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment seed (the dataset seed is part of the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and validation splits.
    Gen,
    /// Train a baseline model.
    Train,
    /// Train, then clean the training set iteratively.
    Clean,
    /// Train, clean, then retrain the classifier with class-balanced sampling.
    Rebalance,
    /// Rebalance, then search the tau-norm exponent.
    Tau,
    /// Tau search followed by ten-crop test-time evaluation.
    TtaEval,
    /// Run the stage list from the config as given.
    Run,
    /// Evaluate a saved checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Ensemble the saved predictions of several runs.
    Ensemble {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
    },
    /// Run the cumulative ablation ladder over three seeds.
    Ladder,
}

/// Problems with the invocation itself; these exit with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigError(String);

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| ConfigError(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.out_dir = Some(common.out.clone().or(cfg.out_dir).unwrap_or_else(|| PathBuf::from("tailforge-out")));
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> &Path {
    cfg.out_dir.as_deref().expect("load_config sets an output directory")
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        println!("{}", msg.as_ref());
    }
}

fn summary(report: &EvalReport) -> String {
    let [h, m, t] = report.split_accuracy;
    format!(
        "top1 {:.4}  top5 {:.4}  mcer {:.4}  head/medium/tail {:.3}/{:.3}/{:.3}",
        report.top1_accuracy, report.top5_accuracy, report.mean_class_error_rate, h, m, t
    )
}

fn run_stages(mut cfg: ExperimentConfig, stages: Option<Vec<Stage>>, quiet: bool) -> Result<RunOutcome> {
    if let Some(stages) = stages {
        cfg.stages = stages;
    }
    let out = run_experiment(&cfg)?;
    for (entry, t) in out.manifest.stages.iter().zip(&out.timings) {
        say(quiet, format!("{:<20} {}  ({:.1}s)", entry.stage.name(), summary(&entry.report), t.seconds));
    }
    say(quiet, format!("wrote {}", out_dir(&cfg).join("manifest.json").display()));
    Ok(out)
}

fn execute(cli: Cli) -> Result<()> {
    use Stage::*;
    let cfg = load_config(&cli.common)?;
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    let quiet = cli.common.quiet;
    match cli.command {
        Command::Gen => {
            let bench = gen_dataset(&cfg.dataset)?;
            let dir = out_dir(&cfg);
            write_dataset(&bench.train, &dir.join("train"))?;
            write_dataset(&bench.val, &dir.join("val"))?;
            let flips = bench.train.flip_mask.iter().filter(|f| **f).count();
            say(quiet, format!("train: {} samples, {flips} noisy labels; val: {} samples", bench.train.len(), bench.val.len()));
        }
        Command::Train => drop(run_stages(cfg, Some(vec![Train, Eval]), quiet)?),
        Command::Clean => {
            let out = run_stages(cfg, Some(vec![Train, Clean, Eval]), quiet)?;
            if let Some(h) = &out.manifest.cleaning {
                for r in &h.rounds {
                    say(quiet, format!(
                        "round {}: kept {} dropped {} relabeled {} precision {:.3} recall {:.3} val top1 {:.4}",
                        r.round, r.kept, r.dropped, r.relabeled, r.oracle_precision, r.oracle_recall, r.post_retrain_val_top1
                    ));
                }
            }
        }
        Command::Rebalance => drop(run_stages(cfg, Some(vec![Train, Clean, RetrainClassifier, Eval]), quiet)?),
        Command::Tau => {
            let out = run_stages(cfg, Some(vec![Train, Clean, RetrainClassifier, TauNorm]), quiet)?;
            if let Some(s) = &out.manifest.tau_search {
                say(quiet, format!("best tau {}", s.best_tau));
            }
        }
        Command::TtaEval => drop(run_stages(cfg, Some(vec![Train, Clean, RetrainClassifier, TauNorm, TtaEval]), quiet)?),
        Command::Run => drop(run_stages(cfg, None, quiet)?),
        Command::Eval { checkpoint } => {
            let params = load_checkpoint(&checkpoint)?;
            if params.num_classes() != cfg.dataset.num_classes {
                return Err(ConfigError(format!(
                    "checkpoint has {} classes, config dataset has {}",
                    params.num_classes(),
                    cfg.dataset.num_classes
                ))
                .into());
            }
            let val = gen_validation(&cfg.dataset)?;
            let counts = cfg.dataset.class_counts()?;
            let report = eval_report(&predict_dataset(&params, &val)?, &val.labels, &counts)?;
            write_report(out_dir(&cfg), &report, &counts)?;
            say(quiet, summary(&report));
        }
        Command::Ensemble { runs } => {
            let report = ensemble_runs(&runs)?;
            let counts = cfg.dataset.class_counts()?;
            write_report(out_dir(&cfg), &report, &counts)?;
            say(quiet, summary(&report));
        }
        Command::Ladder => {
            let ladder = run_ladder(&cfg)?;
            for r in &ladder.rows {
                say(quiet, format!("{:<20} top1 {:.4}  delta {:+.4}", r.stage, r.top1, r.delta));
            }
            say(quiet, format!("wrote {}", out_dir(&cfg).join("ladder.csv").display()));
        }
    }
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport, counts: &[usize]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    fs::write(dir.join("per_class.csv"), per_class_csv(report, counts))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.downcast_ref::<ConfigError>().is_some()
        || err.downcast_ref::<tailforge::Error>().is_some_and(tailforge::Error::is_config);
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match configured_threads() {
        Ok(Some(n)) => with_threads(n, move || execute(cli)).unwrap_or_else(|e| Err(e.into())),
        Ok(None) => execute(cli),
        Err(e) => Err(ConfigError(e.to_string()).into()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
