use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sampled_rnn::config::{DataConfig, ExperimentConfig};
use sampled_rnn::experiment::{
    export_diagnostics, fit_model, generate_splits, prepare_data, run_ablation, run_experiment,
    score, write_predictions, AblationAxis, FittedModel, RunSummary,
};
use sampled_rnn::ingest::ingest_csv;
use sampled_rnn::io::{load_model, save_model, write_dataset, write_dataset_with, write_json};
use sampled_rnn::{Error, Result, Stage};

#[derive(Parser)]
#[command(name = "sampled-rnn", version, about = "Sampled recurrent networks for dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the train, validation and test splits.
    Generate(Common),
    /// Fit one model per seed and save it.
    Fit(Common),
    /// Roll a saved model out on the test split.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Fit, steer the simulated plant with LQR and record the traces.
    Control(Common),
    /// Full run: fit, score every seed and write the summary.
    Evaluate(Common),
    /// Repeat a run along one hyperparameter axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AblationAxis,
    },
    /// Export Koopman eigenvalues and sampled pairs.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Use a saved model instead of fitting one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Split, normalize and embed a CSV series.
    Ingest(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| tag(Stage::Config, e))?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    let out = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    cfg.output_dir = Some(out.clone());
    cfg.validate().map_err(|e| tag(Stage::Config, e))?;
    Ok((cfg, out))
}

fn tag(stage: Stage, e: Error) -> Error {
    match e {
        e @ Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            seed: None,
            source: Box::new(other),
        },
    }
}

fn print_summary(summary: &RunSummary) {
    for s in &summary.seeds {
        println!(
            "seed {:>3}  {:?} {:.6e}  fit {:.3}s{}",
            s.seed,
            summary.metric,
            s.metric,
            s.fit_seconds,
            s.control
                .as_ref()
                .map(|c| format!("  cost {:.3}  final/initial {:.4}", c.cumulative_cost, c.relative_error))
                .unwrap_or_default()
        );
    }
    let a = &summary.aggregate;
    println!(
        "{}: {:?} {:.6e} ({:.6e}, {:.6e})",
        summary.name, summary.metric, a.mean, a.min, a.max
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let (cfg, out) = load(&common)?;
            let DataConfig::Generated(g) = &cfg.data else {
                return Err(tag(Stage::Generate, Error::Config("generate needs a simulated system".into())));
            };
            let (train, validation, test) = generate_splits(g).map_err(|e| tag(Stage::Generate, e))?;
            let write = || -> Result<()> {
                write_dataset(&out.join("train.csv"), &train)?;
                write_dataset(&out.join("test.csv"), &test)?;
                if let Some(v) = &validation {
                    write_dataset(&out.join("validation.csv"), v)?;
                }
                Ok(())
            };
            write().map_err(|e| tag(Stage::Write, e))?;
            println!(
                "wrote {} train, {} test trajectories to {}",
                train.trajectories.len(),
                test.trajectories.len(),
                out.display()
            );
        }
        Command::Fit(common) => {
            let (cfg, out) = load(&common)?;
            let data = prepare_data(&cfg)?;
            for &seed in &cfg.seeds {
                let (model, secs) = fit_model(&cfg, &data, seed)
                    .map_err(|e| with_seed(Stage::Fit, seed, e))?;
                match &model {
                    FittedModel::Koopman(m) => {
                        let path = out.join(format!("seed_{seed}")).join("model.json");
                        save_model(&path, m).map_err(|e| with_seed(Stage::Write, seed, e))?;
                        println!("seed {seed}: fit {secs:.3}s -> {}", path.display());
                    }
                    FittedModel::Direct(_) => {
                        println!("seed {seed}: fit {secs:.3}s (direct models are not saved)")
                    }
                }
            }
        }
        Command::Predict { common, model } => {
            let (cfg, out) = load(&common)?;
            let data = prepare_data(&cfg)?;
            let m = load_model(&model).map_err(|e| tag(Stage::Predict, e))?;
            let s = score(&m, &data.test, data.embedding.as_ref(), &cfg.evaluation)
                .map_err(|e| tag(Stage::Predict, e))?;
            write_predictions(&out.join("prediction.csv"), &s.predictions)
                .map_err(|e| tag(Stage::Write, e))?;
            println!("{:?} {:.6e}{}", cfg.evaluation.metric, s.value, if s.diverged { " (diverged)" } else { "" });
        }
        Command::Control(common) => {
            let (cfg, _) = load(&common)?;
            if cfg.control.is_none() {
                return Err(tag(Stage::Config, Error::Config("config has no control section".into())));
            }
            print_summary(&run_experiment(&cfg)?);
        }
        Command::Evaluate(common) => {
            let (cfg, _) = load(&common)?;
            print_summary(&run_experiment(&cfg)?);
        }
        Command::Ablate { common, axis } => {
            let (cfg, _) = load(&common)?;
            let table = run_ablation(&cfg, axis)?;
            for r in &table.rows {
                let a = &r.summary.aggregate;
                println!(
                    "{:<28} {:.6e} ({:.6e}, {:.6e})  fit {:.3}s",
                    r.label, a.mean, a.min, a.max, r.summary.fit_seconds.mean
                );
            }
        }
        Command::Diagnose { common, model } => {
            let (cfg, out) = load(&common)?;
            let models = match model {
                Some(p) => vec![(None, load_model(&p).map_err(|e| tag(Stage::Diagnose, e))?)],
                None => {
                    let data = prepare_data(&cfg)?;
                    let mut v = Vec::new();
                    for &seed in &cfg.seeds {
                        let (m, _) = fit_model(&cfg, &data, seed)
                            .map_err(|e| with_seed(Stage::Fit, seed, e))?;
                        let FittedModel::Koopman(m) = m else {
                            return Err(with_seed(
                                Stage::Diagnose,
                                seed,
                                Error::Config("diagnostics need the Koopman model".into()),
                            ));
                        };
                        v.push((Some(seed), m));
                    }
                    v
                }
            };
            for (seed, m) in models {
                let dir = match seed {
                    Some(s) => out.join(format!("seed_{s}")),
                    None => out.clone(),
                };
                let report = export_diagnostics(&m, &dir).map_err(|e| match seed {
                    Some(s) => with_seed(Stage::Diagnose, s, e),
                    None => tag(Stage::Diagnose, e),
                })?;
                write_json(&dir.join("diagnostics.json"), &report).map_err(|e| tag(Stage::Write, e))?;
                println!(
                    "{}: {} eigenvalues, max modulus {:.9}",
                    dir.display(),
                    report.eigenvalue_count,
                    report.max_modulus
                );
                if let Some(note) = &report.note {
                    println!("note: {note}");
                }
            }
        }
        Command::Ingest(common) => {
            let (cfg, out) = load(&common)?;
            let (DataConfig::Csv(c), Some(delay)) = (&cfg.data, &cfg.embedding) else {
                return Err(tag(Stage::Ingest, Error::Config("ingest needs a CSV source and an embedding".into())));
            };
            let ing = ingest_csv(c, delay).map_err(|e| tag(Stage::Ingest, e))?;
            let write = |name: &str, d| write_dataset_with(&out.join(name), d, Some("oldest_first"));
            let result = (|| -> Result<()> {
                write("train.csv", &ing.train.embedded)?;
                if let Some(v) = &ing.validation {
                    write("validation.csv", &v.embedded)?;
                }
                write("test.csv", &ing.test.embedded)
            })();
            result.map_err(|e| tag(Stage::Write, e))?;
            println!(
                "rows train {:?}, validation {:?}, test {:?}; embedded dimension {}",
                ing.train.rows,
                ing.validation.as_ref().map(|v| v.rows.clone()),
                ing.test.rows,
                ing.map.state_dim()
            );
        }
    }
    Ok(())
}

fn with_seed(stage: Stage, seed: u64, e: Error) -> Error {
    match e {
        e @ Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            seed: Some(seed),
            source: Box::new(other),
        },
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
