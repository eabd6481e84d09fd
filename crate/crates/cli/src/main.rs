use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use growsched_core::evalkit::{evaluate, split, SplitConfig};
use growsched_core::growing::{train_full, GrowingModel, TrainMode};
use growsched_core::pipeline::{self, Arm, RunConfig};
use growsched_core::schedsim::{self, ModelClassifier, OracleClassifier, Policy, SchedulerConfig};
use growsched_core::trace::{generate_trace, read_trace_file, DatasetSnapshot};
use growsched_core::Execution;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRAINING: u8 = 3;

#[derive(Parser)]
#[command(
    name = "growsched",
    version,
    about = "Constraint-aware task classification with a growing input layer"
)]
struct Cli {
    /// Run every hot loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic JSONL trace.
    GenTrace {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a trace, retrain at every feature growth and write step reports.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Replay this trace instead of generating one.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Comma-separated subset of `growing,fully_retrain`.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model from scratch on a dataset snapshot.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on a dataset snapshot.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the scheduling simulator on a trace.
    SchedSim {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::CoAnalyzer)]
        policy: PolicyArg,
        /// Classify with a saved model.
        #[arg(long, conflicts_with = "oracle")]
        model: Option<PathBuf>,
        /// Classify with the brute-force oracle.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the queue-length trace as CSV.
        #[arg(long)]
        queue_csv: Option<PathBuf>,
    },
    /// Print a saved model's dimensions and extension history.
    InspectModel {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Fifo,
    CoAnalyzer,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::with_seed(seed.unwrap_or(RunConfig::default().seed)),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.trace.seed = s;
    }
    Ok(cfg)
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Returns the exit code for a command that ran to completion.
fn run(cli: Cli) -> anyhow::Result<u8> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::GenTrace { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let bytes = generate_trace(&cfg.trace)?;
            std::fs::write(&out, bytes).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Simulate {
            config,
            seed,
            trace,
            arms,
            out_dir,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if trace.is_some() {
                cfg.trace_path = trace;
            }
            if let Some(arms) = arms {
                cfg.arms = arms.iter().map(|a| a.parse()).collect::<Result<Vec<Arm>, _>>()?;
            }
            if cli.sequential {
                cfg.execution = Execution::Sequential;
            }
            let out = pipeline::run(&cfg)?;
            out.write(&cfg, &out_dir)?;
            for s in &out.manifest.summaries {
                println!(
                    "{}: {} steps, {} epochs, accuracy pass rate {:.3}",
                    s.arm.name(),
                    s.steps,
                    s.total_epochs,
                    s.accuracy_pass_rate
                );
            }
        }
        Command::Train {
            data,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let snapshot = DatasetSnapshot::load(&data)?;
            let parts = split(
                &snapshot,
                &SplitConfig {
                    seed: cfg.seed,
                    ..cfg.split
                },
            )?;
            let train = growsched_core::growing::TrainConfig {
                seed: cfg.seed,
                ..cfg.train
            };
            let (model, outcome) = train_full(snapshot.features_count, &parts, &train, exec)?;
            model.save(&out)?;
            println!(
                "{} after {} epoch(s), {} attempt(s): accuracy {:.4}",
                outcome.mode.name(),
                outcome.epochs_used,
                outcome.attempts_used,
                outcome.accuracy
            );
            if outcome.mode == TrainMode::Failed {
                return Ok(EXIT_TRAINING);
            }
        }
        Command::Evaluate { model, data, out } => {
            let model = GrowingModel::load(&model)?;
            let snapshot = DatasetSnapshot::load(&data)?;
            let metrics = evaluate(&model.classifier, &snapshot, exec)?;
            write_json(out.as_deref(), &metrics)?;
        }
        Command::SchedSim {
            trace,
            policy,
            model,
            oracle,
            config,
            out,
            queue_csv,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let events = read_trace_file(&trace)?;
            let registry = schedsim::replay_registry(&events);
            let sched = SchedulerConfig {
                policy: match policy {
                    PolicyArg::Fifo => Policy::Fifo,
                    PolicyArg::CoAnalyzer => Policy::CoAnalyzer,
                },
                ..cfg.scheduler
            };
            let result = match (model, oracle) {
                (Some(path), false) => {
                    let m = GrowingModel::load(&path)?;
                    let c = ModelClassifier::new(&m.classifier, &registry)?;
                    schedsim::simulate(&events, &sched, Some(&c), &registry, &cfg.grouping)?
                }
                (None, true) => {
                    let c = OracleClassifier { grouping: cfg.grouping };
                    schedsim::simulate(&events, &sched, Some(&c), &registry, &cfg.grouping)?
                }
                (None, false) if sched.policy == Policy::Fifo => {
                    schedsim::simulate(&events, &sched, None, &registry, &cfg.grouping)?
                }
                _ => bail!(UsageError("co-analyzer needs exactly one of --model or --oracle")),
            };
            if let Some(path) = queue_csv {
                let f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                schedsim::write_queue_trace_csv(&result.queue_trace, f)?;
            }
            write_json(out.as_deref(), &result)?;
        }
        Command::InspectModel { model } => {
            let m = GrowingModel::load(&model)?;
            let c = &m.classifier;
            println!("features_count: {}", c.features_count());
            println!("hidden: {}", c.hidden_size());
            println!("classes: {}", c.classes());
            println!("activation: {:?}", c.activation);
            println!("seed: {}", m.seed);
            let norm = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!("layer1 weight norm: {:.6}", norm(&c.layer1.weights));
            println!("layer1 bias norm: {:.6}", norm(&c.layer1.bias));
            println!("layer2 weight norm: {:.6}", norm(&c.layer2.weights));
            println!("layer2 bias norm: {:.6}", norm(&c.layer2.bias));
            for e in &m.extension_history {
                println!("extended at t={}: {} -> {}", e.step_time, e.old_count, e.new_count);
            }
        }
    }
    Ok(0)
}

#[derive(Debug)]
struct UsageError(&'static str);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            };
            ExitCode::from(code)
        }
    }
}
