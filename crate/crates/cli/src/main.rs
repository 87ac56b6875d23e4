mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use patchnce::checkpoint::CheckpointFile;
use patchnce::config::TrainConfig;
use patchnce::data::{Dataset, TaskKind, TaskSpec};
use patchnce::gradcheck::{check_oracle, run_all, CheckOutcome, OracleSuite};
use patchnce::metrics::{evaluate, EvalEncoder, EvalEncoderConfig, EvalOptions};
use patchnce::trainer::{Model, Trainer};
use patchnce::{DType, Error, Scalar};

/// Exit status of a training run stopped by a non-finite value.
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "patchnce", version, about = "Patchwise contrastive losses for paired image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    ThreeModeColor,
    FixedTexture,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset as PNG folders plus a manifest.
    MakeData {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the config seed and PATCHNCE_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset folder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also append a row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck {
        /// Replaces the relative tolerance of every non-exact check.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Compare the vectorized losses with naive loops.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw a training log as an SVG line chart.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first} (see `patchnce --help`)");
            return ExitCode::FAILURE;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            if let Some(Error::Diverged { .. }) = e.downcast_ref::<Error>() {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_DIVERGED);
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::MakeData {
            task,
            n,
            size,
            seed,
            out,
        } => {
            let spec = TaskSpec {
                kind: match task {
                    Task::ThreeModeColor => TaskKind::ThreeModeColor,
                    Task::FixedTexture => TaskKind::FixedTexture,
                },
                size,
                count: n,
                seed,
                ..TaskSpec::default()
            };
            let data = Dataset::from_task(&spec)?;
            data.write_folder(&out, &spec)?;
            log::info!("wrote {n} {} pairs to {}", spec.kind.name(), out.display());
        }
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            match cfg.precision {
                DType::F32 => train::<f32>(cfg, &out, resume.as_deref())?,
                DType::F64 => train::<f64>(cfg, &out, resume.as_deref())?,
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            csv,
        } => {
            let (cfg, model) = Model::<f64>::from_checkpoint(&checkpoint)?;
            let iteration = CheckpointFile::read(&checkpoint)?.get_u64("iteration").unwrap_or(0);
            let data = Dataset::load_png_folder(&data)?;
            let eval = EvalEncoder::train(&data, EvalEncoderConfig::default())?;
            let report = evaluate(&model, &cfg, iteration, &data, &eval, EvalOptions::default())?;
            report.write(&out, csv.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Gradcheck { tolerance, seed } => {
            let start = Instant::now();
            let mut outcomes = run_all(seed)?;
            if let Some(t) = tolerance {
                if !(t > 0.0) {
                    bail!("--tolerance must be positive");
                }
                for o in outcomes.iter_mut().filter(|o| o.tolerance > 0.0) {
                    o.tolerance = t;
                }
            }
            let ok = report_checks(&outcomes);
            println!("{} checks in {:.1} s", outcomes.len(), start.elapsed().as_secs_f64());
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::OracleCheck {
            instances,
            tolerance,
            seed,
        } => {
            let start = Instant::now();
            let suite = OracleSuite {
                instances,
                ..OracleSuite::default()
            };
            let outcomes = check_oracle(seed, suite, tolerance)?;
            let ok = report_checks(&outcomes);
            println!("{instances} instances in {:.2} s", start.elapsed().as_secs_f64());
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { log, out } => {
            let text = std::fs::read_to_string(&log).with_context(|| format!("cannot read log {}", log.display()))?;
            let series = plot::parse_log(&text).with_context(|| format!("{}", log.display()))?;
            std::fs::write(&out, plot::render_svg(&series)?).with_context(|| format!("cannot write {}", out.display()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train<T: Scalar>(cfg: TrainConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let log_every = cfg.log_every;
    let mut trainer = Trainer::<T>::new(cfg)?;
    if let Some(path) = resume {
        trainer.load_checkpoint(path)?;
        log::info!("resumed from {} at iteration {}", path.display(), trainer.iteration());
    }
    trainer.run(out, |rec| {
        if rec.iteration % log_every == 0 {
            let r = &rec.report;
            log::info!(
                "iter {} loss {:.4} retrieval {}",
                rec.iteration,
                r.total,
                r.retrieval_mean().map_or("-".into(), |v| format!("{v:.3}"))
            );
        }
    })?;
    log::info!("finished; log and checkpoints in {}", out.display());
    Ok(())
}

/// Prints one line per check plus the worst offender; true if all passed.
fn report_checks(outcomes: &[CheckOutcome]) -> bool {
    for o in outcomes {
        println!(
            "{} {} rel={:.3e} tol={:.1e}",
            if o.passed() { "PASS" } else { "FAIL" },
            o.name,
            o.max_rel_error,
            o.tolerance
        );
    }
    let worst = outcomes
        .iter()
        .filter(|o| o.tolerance > 0.0)
        .max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance)));
    if let Some(w) = worst {
        println!("worst: {} rel={:.3e}", w.name, w.max_rel_error);
    }
    outcomes.iter().all(CheckOutcome::passed)
}
