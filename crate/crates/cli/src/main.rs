use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use dcmpc::harness::checkpoint::checkpoint_precision;
use dcmpc::harness::{emit_plots, load_checkpoint, oracle_baseline, random_policy_returns, Precision, RunConfig, Trainer};
use dcmpc::planner::write_trace_csv;
use dcmpc::quantizer::{Codebook, FsqConfig};
use dcmpc::{Error, Scalar};

#[derive(Parser)]
#[command(name = "dcmpc", version, about = "Discrete codebook world model with MPPI planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with noise-free planning.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Defaults to the seed stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the per-iteration planner trace of the first episode.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Render return and active-code curves from a metrics file.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Defaults to the directory holding the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print every codebook entry with its index.
    DumpCodebook {
        #[arg(long, value_delimiter = ',', default_value = "5,3")]
        levels: Vec<usize>,
    },
    /// Print the oracle-planner and random-policy returns for a configuration.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::UnknownEnv(_) => 2,
        Error::NumericalAbort(_) => 3,
        _ => 1,
    }
}

fn train<T: Scalar>(cfg: RunConfig, out: &Path) -> dcmpc::Result<()> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let rows = trainer.train(Some(out))?;
    if let Some(last) = rows.iter().rev().find_map(|r| r.eval_return_mean) {
        println!("final eval return {last:.3}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval<T: Scalar>(path: &Path, episodes: usize, seed: Option<u64>, trace: Option<&Path>) -> dcmpc::Result<()> {
    let ckpt = load_checkpoint::<T>(path)?;
    let seed = seed.unwrap_or(ckpt.config.seed);
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let mut rows = Vec::new();
    let result = trainer.evaluate_traced(episodes, seed, trace.map(|_| &mut rows))?;
    if let Some(path) = trace {
        write_trace_csv(&rows, std::fs::File::create(path)?)?;
    }
    println!("mean {:.4} std {:.4} over {} episodes", result.mean, result.std, result.returns.len());
    Ok(())
}

fn run(cli: Cli) -> dcmpc::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            info!("training {} with seed {} into {}", cfg.env, cfg.seed, out.display());
            match cfg.precision {
                Precision::F32 => train::<f32>(cfg, &out),
                Precision::F64 => train::<f64>(cfg, &out),
            }
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            trace,
        } => match checkpoint_precision(&checkpoint)?.as_str() {
            "f32" => eval::<f32>(&checkpoint, episodes, seed, trace.as_deref()),
            "f64" => eval::<f64>(&checkpoint, episodes, seed, trace.as_deref()),
            other => Err(Error::CheckpointVersion(format!("unknown precision `{other}`"))),
        },
        Command::Plot { metrics, out } => {
            let out = out.unwrap_or_else(|| metrics.parent().map(Path::to_path_buf).unwrap_or_default());
            let report = emit_plots(&metrics, &out)?;
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::DumpCodebook { levels } => {
            let cfg = FsqConfig::new(&levels, 1).map_err(|e| Error::Config(e.to_string()))?;
            Codebook::<f64>::new(&cfg)?.dump_csv(std::io::stdout().lock())
        }
        Command::Baseline { config, seed, episodes } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let oracle = oracle_baseline(&cfg, episodes, cfg.seed)?;
            let random = random_policy_returns(&cfg, episodes, cfg.seed)?;
            println!("oracle mean {:.4} std {:.4}", oracle.mean, oracle.std);
            println!("random mean {:.4} std {:.4}", random.mean, random.std);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
