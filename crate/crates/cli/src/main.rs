use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use quantnet::diagnostics::{diagnose, gradcheck_suite};
use quantnet::train::{
    dataset_dir, discretize_model, evaluate, load_checkpoint, load_dataset, save_checkpoint, Checkpoint, Trainer,
    TrainingConfig,
};
use quantnet::{DType, Error, Scalar};

/// Binary neural network training with a learned meta-quantizer.
#[derive(Debug, Parser)]
#[command(name = "quantnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, summary.json and final.bqf.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// sign_ste, xnor, tanh, quantnet (or none for full precision).
        #[arg(long)]
        binarizer: Option<String>,
        /// Fraction of each layer kept by the dominance diagnostic.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        deterministic: Option<OnOff>,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Replace soft binarized weights by their signs and drop the quantizers.
    Discretize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient probe, top-k dominance and saturation of a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 977)]
        seed: u64,
    },
}

/// Exit status: 1 usage/config, 2 data or format, 3 anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        e if e.is_data_error() => 2,
        _ => 3,
    }
}

fn check_threads() -> Result<(), Error> {
    match std::env::var("BQF_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(()),
            _ => Err(Error::Config(format!("BQF_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match check_threads().and_then(|_| run(cli.command)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Train {
            config,
            out,
            seed,
            binarizer,
            k,
            deterministic,
        } => {
            let mut c = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    TrainingConfig::parse(&text)?
                }
                None => TrainingConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(b) = binarizer {
                c.set("binarizer", &b)?;
            }
            if let Some(k) = k {
                c.dominance_k = k;
            }
            if let Some(d) = deterministic {
                c.deterministic = matches!(d, OnOff::On);
            }
            c.validate()?;
            match c.precision {
                DType::F32 => train::<f32>(c, &out),
                DType::F64 => train::<f64>(c, &out),
            }
        }
        Command::Eval {
            checkpoint,
            split,
            data_dir,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let acc = match ckpt.dtype {
                DType::F32 => eval::<f32>(&ckpt, split, data_dir)?,
                DType::F64 => eval::<f64>(&ckpt, split, data_dir)?,
            };
            println!("accuracy {acc}");
            Ok(0)
        }
        Command::Discretize { checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let fixed = match ckpt.dtype {
                DType::F32 => discretize::<f32>(&ckpt)?,
                DType::F64 => discretize::<f64>(&ckpt)?,
            };
            save_checkpoint(&out, &fixed)?;
            Ok(0)
        }
        Command::Diagnose {
            checkpoint,
            k,
            data_dir,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let report = match ckpt.dtype {
                DType::F32 => diagnose_ckpt::<f32>(&ckpt, k, data_dir)?,
                DType::F64 => diagnose_ckpt::<f64>(&ckpt, k, data_dir)?,
            };
            println!("{report}");
            Ok(0)
        }
        Command::Gradcheck { points, seed } => {
            if points == 0 {
                return Err(Error::Config("--points must be positive".into()));
            }
            let mut failed = 0;
            for (dtype, checks) in [
                ("f64", gradcheck_suite::<f64>(points, seed)?),
                ("f32", gradcheck_suite::<f32>(points, seed)?),
            ] {
                for c in checks {
                    let verdict = if c.passed() { "ok" } else { "FAIL" };
                    println!(
                        "{dtype} {:<24} max_rel_err {:.3e} tol {:.0e} {verdict}",
                        c.name, c.max_rel_error, c.tolerance
                    );
                    failed += usize::from(!c.passed());
                }
            }
            Ok(if failed == 0 { 0 } else { 3 })
        }
    }
}

fn train<T: Scalar>(config: TrainingConfig, out: &Path) -> Result<u8, Error> {
    let data = load_dataset(&config)?;
    let mut trainer = Trainer::<T>::new(config)?;
    let records = trainer.fit(&data, Some(out))?;
    if let Some(r) = records.last() {
        println!(
            "epoch {} test_acc {:.4} test_acc_d {:.4} gap {:.4}",
            r.epoch, r.test_acc, r.test_acc_d, r.gap
        );
    }
    Ok(0)
}

fn checkpoint_config(ckpt: &Checkpoint, data_dir: Option<PathBuf>) -> TrainingConfig {
    let mut c = ckpt.meta.config.clone();
    if let Some(d) = data_dir {
        c.data_dir = Some(d);
    }
    c
}

fn eval<T: Scalar>(ckpt: &Checkpoint, split: Split, data_dir: Option<PathBuf>) -> Result<f64, Error> {
    let config = checkpoint_config(ckpt, data_dir);
    let data = load_dataset(&config)
        .map_err(|e| Error::Format(format!("{} ({e})", dataset_dir(&config).display())))?;
    let mut model = ckpt.to_trainer::<T>()?.model;
    let split = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    evaluate(&mut model, split, None)
}

fn discretize<T: Scalar>(ckpt: &Checkpoint) -> Result<Checkpoint, Error> {
    let mut trainer = ckpt.to_trainer::<T>()?;
    trainer.model = discretize_model(&trainer.model)?;
    Checkpoint::from_trainer(&trainer, &ckpt.meta.metrics_tail)
}

fn diagnose_ckpt<T: Scalar>(ckpt: &Checkpoint, k: Option<f64>, data_dir: Option<PathBuf>) -> Result<String, Error> {
    let config = checkpoint_config(ckpt, data_dir);
    let fraction = k.unwrap_or(config.dominance_k);
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("--k must lie in (0, 1], got {fraction}")));
    }
    let data = load_dataset(&config)?;
    let model = ckpt.to_trainer::<T>()?.model;
    let report = diagnose(&model, &data.train, fraction, config.dominance_batch)?;
    serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))
}
