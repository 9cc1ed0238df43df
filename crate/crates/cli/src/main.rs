use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sdrop::bench::{bench_suite, write_csv, BenchConfig, BenchRecord};
use sdrop::checkpoint;
use sdrop::trainer::{evaluate, load_corpus, train, EpochRecord, TrainConfig};
use sdrop::verify::{gradcheck, verify_kernels, GradcheckConfig, GRADCHECK_TOLERANCE};
use sdrop::{DropoutMode, Error, ModelParams, Precision, Scalar};

/// LSTM language-model training with structured dropout and compacted GEMMs.
#[derive(Parser)]
#[command(
    name = "sdrop",
    version,
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config dropout mode.
        #[arg(long)]
        mode: Option<DropoutMode>,
        /// Overrides the config precision (f32 or f64).
        #[arg(long)]
        precision: Option<Precision>,
    },
    /// Evaluate a checkpoint on the validation or test split.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config the checkpoint was trained with.
        #[arg(long)]
        config: PathBuf,
        /// Corpus split to score.
        #[arg(long, value_enum, default_value_t = Split::Valid)]
        split: Split,
    },
    /// Time dense against compacted GEMMs over a grid of shapes.
    Bench {
        /// Benchmark grid (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config thread count.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Finite-difference check of every parameter gradient (always f64).
    Gradcheck {
        /// Hidden size.
        #[arg(long, default_value_t = 8)]
        h: usize,
        /// Batch size.
        #[arg(long, default_value_t = 4)]
        b: usize,
        /// Window length.
        #[arg(long, default_value_t = 5)]
        t: usize,
        /// Number of stacked layers.
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Dropout mode whose masks are held fixed during the check.
        #[arg(long, default_value_t = DropoutMode::NrRhSt)]
        mode: DropoutMode,
        /// Seed for parameters, data and masks.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Compare the three compacted kernels with a dense oracle (always f64).
    VerifyKernels {
        /// Random instances per kernel.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Seed for shapes, operands and masks.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn print_epoch(e: &EpochRecord) {
    println!(
        "epoch {:>3}  train {:.4}  valid {:.4}  ppl {:.3}  lr {:.4}  {:.1}s",
        e.epoch, e.train_loss, e.valid_loss, e.valid_ppl, e.lr, e.wall_seconds
    );
}

fn print_record(r: &BenchRecord) {
    println!(
        "{:<7} {:<18} H={:<5} B={:<4} T={:<4} p={:<5} dense {:>12}ns sparse {:>12}ns speedup {:.3} flops {}/{}",
        r.phase.as_str(),
        r.mode.as_str(),
        r.hidden,
        r.batch,
        r.steps,
        r.rate,
        r.wall_ns_dense,
        r.wall_ns_sparse,
        r.speedup,
        r.flops_sparse,
        r.flops_dense
    );
}

fn run_train<T: Scalar>(config: &TrainConfig) -> sdrop::Result<()> {
    let (report, _) = train::<T>(config, print_epoch)?;
    if let (Some(l), Some(p)) = (report.test_loss, report.test_perplexity) {
        println!("test loss {l:.4}  ppl {p:.3}");
    }
    println!("wrote {}", config.out_dir.display());
    Ok(())
}

fn run_eval<T: Scalar>(
    config: &TrainConfig,
    ckpt: &std::path::Path,
    split: Split,
) -> sdrop::Result<()> {
    let params: ModelParams<T> = checkpoint::load(ckpt)?;
    let corpus = load_corpus(&config.corpus_path)?;
    let model = config.model_config(corpus.vocab_size());
    params.validate(&model)?;
    let [_, valid, test] = corpus.split(config.fractions())?;
    let stream = match split {
        Split::Valid => valid,
        Split::Test => test,
    };
    let (loss, ppl) = evaluate(&params, &model, stream, config.batch_size, config.unroll)?;
    println!("loss {loss:.6}  perplexity {ppl:.4}");
    Ok(())
}

fn run_bench<T: Scalar>(config: &BenchConfig) -> sdrop::Result<()> {
    let records = bench_suite::<T>(config, print_record)?;
    write_csv(&records, &config.out)?;
    println!("wrote {}", config.out.display());
    Ok(())
}

fn run(command: Command) -> sdrop::Result<()> {
    match command {
        Command::Train {
            config,
            seed,
            out,
            mode,
            precision,
        } => {
            let mut c = TrainConfig::from_file(&config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(o) = out {
                c.out_dir = o;
            }
            if let Some(m) = mode {
                c.mode = m;
            }
            if let Some(p) = precision {
                c.precision = p;
            }
            match c.precision {
                Precision::Single => run_train::<f32>(&c),
                Precision::Double => run_train::<f64>(&c),
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            config,
            split,
        } => {
            let c = TrainConfig::from_file(&config)?;
            let header = checkpoint::read_header(&std::fs::read(&ckpt)?)?;
            match header.precision {
                Precision::Single => run_eval::<f32>(&c, &ckpt, split),
                Precision::Double => run_eval::<f64>(&c, &ckpt, split),
            }
        }
        Command::Bench { config, threads } => {
            let mut c = BenchConfig::from_file(&config)?;
            if let Some(t) = threads {
                c.threads = t;
            }
            match c.precision {
                Precision::Single => run_bench::<f32>(&c),
                Precision::Double => run_bench::<f64>(&c),
            }
        }
        Command::Gradcheck {
            h,
            b,
            t,
            layers,
            mode,
            seed,
        } => {
            let r = gradcheck(&GradcheckConfig {
                hidden: h,
                batch: b,
                steps: t,
                layers,
                mode,
                seed,
                ..GradcheckConfig::default()
            })?;
            println!(
                "{} parameters checked, max relative error {:.3e}",
                r.params_checked, r.max_rel_err
            );
            if !r.passed() {
                return Err(Error::Verification(format!(
                    "max relative error {:.3e} is not below {GRADCHECK_TOLERANCE:e} (analytic {:e}, numeric {:e})",
                    r.max_rel_err, r.analytic, r.numeric
                )));
            }
            Ok(())
        }
        Command::VerifyKernels { trials, seed } => {
            let r = verify_kernels(trials, seed)?;
            for f in r.failures() {
                eprintln!("failed: {f:?}");
            }
            println!(
                "{} of {} kernel checks passed, max relative error {:.3e}",
                r.passed(),
                r.checks.len(),
                r.max_rel_err()
            );
            if !r.all_passed() {
                return Err(Error::Verification(format!(
                    "{} kernel checks failed",
                    r.checks.len() - r.passed()
                )));
            }
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Verification(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
