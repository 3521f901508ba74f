use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xfmamba::checks::Scope;
use xfmamba::ssm::ScanStrategy;
use xfmamba::train::{SyntheticSpec, SyntheticTask};
use xfmamba_cli::bench::BenchSpec;
use xfmamba_cli::commands::{self, split_path};
use xfmamba_cli::config::{load_config, Precision, RunConfig};
use xfmamba_cli::{dataset, fsio, Result};

#[derive(Parser)]
#[command(name = "xfmamba", version, about = "Two-view state-space image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Model,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum StrategyArg {
    Sequential,
    Chunked,
    Blelloch,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    XorCrossView,
    SingleViewSufficient,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks; exits 1 if any check fails.
    Gradcheck {
        #[arg(long, value_enum, default_value = "op")]
        scope: ScopeArg,
        /// Model configuration for the model scope (default: micro model).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fault injection: corrupt one backward rule.
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Times scan strategies and checks them against a 64-bit sequential scan.
    ScanBench {
        #[arg(long = "L", value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192])]
        lens: Vec<usize>,
        #[arg(long = "N", value_delimiter = ',', default_values_t = [16usize])]
        states: Vec<usize>,
        #[arg(long = "C", value_delimiter = ',', default_values_t = [8usize])]
        channels: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [StrategyArg::Sequential, StrategyArg::Chunked, StrategyArg::Blelloch])]
        strategies: Vec<StrategyArg>,
        #[arg(long, value_delimiter = ',', default_values_t = [64usize])]
        chunks: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
        /// CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Writes train/val/test `.xfmv` files into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "xor-cross-view")]
        task: TaskArg,
        #[arg(long, default_value_t = 32)]
        img_size: usize,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        blob_sigma: Option<f64>,
        #[arg(long)]
        blob_intensity: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pack image pairs from a CSV manifest (`view1,view2,label,split`)
        /// instead of generating synthetic data.
        #[arg(long)]
        from_images: Option<PathBuf>,
        /// Manifest labels are `|`-separated class sets.
        #[arg(long, requires = "from_images")]
        multilabel: bool,
    },
    /// Trains `runs` models; writes checkpoints, history.csv and metrics.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.xfmv, val.xfmv and test.xfmv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Scores a dataset split with a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the eight fusion ablation rows and writes the table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn with_overrides(mut cfg: RunConfig, runs: Option<usize>, epochs: Option<usize>) -> Result<RunConfig> {
    if let Some(r) = runs {
        cfg.runs = r;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<S: serde::Serialize>(value: &S) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gradcheck {
            scope,
            config,
            out,
            corrupt_op,
        } => {
            let scope = match scope {
                ScopeArg::Op => Scope::Op,
                ScopeArg::Block => Scope::Block,
                ScopeArg::Model => Scope::Model,
            };
            let model = config.map(|p| load_config(&p)).transpose()?.map(|c| c.model());
            let report = commands::gradcheck(scope, model.as_ref(), corrupt_op.as_deref());
            print_json(&report);
            if let Some(p) = out {
                fsio::write_json(&p, &report)?;
            }
            report.verdict()?;
            eprintln!("gradcheck: {} checks passed", report.records.len());
        }
        Command::ScanBench {
            lens,
            states,
            channels,
            strategies,
            chunks,
            workers,
            reps,
            warmup,
            seed,
            dtype,
            csv,
        } => {
            let mut list = Vec::new();
            for s in strategies {
                match s {
                    StrategyArg::Sequential => list.push(ScanStrategy::Sequential),
                    StrategyArg::Chunked => list.extend(chunks.iter().map(|&chunk| ScanStrategy::Chunked { chunk })),
                    StrategyArg::Blelloch => list.push(ScanStrategy::Blelloch),
                }
            }
            let spec = BenchSpec {
                lens,
                states,
                channels,
                strategies: list,
                warmup,
                reps,
                workers,
                seed,
                dtype: match dtype {
                    DtypeArg::F32 => Precision::F32,
                    DtypeArg::F64 => Precision::F64,
                },
            };
            let out = commands::scan_bench(&spec, csv.as_deref())?;
            print!("{}", out.table);
        }
        Command::GenData {
            out,
            task,
            img_size,
            n_train,
            n_val,
            n_test,
            noise_std,
            blob_sigma,
            blob_intensity,
            seed,
            from_images,
            multilabel,
        } => {
            if let Some(manifest) = from_images {
                let [a, b, c] = commands::import_images(&manifest, img_size, multilabel, &out)?;
                eprintln!("packed {a} train, {b} val, {c} test pairs into {}", out.display());
                return Ok(());
            }
            let task = match task {
                TaskArg::XorCrossView => SyntheticTask::XorCrossView,
                TaskArg::SingleViewSufficient => SyntheticTask::SingleViewSufficient,
            };
            let mut spec = SyntheticSpec::new(task, img_size, seed);
            spec.n_train = n_train.unwrap_or(spec.n_train);
            spec.n_val = n_val.unwrap_or(spec.n_val);
            spec.n_test = n_test.unwrap_or(spec.n_test);
            spec.noise_std = noise_std.unwrap_or(spec.noise_std);
            spec.blob_sigma = blob_sigma.unwrap_or(spec.blob_sigma);
            spec.blob_intensity = blob_intensity.unwrap_or(spec.blob_intensity);
            commands::gen_data(&spec, &out)?;
        }
        Command::Train {
            config,
            data,
            out,
            runs,
            epochs,
        } => {
            let cfg = with_overrides(load_config(&config)?, runs, epochs)?;
            let splits = commands::load_splits(&data)?;
            let m = commands::train(&cfg, &splits, &out, &mut |l| {
                eprintln!(
                    "run {} epoch {} loss {:.4} val_auroc {:.4}",
                    l.run, l.epoch, l.train_loss, l.val.macro_auroc
                )
            })?;
            print_json(&m.summary);
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = load_config(&config)?;
            let path = if data.is_dir() { split_path(&data, &split) } else { data };
            let ds = dataset::load(&path)?;
            let report = commands::eval(&cfg, &checkpoint, &ds)?;
            print_json(&report);
            if let Some(p) = out {
                fsio::write_json(&p, &report)?;
            }
        }
        Command::Ablate {
            config,
            data,
            out,
            runs,
            epochs,
        } => {
            let cfg = with_overrides(load_config(&config)?, runs, epochs)?;
            let splits = commands::load_splits(&data)?;
            commands::ablate(
                &cfg,
                &splits,
                &out,
                &mut |e| eprintln!("{:>2} {:<18} auroc {:.4} ± {:.4}", e.row.id, e.row.name, e.mean, e.std),
                &mut |row, l| {
                    eprintln!(
                        "   {} run {} epoch {} loss {:.4} val_auroc {:.4}",
                        row.name, l.run, l.epoch, l.train_loss, l.val.macro_auroc
                    )
                },
            )?;
            print!("{}", String::from_utf8_lossy(&fsio::read(&out.join("ablation.csv"))?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
