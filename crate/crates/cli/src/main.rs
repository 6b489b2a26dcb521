use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nnsql::autodiff::{mlp_program, MlpDims};
use nnsql::denseengine::DenseMatrix;
use nnsql::harness::{
    bench, conformance, encode, load_csv, mem_report, records_to_csv, reference_shim, replicate, synthetic_pixels,
    write_encoded, BenchSweep, CellStatus, CommandExecutor, ConformanceError, ConformanceSetup, Dataset, MemDims, Schema,
    SqlExecutor, SqlTexts,
};
use nnsql::planner::{
    lower, lower_inference, render_one_hot, render_sql, render_weight_init, BatchSpec, LowerConfig, SqlDialect,
    TransformSpec,
};
use nnsql::trainer::{
    accuracy, infer_mlp, load_checkpoint, save_checkpoint, train_mlp, BatchSize, CheckpointHeader, Engine, TrainConfig,
};

#[derive(Parser)]
#[command(name = "nnsql", version, about = "Train and compile small neural networks to SQL")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write img.csv and one_hot.csv for a dataset
    Encode {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write transform, weight-init, training and inference SQL
    EmitSql {
        #[command(flatten)]
        data: OptionalData,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "sql92")]
        dialect: SqlDialect,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train and optionally write a weight checkpoint
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "dense")]
        engine: Engine,
        /// Checkpoint directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on a dataset
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for probabilities.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Throughput and memory sweep
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "iris")]
        schema: Schema,
        #[arg(long)]
        scale: Option<f64>,
        /// Use generated pixel data with this many rows instead of --data
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "20")]
        hidden: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,full")]
        batch: Vec<BatchSize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        replicate: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "relational,dense")]
        engine: Vec<Engine>,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        entry_budget: Option<u64>,
        /// Directory for bench.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entry counts and bytes per matrix of one iteration
    MemReport {
        #[arg(long, default_value_t = 150)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        attrs: usize,
        #[arg(long, default_value_t = 20)]
        hidden: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Directory for mem_report.txt and mem_report.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check emitted SQL against an external engine
    Conformance {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "sql92")]
        dialect: SqlDialect,
        /// Directory holding transform.sql, train.sql and infer.sql
        #[arg(long)]
        sql: Option<PathBuf>,
        /// Command that reads a script on stdin and prints CSV, or `reference`
        #[arg(long)]
        runner: Option<String>,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "iris")]
    schema: Schema,
    /// Feature divisor; 10 for iris and 1 for generic by default
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 1)]
    replicate: usize,
}

#[derive(Args, Clone)]
struct OptionalData {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "iris")]
    schema: Schema,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 1)]
    replicate: usize,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 20)]
    hidden: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value = "full")]
    batch: BatchSize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Data(String),
    Budget(String),
    Conformance(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Budget(_) => 3,
            Failure::Conformance(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Budget(m) | Failure::Conformance(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn usage_err(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn load(args: &DataArgs) -> Result<Dataset, Failure> {
    let ds = load_csv(&args.data, args.schema, args.scale, None).map_err(data_err)?;
    replicate(&ds, args.replicate).map_err(usage_err)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Encode { data, out } => {
            let ds = load(&data)?;
            let (img, one_hot) = encode(&ds).map_err(data_err)?;
            write_encoded(&out, &img, &one_hot).map_err(data_err)?;
            println!("img: {} entries, one_hot: {} entries -> {}", img.len(), one_hot.len(), out.display());
        }
        Cmd::EmitSql { data, model, dialect, out } => {
            let (rows, attrs, classes) = match &data.data {
                Some(path) => {
                    let ds = load_csv(path, data.schema, data.scale, None).map_err(data_err)?;
                    let ds = replicate(&ds, data.replicate).map_err(usage_err)?;
                    (ds.rows(), ds.features.cols(), ds.num_classes)
                }
                None => (150, 4, 3),
            };
            let dims = MlpDims::new(attrs, model.hidden, classes, rows);
            let batch = match model.batch {
                BatchSize::Rows(b) if b > rows => return Err(usage_err(format!("batch {b} exceeds {rows} rows"))),
                BatchSize::Rows(b) if b < rows => Some(BatchSpec { size: b, rows }),
                _ => None,
            };
            let train_dims = MlpDims::new(attrs, model.hidden, classes, batch.map_or(rows, |b| b.size));
            let program = mlp_program(train_dims, model.lr).map_err(usage_err)?;
            let plan = lower(&program, &LowerConfig { iterations: model.iters, learning_rate: model.lr, batch })
                .map_err(usage_err)?;
            let infer = lower_inference(&mlp_program(dims, model.lr).map_err(usage_err)?, true).map_err(usage_err)?;
            let mut spec = TransformSpec::iris();
            spec.num_classes = classes;
            if let Some(path) = &data.data {
                spec.csv_path = path.display().to_string();
            }
            if let Some(s) = data.scale {
                spec.scale = s;
            }
            write(&out.join("transform.sql"), &render_one_hot(&spec))?;
            write(&out.join("weights.sql"), &render_weight_init(&dims))?;
            write(&out.join("train.sql"), &render_sql(&plan, dialect).map_err(usage_err)?)?;
            write(&out.join("infer.sql"), &render_sql(&infer, dialect).map_err(usage_err)?)?;
            println!("wrote transform.sql weights.sql train.sql infer.sql ({}) -> {}", dialect.name(), out.display());
        }
        Cmd::Train { data, model, engine, out } => {
            let ds = load(&data)?;
            let cfg = TrainConfig {
                learning_rate: model.lr,
                iterations: model.iters,
                hidden: model.hidden,
                batch: model.batch,
                seed: model.seed,
                engine,
                track_accuracy: false,
            };
            let r = train_mlp(&ds.features, &ds.labels, ds.num_classes, &cfg).map_err(data_err)?;
            let step = (model.iters / 10).max(1);
            for (i, l) in r.loss.iter().enumerate() {
                if i % step == 0 || i + 1 == r.loss.len() {
                    println!("iter {i:>6}  loss {l:.10}");
                }
            }
            let acc = accuracy(&infer_mlp(&ds.features, &r.w_xh, &r.w_ho).map_err(data_err)?, &ds.labels);
            println!("accuracy {acc:.5}");
            println!("peak entries {} ({} B relational, {} B dense)", r.stats.peak_entries, r.stats.peak_bytes_relational(), r.stats.peak_bytes_dense());
            if let Some(dir) = out {
                let header = CheckpointHeader {
                    inputs: ds.features.cols(),
                    hidden: model.hidden,
                    outputs: ds.num_classes,
                    seed: model.seed,
                    iterations: model.iters,
                };
                save_checkpoint(&dir, &header, &r.w_xh, &r.w_ho).map_err(data_err)?;
                println!("checkpoint -> {}", dir.display());
            }
        }
        Cmd::Infer { data, checkpoint, out } => {
            let ds = load(&data)?;
            let (_, w_xh, w_ho) = load_checkpoint(&checkpoint).map_err(data_err)?;
            let probs = infer_mlp(&ds.features, &w_xh, &w_ho).map_err(data_err)?;
            println!("accuracy {:.5}", accuracy(&probs, &ds.labels));
            if let Some(dir) = out {
                write(&dir.join("probabilities.csv"), &DenseMatrix::to_csv(&probs))?;
            }
        }
        Cmd::Bench { data, schema, scale, synthetic, hidden, batch, replicate: reps, engine, iters, lr, seed, jobs, entry_budget, out } => {
            let base = match (synthetic, &data) {
                (Some(rows), _) => synthetic_pixels(rows, seed).map_err(usage_err)?,
                (None, Some(path)) => load_csv(path, schema, scale, None).map_err(data_err)?,
                (None, None) => return Err(usage_err("bench needs --data or --synthetic")),
            };
            let sweep = BenchSweep {
                hidden,
                batch,
                replicate: reps,
                engines: engine,
                iterations: iters,
                learning_rate: lr,
                seed,
                jobs,
                entry_budget,
            };
            let records = bench(&base, &sweep).map_err(data_err)?;
            let csv = records_to_csv(&records);
            print!("{csv}");
            if let Some(dir) = out {
                write(&dir.join("bench.csv"), &csv)?;
            }
            let skipped = records.iter().filter(|r| r.status == CellStatus::SkippedBudget).count();
            if skipped > 0 {
                return Err(Failure::Budget(format!("{skipped} cell(s) exceeded the entry budget")));
            }
        }
        Cmd::MemReport { rows, attrs, hidden, classes, out } => {
            if [rows, attrs, hidden, classes].contains(&0) {
                return Err(usage_err("all dimensions must be at least 1"));
            }
            let report = mem_report(MemDims { rows, attrs, hidden, classes });
            print!("{}", report.to_text());
            if let Some(dir) = out {
                write(&dir.join("mem_report.txt"), &report.to_text())?;
                write(&dir.join("mem_report.csv"), &report.to_csv())?;
            }
        }
        Cmd::Conformance { data, model, dialect, sql, runner } => {
            let ds = load(&data)?;
            let mut transform = TransformSpec::iris();
            transform.csv_path = data.data.display().to_string();
            transform.num_classes = ds.num_classes;
            if let Some(s) = data.scale {
                transform.scale = s;
            }
            let setup = ConformanceSetup {
                transform,
                hidden: model.hidden,
                iterations: model.iters,
                learning_rate: model.lr,
                seed: model.seed,
                dialect,
            };
            let read = |name: &str| -> Result<Option<String>, Failure> {
                match &sql {
                    Some(dir) => fs::read_to_string(dir.join(name)).map(Some).map_err(|e| data_err(format!("{name}: {e}"))),
                    None => Ok(None),
                }
            };
            let texts = SqlTexts { transform: read("transform.sql")?, train: read("train.sql")?, infer: read("infer.sql")? };
            let shim;
            let command;
            let executor: Option<&dyn SqlExecutor> = match runner.as_deref() {
                None => None,
                Some("reference") => {
                    shim = reference_shim(&ds, &setup).map_err(usage_err)?;
                    Some(&shim)
                }
                Some(cmd) => {
                    command = CommandExecutor::parse(cmd).ok_or_else(|| usage_err("empty --runner"))?;
                    Some(&command)
                }
            };
            let report = match conformance(&ds, &setup, &texts, executor) {
                Ok(r) => r,
                Err(e @ ConformanceError::Disabled(_)) => return Err(Failure::Conformance(e.to_string())),
                Err(e @ ConformanceError::Dialect(_)) => return Err(usage_err(e)),
                Err(e) => return Err(data_err(e)),
            };
            print!("{}", report.to_text());
            if !report.all_passed() {
                return Err(Failure::Conformance("conformance check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
