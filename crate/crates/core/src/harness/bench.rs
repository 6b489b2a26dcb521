use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::trainer::{train_mlp, BatchSize, Engine, TrainConfig, TrainError};

use super::dataset::{replicate, Dataset, DatasetError};

pub const BENCH_HEADER: &str =
    "dataset,engine,hidden,batch,iters,wall_ms,tuples_per_s,peak_entries,peak_bytes_rel,peak_bytes_dense,status";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSweep {
    pub hidden: Vec<usize>,
    pub batch: Vec<BatchSize>,
    pub replicate: Vec<usize>,
    pub engines: Vec<Engine>,
    /// Epochs per cell.
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Cells whose predicted peak exceeds this many entries are skipped.
    pub entry_budget: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    SkippedBudget,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::SkippedBudget => "skipped(budget)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub dataset: String,
    pub engine: Engine,
    pub hidden: usize,
    pub batch: BatchSize,
    pub iterations: usize,
    /// Rows of the (replicated) dataset.
    pub rows: usize,
    pub wall_ms: f64,
    pub tuples_per_second: f64,
    pub peak_entries: u64,
    pub peak_bytes_relational: u64,
    pub peak_bytes_dense: u64,
    pub status: CellStatus,
}

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        match self.status {
            CellStatus::Ok => format!(
                "{},{},{},{},{},{:.3},{:.1},{},{},{},{}",
                self.dataset,
                self.engine,
                self.hidden,
                self.batch,
                self.iterations,
                self.wall_ms,
                self.tuples_per_second,
                self.peak_entries,
                self.peak_bytes_relational,
                self.peak_bytes_dense,
                self.status.as_str()
            ),
            CellStatus::SkippedBudget => format!(
                "{},{},{},{},{},,,{},,,{}",
                self.dataset,
                self.engine,
                self.hidden,
                self.batch,
                self.iterations,
                self.peak_entries,
                self.status.as_str()
            ),
        }
    }
}

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Peak live entries one training run records: the inputs, or the largest
/// product or elementwise step of a chunk of `chunk` rows.
pub fn predicted_peak_entries(rows: usize, chunk: usize, attrs: usize, hidden: usize, classes: usize, iterations: usize) -> u64 {
    let (n, b, m, h, l) = (rows as u64, chunk as u64, attrs as u64, hidden as u64, classes as u64);
    let inputs = n * m + n * l + m * h + h * l;
    if iterations == 0 {
        return inputs;
    }
    let product = |a: u64, k: u64, c: u64| a * k + k * c + a * k * c + a * c;
    [
        inputs,
        product(b, m, h),
        product(b, h, l),
        product(b, l, h),
        product(h, b, l),
        product(m, b, h),
        3 * b * h,
        3 * b * l,
        3 * m * h,
        3 * h * l,
    ]
    .into_iter()
    .max()
    .unwrap_or(0)
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    k: usize,
    engine: Engine,
    hidden: usize,
    batch: BatchSize,
}

/// Runs every (replication, engine, hidden, batch) cell in that nesting
/// order. Cells run in parallel; records come back in cell order.
pub fn bench(base: &Dataset, sweep: &BenchSweep) -> Result<Vec<BenchRecord>, BenchError> {
    let mut datasets = Vec::new();
    for &k in &sweep.replicate {
        datasets.push(replicate(base, k)?);
    }
    let mut cells = Vec::new();
    for &k in &sweep.replicate {
        for &engine in &sweep.engines {
            for &hidden in &sweep.hidden {
                for &batch in &sweep.batch {
                    cells.push(Cell { k, engine, hidden, batch });
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep.jobs)
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let pos = sweep.replicate.iter().position(|&k| k == cell.k).expect("cell from sweep");
                run_cell(&datasets[pos], cell, sweep)
            })
            .collect()
    })
}

fn run_cell(ds: &Dataset, cell: &Cell, sweep: &BenchSweep) -> Result<BenchRecord, BenchError> {
    let rows = ds.rows();
    let predicted = predicted_peak_entries(
        rows,
        cell.batch.rows_for(rows).min(rows),
        ds.features.cols(),
        cell.hidden,
        ds.num_classes,
        sweep.iterations,
    );
    let mut record = BenchRecord {
        dataset: ds.name.clone(),
        engine: cell.engine,
        hidden: cell.hidden,
        batch: cell.batch,
        iterations: sweep.iterations,
        rows,
        wall_ms: 0.0,
        tuples_per_second: 0.0,
        peak_entries: predicted,
        peak_bytes_relational: 0,
        peak_bytes_dense: 0,
        status: CellStatus::SkippedBudget,
    };
    if sweep.entry_budget.is_some_and(|b| predicted > b) {
        return Ok(record);
    }
    let cfg = TrainConfig {
        learning_rate: sweep.learning_rate,
        iterations: sweep.iterations,
        hidden: cell.hidden,
        batch: cell.batch,
        seed: sweep.seed,
        engine: cell.engine,
        track_accuracy: false,
    };
    let start = Instant::now();
    let result = train_mlp(&ds.features, &ds.labels, ds.num_classes, &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    record.wall_ms = secs * 1000.0;
    record.tuples_per_second = (rows * sweep.iterations) as f64 / secs;
    record.peak_entries = result.stats.peak_entries;
    record.peak_bytes_relational = result.stats.peak_bytes_relational();
    record.peak_bytes_dense = result.stats.peak_bytes_dense();
    record.status = CellStatus::Ok;
    Ok(record)
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("thread pool: {0}")]
    Pool(String),
}
