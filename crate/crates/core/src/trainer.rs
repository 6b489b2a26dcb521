//! Gradient-descent drivers: linear regression, and one-hidden-layer network
//! training, inference and accuracy on either engine or through the plan
//! interpreter.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{mlp_program, AutodiffError, GradientProgram, MlpDims, DEFAULT_LEARNING_RATE};
use crate::denseengine::{argmax_row, init_uniform, DenseBackend, DenseMatrix, Prng};
use crate::engine::{evaluate_with, MatrixBackend, MatrixError};
use crate::exprgraph::NodeId;
use crate::planner::{interpret, lower, BatchSpec, LowerConfig, PlanError};
use crate::relengine::{self, RelBackend, RelMatrix, TupleStats};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("{features} feature rows but {labels} labels")]
    RowMismatch { features: usize, labels: usize },
    #[error("batch size {size} must be between 1 and the row count {rows}")]
    BatchSize { size: usize, rows: usize },
    #[error("hidden size must be at least 1")]
    Hidden,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Engine {
    Dense,
    Relational,
    PlanInterpreter,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Dense => "dense",
            Engine::Relational => "relational",
            Engine::PlanInterpreter => "plan",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Engine::Dense),
            "relational" => Ok(Engine::Relational),
            "plan" => Ok(Engine::PlanInterpreter),
            other => Err(format!("unknown engine `{other}` (expected dense, relational or plan)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchSize {
    Full,
    Rows(usize),
}

impl BatchSize {
    /// Rows per chunk for a dataset of `rows` rows.
    pub fn rows_for(self, rows: usize) -> usize {
        match self {
            BatchSize::Full => rows,
            BatchSize::Rows(b) => b,
        }
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Full => f.write_str("full"),
            BatchSize::Rows(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for BatchSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "full" {
            return Ok(BatchSize::Full);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("batch must be `full` or a positive integer, got `{s}`")),
            Ok(b) => Ok(BatchSize::Rows(b)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Full-batch: number of updates. Mini-batch: number of epochs.
    pub iterations: usize,
    pub hidden: usize,
    pub batch: BatchSize,
    pub seed: u64,
    pub engine: Engine,
    /// Record training-set accuracy after every iteration.
    pub track_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            iterations: 10,
            hidden: 20,
            batch: BatchSize::Full,
            seed: 1,
            engine: Engine::Dense,
            track_accuracy: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub w_xh: DenseMatrix,
    pub w_ho: DenseMatrix,
    /// Mean of `|l_ho|` per iteration, over all rows seen in it.
    pub loss: Vec<f64>,
    pub accuracy: Option<Vec<f64>>,
    pub stats: TupleStats,
}

/// Draws `w_xh` (inputs × hidden) and then `w_ho` (hidden × outputs) from
/// one generator.
pub fn init_weights(seed: u64, inputs: usize, hidden: usize, outputs: usize) -> Result<(DenseMatrix, DenseMatrix), MatrixError> {
    let mut prng = Prng::new(seed);
    let w_xh = init_uniform(&mut prng, inputs, hidden)?;
    let w_ho = init_uniform(&mut prng, hidden, outputs)?;
    Ok((w_xh, w_ho))
}

/// Dense one-hot label matrix.
pub fn one_hot_dense(labels: &[usize], num_classes: usize) -> Result<DenseMatrix, MatrixError> {
    relengine::to_dense(&relengine::one_hot(labels, labels.len(), num_classes)?)
}

fn validate(x: &DenseMatrix, labels: &[usize], num_classes: usize, cfg: &TrainConfig) -> Result<(), TrainError> {
    if x.rows() == 0 || labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if x.rows() != labels.len() {
        return Err(TrainError::RowMismatch { features: x.rows(), labels: labels.len() });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, l)| **l >= num_classes) {
        return Err(TrainError::LabelOutOfRange { row: row + 1, label, classes: num_classes });
    }
    if let BatchSize::Rows(b) = cfg.batch {
        if b == 0 || b > x.rows() {
            return Err(TrainError::BatchSize { size: b, rows: x.rows() });
        }
    }
    if cfg.hidden == 0 {
        return Err(TrainError::Hidden);
    }
    Ok(())
}

/// Trains from weights drawn with `cfg.seed`.
pub fn train_mlp(x: &DenseMatrix, labels: &[usize], num_classes: usize, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    validate(x, labels, num_classes, cfg)?;
    let (w_xh, w_ho) = init_weights(cfg.seed, x.cols(), cfg.hidden, num_classes)?;
    train_mlp_from(x, labels, num_classes, cfg, w_xh, w_ho)
}

/// Trains from the given initial weights.
///
/// Rows are split into consecutive chunks of the batch size (the last may be
/// shorter); each chunk gives one update and one iteration is one pass over
/// all chunks. Every engine performs the same floating-point operations in
/// the same order, so results agree bit for bit.
pub fn train_mlp_from(
    x: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    w_xh: DenseMatrix,
    w_ho: DenseMatrix,
) -> Result<TrainResult, TrainError> {
    validate(x, labels, num_classes, cfg)?;
    let y = one_hot_dense(labels, num_classes)?;
    let spec = BatchSpec { size: cfg.batch.rows_for(x.rows()), rows: x.rows() };
    let mut stats = TupleStats::new();
    let inputs = x.len() + y.len() + w_xh.len() + w_ho.len();
    stats.observe(inputs as u64, inputs as u64);

    let mut loss = Vec::with_capacity(cfg.iterations);
    let mut acc = cfg.track_accuracy.then(Vec::new);
    let (mut w_xh, mut w_ho) = (w_xh, w_ho);
    let mut runner = Runner::new(cfg, x, &y, spec)?;
    for _ in 0..cfg.iterations {
        let (sum, count) = runner.epoch(&mut w_xh, &mut w_ho, &mut stats)?;
        loss.push(sum / count as f64);
        if let Some(a) = acc.as_mut() {
            a.push(accuracy(&infer_mlp(x, &w_xh, &w_ho)?, labels));
        }
    }
    Ok(TrainResult { w_xh, w_ho, loss, accuracy: acc, stats })
}

/// Chunked data plus per-chunk-size gradient programs.
struct Runner<'a> {
    cfg: &'a TrainConfig,
    chunks: Vec<(DenseMatrix, DenseMatrix)>,
    programs: BTreeMap<usize, GradientProgram>,
    x: &'a DenseMatrix,
    y: &'a DenseMatrix,
    spec: BatchSpec,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a TrainConfig, x: &'a DenseMatrix, y: &'a DenseMatrix, spec: BatchSpec) -> Result<Self, TrainError> {
        let mut chunks = Vec::new();
        for c in 0..spec.chunks() {
            let (s, e) = spec.range(c);
            chunks.push((x.slice_rows(s, e)?, y.slice_rows(s, e)?));
        }
        Ok(Self { cfg, chunks, programs: BTreeMap::new(), x, y, spec })
    }

    fn program(&mut self, rows: usize) -> Result<&GradientProgram, TrainError> {
        if !self.programs.contains_key(&rows) {
            let dims = MlpDims::new(self.x.cols(), self.cfg.hidden, self.y.cols(), rows);
            self.programs.insert(rows, mlp_program(dims, self.cfg.learning_rate)?);
        }
        Ok(&self.programs[&rows])
    }

    /// One pass over all chunks; returns the summed `|l_ho|` and its count.
    fn epoch(&mut self, w_xh: &mut DenseMatrix, w_ho: &mut DenseMatrix, stats: &mut TupleStats) -> Result<(f64, usize), TrainError> {
        match self.cfg.engine {
            Engine::Dense => {
                let mut backend = DenseBackend::default();
                let out = self.epoch_with(&mut backend, w_xh, w_ho, |m| Ok(m.clone()), |m| Ok(m.clone()), |m| {
                    (m.values().iter().map(|v| v.abs()).sum::<f64>(), m.len())
                })?;
                stats.merge(&backend.stats);
                Ok(out)
            }
            Engine::Relational => {
                let mut backend = RelBackend::default();
                let out = self.epoch_with(
                    &mut backend,
                    w_xh,
                    w_ho,
                    |m| Ok(relengine::from_dense(m)),
                    relengine::to_dense,
                    |m: &RelMatrix| {
                        let sorted = m.sorted_entries();
                        (sorted.iter().map(|e| e.v.abs()).sum::<f64>(), sorted.len())
                    },
                )?;
                stats.merge(&backend.stats);
                Ok(out)
            }
            Engine::PlanInterpreter => self.epoch_plan(w_xh, w_ho, stats),
        }
    }

    fn epoch_with<B: MatrixBackend>(
        &mut self,
        backend: &mut B,
        w_xh: &mut DenseMatrix,
        w_ho: &mut DenseMatrix,
        to_b: impl Fn(&DenseMatrix) -> Result<B::Matrix, MatrixError>,
        from_b: impl Fn(&B::Matrix) -> Result<DenseMatrix, MatrixError>,
        sum_abs: impl Fn(&B::Matrix) -> (f64, usize),
    ) -> Result<(f64, usize), TrainError> {
        let gamma = self.cfg.learning_rate;
        let mut wx = to_b(w_xh)?;
        let mut wo = to_b(w_ho)?;
        let (mut sum, mut count) = (0.0, 0);
        for c in 0..self.chunks.len() {
            let (xc, yc) = (to_b(&self.chunks[c].0)?, to_b(&self.chunks[c].1)?);
            let program = self.program(self.chunks[c].0.rows())?;
            let l_ho = program.var("l_ho").expect("program names l_ho");
            let g_xh = program.grad("w_xh").expect("gradient of w_xh");
            let g_ho = program.grad("w_ho").expect("gradient of w_ho");
            let bindings: BTreeMap<String, B::Matrix> = [
                ("x".to_string(), xc),
                ("y_ones".to_string(), yc),
                ("w_xh".to_string(), wx.clone()),
                ("w_ho".to_string(), wo.clone()),
            ]
            .into();
            let roots: [NodeId; 3] = [l_ho, g_xh, g_ho];
            let mut values = evaluate_with(backend, &program.graph, &bindings, Some(&roots))?;
            let (s, n) = sum_abs(values.get(l_ho).expect("l_ho evaluated"));
            sum += s;
            count += n;
            let gx = values.take(g_xh).expect("gradient evaluated");
            let go = values.take(g_ho).expect("gradient evaluated");
            let step_x = backend.scalar_mul(gamma, &gx);
            let step_o = backend.scalar_mul(gamma, &go);
            wx = backend.sub(&wx, &step_x)?;
            wo = backend.sub(&wo, &step_o)?;
        }
        *w_xh = from_b(&wx)?;
        *w_ho = from_b(&wo)?;
        Ok((sum, count))
    }

    fn epoch_plan(&mut self, w_xh: &mut DenseMatrix, w_ho: &mut DenseMatrix, stats: &mut TupleStats) -> Result<(f64, usize), TrainError> {
        let spec = self.spec;
        let program = self.program(spec.size)?.clone();
        let batch = (spec.size < spec.rows).then_some(spec);
        let plan = lower(&program, &LowerConfig { iterations: 1, learning_rate: self.cfg.learning_rate, batch })?;
        let catalog: BTreeMap<String, RelMatrix> = [
            ("img".to_string(), relengine::from_dense(self.x)),
            ("one_hot".to_string(), relengine::from_dense(self.y)),
            ("w_xh".to_string(), relengine::from_dense(w_xh)),
            ("w_ho".to_string(), relengine::from_dense(w_ho)),
        ]
        .into();
        let out = interpret(&plan, &catalog, stats)?;
        let sum = out.loss.iter().map(|l| l.sum_abs).fold(0.0, |a, b| a + b);
        let count = out.loss.iter().map(|l| l.count).sum();
        *w_xh = relengine::to_dense(&out.weights[0])?;
        *w_ho = relengine::to_dense(&out.weights[1])?;
        Ok((sum, count))
    }
}

/// `sig(sig(x · w_xh) · w_ho)`: class probabilities per row.
pub fn infer_mlp(x: &DenseMatrix, w_xh: &DenseMatrix, w_ho: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
    Ok(x.matmul(w_xh)?.map_sigmoid().matmul(w_ho)?.map_sigmoid())
}

/// Fraction of rows whose highest probability sits at the label's column;
/// ties go to the lowest column. Zero rows give 0.
pub fn accuracy(probabilities: &DenseMatrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_row(probabilities).iter().zip(labels).filter(|(p, l)| **p - 1 == **l).count();
    hits as f64 / labels.len() as f64
}

/// Linear regression `y ≈ a·x + b` from `(1, 1)`.
pub fn gd_linreg(data: &[(f64, f64)], gamma: f64, iterations: usize) -> Result<Vec<(f64, f64)>, TrainError> {
    gd_linreg_from(data, (1.0, 1.0), gamma, iterations)
}

/// Trajectory of `(a, b)` including the start, `iterations + 1` points.
/// Each step moves both coefficients against the averaged gradient of the
/// squared residual.
pub fn gd_linreg_from(
    data: &[(f64, f64)],
    start: (f64, f64),
    gamma: f64,
    iterations: usize,
) -> Result<Vec<(f64, f64)>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = data.len() as f64;
    let mut traj = Vec::with_capacity(iterations + 1);
    let (mut a, mut b) = start;
    traj.push((a, b));
    for _ in 0..iterations {
        let ga = data.iter().map(|(x, y)| 2.0 * x * (a * x + b - y)).sum::<f64>() / n;
        let gb = data.iter().map(|(x, y)| 2.0 * (a * x + b - y)).sum::<f64>() / n;
        a -= gamma * ga;
        b -= gamma * gb;
        traj.push((a, b));
    }
    Ok(traj)
}

/// Header of a weight checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub seed: u64,
    pub iterations: usize,
}

/// Writes `w_xh.csv`, `w_ho.csv` and `checkpoint.txt` into `dir`.
pub fn save_checkpoint(dir: &Path, header: &CheckpointHeader, w_xh: &DenseMatrix, w_ho: &DenseMatrix) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Checkpoint(e.to_string());
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join("w_xh.csv"), w_xh.to_csv()).map_err(io)?;
    fs::write(dir.join("w_ho.csv"), w_ho.to_csv()).map_err(io)?;
    let text = format!(
        "inputs={}\nhidden={}\noutputs={}\nseed={}\niterations={}\n",
        header.inputs, header.hidden, header.outputs, header.seed, header.iterations
    );
    fs::write(dir.join("checkpoint.txt"), text).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointHeader, DenseMatrix, DenseMatrix), TrainError> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", dir.join(name).display())))
    };
    let mut fields = BTreeMap::new();
    for line in read("checkpoint.txt")?.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Checkpoint(format!("malformed line `{line}`")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |k: &str| -> Result<u64, TrainError> {
        fields
            .get(k)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing `{k}`")))?
            .parse::<u64>()
            .map_err(|e| TrainError::Checkpoint(format!("`{k}`: {e}")))
    };
    let header = CheckpointHeader {
        inputs: num("inputs")? as usize,
        hidden: num("hidden")? as usize,
        outputs: num("outputs")? as usize,
        seed: num("seed")?,
        iterations: num("iterations")? as usize,
    };
    let w_xh = DenseMatrix::from_csv(&read("w_xh.csv")?)?;
    let w_ho = DenseMatrix::from_csv(&read("w_ho.csv")?)?;
    if (w_xh.rows(), w_xh.cols(), w_ho.rows(), w_ho.cols()) != (header.inputs, header.hidden, header.hidden, header.outputs) {
        return Err(TrainError::Checkpoint("weight shapes disagree with the header".into()));
    }
    Ok((header, w_xh, w_ho))
}
