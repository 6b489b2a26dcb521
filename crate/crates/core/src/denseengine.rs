//! Row-major dense matrices: the numerical reference for the relational
//! engine and the counterpart of an array data type.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::engine::{evaluate_with, MatrixBackend, MatrixError, Values};
use crate::exprgraph::{Activation, ExprGraph, NodeId};
use crate::relengine::TupleStats;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, MatrixError> {
        if rows == 0 || cols == 0 {
            return Err(MatrixError::Empty(rows, cols));
        }
        if values.len() != rows * cols {
            return Err(MatrixError::Length { expected: rows * cols, got: values.len() });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self, MatrixError> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Result<Self, MatrixError> {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self, MatrixError> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MatrixError::Length { expected: cols, got: r.len() });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// 0-based access.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `start..end` (0-based, end exclusive) as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, MatrixError> {
        Self::new(end - start, self.cols, self.values[start * self.cols..end * self.cols].to_vec())
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), MatrixError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MatrixError::Shape {
                op,
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        Ok(())
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self, MatrixError> {
        self.same_shape(other, op)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, values })
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, values: self.values.iter().map(|v| f(*v)).collect() }
    }

    /// Inner products summed in ascending inner index.
    pub fn matmul(&self, other: &Self) -> Result<Self, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::Shape {
                op: "matmul",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let (n, inner, m) = (self.rows, self.cols, other.cols);
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..inner {
                    acc += self.values[i * inner + k] * other.values[k * m + j];
                }
                values[i * m + j] = acc;
            }
        }
        Ok(Self { rows: n, cols: m, values })
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self, MatrixError> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Self) -> Result<Self, MatrixError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, MatrixError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn scalar_mul(&self, c: f64) -> Self {
        self.map_values(|v| c * v)
    }

    pub fn one_minus(&self) -> Self {
        self.map_values(|v| 1.0 - v)
    }

    pub fn map_sigmoid(&self) -> Self {
        self.map(Activation::Sigmoid)
    }

    pub fn map(&self, f: Activation) -> Self {
        self.map_values(|v| f.apply(v))
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                values.push(self.values[i * self.cols + j]);
            }
        }
        Self { rows: self.cols, cols: self.rows, values }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "max_abs_diff shape");
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn mean_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
    }

    /// One matrix row per line, values with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| format_float(*v)).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MatrixError> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| MatrixError::Parse(format!("line {}: {e}", n + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// 1-based column of each row's maximum; ties go to the lowest column.
pub fn argmax_row(m: &DenseMatrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best + 1
        })
        .collect()
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Entries `2u - 1` drawn row-major, so every value lies in [-1, 1).
pub fn init_uniform(prng: &mut Prng, rows: usize, cols: usize) -> Result<DenseMatrix, MatrixError> {
    let values = (0..rows * cols).map(|_| 2.0 * prng.next_f64() - 1.0).collect();
    DenseMatrix::new(rows, cols, values)
}

/// Dense engine as an evaluation backend, with logical materialization
/// accounting in `stats`.
#[derive(Debug, Default)]
pub struct DenseBackend {
    pub stats: TupleStats,
}

impl MatrixBackend for DenseBackend {
    type Matrix = DenseMatrix;

    fn dims(m: &DenseMatrix) -> (usize, usize) {
        (m.rows, m.cols)
    }

    fn matmul(&mut self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        let r = a.matmul(b)?;
        self.stats.record_matmul(a.rows, a.cols, b.cols);
        Ok(r)
    }

    fn hadamard(&mut self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        let r = a.hadamard(b)?;
        self.stats.record_elementwise(r.len(), 2);
        Ok(r)
    }

    fn add(&mut self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        let r = a.add(b)?;
        self.stats.record_elementwise(r.len(), 2);
        Ok(r)
    }

    fn sub(&mut self, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        let r = a.sub(b)?;
        self.stats.record_elementwise(r.len(), 2);
        Ok(r)
    }

    fn scalar_mul(&mut self, c: f64, a: &DenseMatrix) -> DenseMatrix {
        self.stats.record_elementwise(a.len(), 1);
        a.scalar_mul(c)
    }

    fn transpose(&mut self, a: &DenseMatrix) -> DenseMatrix {
        a.transpose()
    }

    fn map(&mut self, f: Activation, a: &DenseMatrix) -> DenseMatrix {
        self.stats.record_elementwise(a.len(), 1);
        a.map(f)
    }
}

/// Evaluates every node of `graph`; each node is computed once.
pub fn evaluate(
    graph: &ExprGraph,
    bindings: &BTreeMap<String, DenseMatrix>,
) -> Result<Values<DenseMatrix>, MatrixError> {
    evaluate_with(&mut DenseBackend::default(), graph, bindings, None)
}

/// Evaluates only what `roots` depend on.
pub fn evaluate_roots(
    graph: &ExprGraph,
    bindings: &BTreeMap<String, DenseMatrix>,
    roots: &[NodeId],
) -> Result<Values<DenseMatrix>, MatrixError> {
    evaluate_with(&mut DenseBackend::default(), graph, bindings, Some(roots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{build_mlp_loss, MlpDims};

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(prng: &mut Prng, r: usize, c: usize) -> DenseMatrix {
        init_uniform(prng, r, c).unwrap()
    }

    #[test]
    fn matmul_two_by_two() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn identity_is_neutral() {
        let a = random(&mut Prng::new(3), 4, 4);
        assert_eq!(a.matmul(&DenseMatrix::identity(4).unwrap()).unwrap(), a);
    }

    #[test]
    fn transpose_of_product() {
        let mut p = Prng::new(9);
        let a = random(&mut p, 5, 7);
        let b = random(&mut p, 7, 3);
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = DenseMatrix::zeros(2, 3).unwrap();
        assert!(a.matmul(&a).is_err());
        assert!(a.hadamard(&DenseMatrix::zeros(3, 2).unwrap()).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_row(&m(&[&[0.0, 0.6, 0.4]])), vec![2]);
        assert_eq!(argmax_row(&m(&[&[0.5, 0.5]])), vec![1]);
        assert_eq!(argmax_row(&m(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]])), vec![3, 1]);
    }

    #[test]
    fn prng_is_deterministic_and_in_range() {
        let a = random(&mut Prng::new(1), 4, 20);
        let b = random(&mut Prng::new(1), 4, 20);
        assert_eq!(a, b);
        let mut p = Prng::new(77);
        for _ in 0..10_000 {
            let v = 2.0 * p.next_f64() - 1.0;
            assert!((-1.0..1.0).contains(&v));
        }
    }

    #[test]
    fn weight_init_consumes_one_draw_per_entry() {
        let mut p = Prng::new(1);
        init_uniform(&mut p, 4, 20).unwrap();
        init_uniform(&mut p, 20, 3).unwrap();
        let mut q = Prng::new(1);
        for _ in 0..140 {
            q.next_u64();
        }
        assert_eq!(p.next_u64(), q.next_u64());
    }

    #[test]
    fn evaluate_counts_each_node_once() {
        let p = build_mlp_loss(MlpDims::new(2, 3, 2, 4)).unwrap();
        let mut bind = BTreeMap::new();
        let mut prng = Prng::new(5);
        bind.insert("x".to_string(), random(&mut prng, 4, 2));
        bind.insert("y_ones".to_string(), random(&mut prng, 4, 2));
        bind.insert("w_xh".to_string(), random(&mut prng, 2, 3));
        bind.insert("w_ho".to_string(), random(&mut prng, 3, 2));
        let v = evaluate(&p.graph, &bind).unwrap();
        assert_eq!(v.evaluated_count(), p.graph.len());
    }

    #[test]
    fn evaluate_zero_network_gives_half() {
        let p = build_mlp_loss(MlpDims::new(1, 1, 1, 1)).unwrap();
        let mut bind = BTreeMap::new();
        for (n, v) in [("x", 0.0), ("y_ones", 0.5), ("w_xh", 0.3), ("w_ho", 0.0)] {
            bind.insert(n.to_string(), DenseMatrix::filled(1, 1, v).unwrap());
        }
        let v = evaluate(&p.graph, &bind).unwrap();
        assert_eq!(v.get(p.var("a_ho").unwrap()).unwrap().get(0, 0), 0.5);
        // a_ho equals y_ones, so the loss is exactly zero
        assert_eq!(v.get(p.loss).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn evaluate_param_alone_and_unbound() {
        let mut g = ExprGraph::new();
        let w = g.param("w").unwrap();
        let a = m(&[&[1.0, 2.0]]);
        let mut bind = BTreeMap::new();
        assert!(matches!(evaluate(&g, &bind), Err(MatrixError::Unbound(_))));
        bind.insert("w".to_string(), a.clone());
        assert_eq!(evaluate(&g, &bind).unwrap().get(w).unwrap(), &a);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let a = random(&mut Prng::new(11), 3, 4);
        assert_eq!(DenseMatrix::from_csv(&a.to_csv()).unwrap(), a);
    }
}
