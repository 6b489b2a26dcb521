//! Matrices as relations of `(i, j, v)` coordinate tuples.
//!
//! Storage is dense: every `(i, j)` of the declared shape is present, zeros
//! included. A join-based product silently drops contributions from absent
//! tuples, so the density invariant is what makes it correct. Indices are
//! 1-based.
//!
//! A matrix product is a hash join on the inner index followed by a grouped
//! sum; elementwise operations are equi-joins on both indices; transposition
//! renames the indices. Every operation reports what it materializes to a
//! [`TupleStats`] accumulator.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::denseengine::{format_float, DenseMatrix};
use crate::engine::{MatrixBackend, MatrixError};
use crate::exprgraph::Activation;

/// Bytes for one `(i, j, v)` tuple: 8 per index and 8 for the value.
pub const BYTES_PER_ENTRY: u64 = 24;
/// Bytes for one value in array form.
pub const DENSE_BYTES_PER_ENTRY: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub i: usize,
    pub j: usize,
    pub v: f64,
}

impl Entry {
    pub fn new(i: usize, j: usize, v: f64) -> Self {
        Self { i, j, v }
    }
}

/// Materialization counters.
///
/// `peak_entries` is the largest number of entries live at one operation
/// boundary: operands plus result plus, for a product, the join output
/// before aggregation. `peak_dense_entries` counts the same boundary without
/// the join intermediate, i.e. what an array engine holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TupleStats {
    pub joined_tuples: u64,
    pub output_tuples: u64,
    pub peak_entries: u64,
    pub peak_dense_entries: u64,
}

impl TupleStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes_per_entry(&self) -> u64 {
        BYTES_PER_ENTRY
    }

    /// Accounts `(a×b)·(b×c)`.
    pub fn record_matmul(&mut self, a: usize, b: usize, c: usize) {
        let (a, b, c) = (a as u64, b as u64, c as u64);
        let joined = a * b * c;
        self.joined_tuples += joined;
        self.output_tuples += a * c;
        let operands = a * b + b * c;
        self.observe(operands + joined + a * c, operands + a * c);
    }

    /// Accounts an elementwise operation producing `entries` values from
    /// `operands` inputs of the same size.
    pub fn record_elementwise(&mut self, entries: usize, operands: usize) {
        let n = entries as u64;
        self.output_tuples += n;
        let live = n * (operands as u64 + 1);
        self.observe(live, live);
    }

    /// Raises the peaks to at least the given live entry counts.
    pub fn observe(&mut self, relational: u64, dense: u64) {
        self.peak_entries = self.peak_entries.max(relational);
        self.peak_dense_entries = self.peak_dense_entries.max(dense);
    }

    pub fn peak_bytes_relational(&self) -> u64 {
        self.peak_entries * BYTES_PER_ENTRY
    }

    pub fn peak_bytes_dense(&self) -> u64 {
        self.peak_dense_entries * DENSE_BYTES_PER_ENTRY
    }

    pub fn merge(&mut self, other: &TupleStats) {
        self.joined_tuples += other.joined_tuples;
        self.output_tuples += other.output_tuples;
        self.observe(other.peak_entries, other.peak_dense_entries);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Entry>,
}

impl RelMatrix {
    /// Validates that `entries` cover every `(i, j)` exactly once. Entry
    /// order is arbitrary.
    pub fn from_entries(rows: usize, cols: usize, entries: Vec<Entry>) -> Result<Self, MatrixError> {
        if rows == 0 || cols == 0 {
            return Err(MatrixError::Empty(rows, cols));
        }
        let mut seen = vec![false; rows * cols];
        for e in &entries {
            if e.i == 0 || e.j == 0 || e.i > rows || e.j > cols {
                return Err(MatrixError::OutOfBounds { i: e.i, j: e.j, rows, cols });
            }
            let slot = &mut seen[(e.i - 1) * cols + (e.j - 1)];
            if *slot {
                return Err(MatrixError::Duplicate { i: e.i, j: e.j });
            }
            *slot = true;
        }
        if entries.len() != rows * cols {
            return Err(MatrixError::Missing { missing: rows * cols - entries.len(), total: rows * cols });
        }
        Ok(Self { rows, cols, entries })
    }

    fn from_sorted(rows: usize, cols: usize, entries: Vec<Entry>) -> Self {
        debug_assert_eq!(entries.len(), rows * cols);
        Self { rows, cols, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries ordered by `(i, j)`.
    pub fn sorted_entries(&self) -> Vec<Entry> {
        let mut e = self.entries.clone();
        e.sort_by_key(|e| (e.i, e.j));
        e
    }

    /// Value at 1-based `(i, j)`.
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.i == i && e.j == j).map(|e| e.v)
    }

    /// Relational counterpart of the `i,j,v` CSV: header, rows sorted by
    /// `(i, j)`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,v\n");
        for e in self.sorted_entries() {
            let _ = writeln!(out, "{},{},{}", e.i, e.j, format_float(e.v));
        }
        out
    }

    /// Parses an `i,j,v` dump; the shape is the largest index seen.
    pub fn from_csv(text: &str) -> Result<Self, MatrixError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (n, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| MatrixError::Parse(e.to_string()))?;
            let field = |k: usize| {
                rec.get(k)
                    .map(str::trim)
                    .ok_or_else(|| MatrixError::Parse(format!("record {}: missing field {k}", n + 1)))
            };
            let bad = |e: &dyn std::fmt::Display| MatrixError::Parse(format!("record {}: {e}", n + 1));
            let i = field(0)?.parse::<usize>().map_err(|e| bad(&e))?;
            let j = field(1)?.parse::<usize>().map_err(|e| bad(&e))?;
            let v = field(2)?.parse::<f64>().map_err(|e| bad(&e))?;
            entries.push(Entry::new(i, j, v));
        }
        let rows = entries.iter().map(|e| e.i).max().unwrap_or(0);
        let cols = entries.iter().map(|e| e.j).max().unwrap_or(0);
        Self::from_entries(rows, cols, entries)
    }
}

pub fn from_dense(d: &DenseMatrix) -> RelMatrix {
    let mut entries = Vec::with_capacity(d.len());
    for i in 0..d.rows() {
        for (j, v) in d.row(i).iter().enumerate() {
            entries.push(Entry::new(i + 1, j + 1, *v));
        }
    }
    RelMatrix::from_sorted(d.rows(), d.cols(), entries)
}

/// Rebuilds the array form ordered by `i`, then `j`.
pub fn to_dense(r: &RelMatrix) -> Result<DenseMatrix, MatrixError> {
    let checked = RelMatrix::from_entries(r.rows, r.cols, r.entries.clone())?;
    let values = checked.sorted_entries().into_iter().map(|e| e.v).collect();
    DenseMatrix::new(r.rows, r.cols, values)
}

/// Index roles of an operand: transposed operands read `i` from `j` and the
/// other way round. No tuples are copied.
fn roles(e: &Entry, transposed: bool) -> (usize, usize) {
    if transposed {
        (e.j, e.i)
    } else {
        (e.i, e.j)
    }
}

fn role_dims(m: &RelMatrix, transposed: bool) -> (usize, usize) {
    if transposed {
        (m.cols, m.rows)
    } else {
        (m.rows, m.cols)
    }
}

/// `left · right` on the given index roles: hash join on the inner index,
/// then sum per `(row, col)` group. Each group sums in ascending inner index.
pub fn join_aggregate(
    left: &RelMatrix,
    left_transposed: bool,
    right: &RelMatrix,
    right_transposed: bool,
    stats: &mut TupleStats,
) -> Result<RelMatrix, MatrixError> {
    let (a, b) = role_dims(left, left_transposed);
    let (b2, c) = role_dims(right, right_transposed);
    if b != b2 {
        return Err(MatrixError::Shape { op: "matmul", left: (a, b), right: (b2, c) });
    }
    // build side: right, keyed by its inner index
    let mut build: HashMap<usize, Vec<(usize, f64)>> = HashMap::with_capacity(b);
    for e in &right.entries {
        let (k, j) = roles(e, right_transposed);
        build.entry(k).or_default().push((j, e.v));
    }
    // probe side in (row, inner) order fixes the summation order per group
    let mut probe: Vec<(usize, usize, f64)> = left
        .entries
        .iter()
        .map(|e| {
            let (i, k) = roles(e, left_transposed);
            (i, k, e.v)
        })
        .collect();
    probe.sort_unstable_by_key(|(i, k, _)| (*i, *k));

    let mut groups = vec![0.0f64; a * c];
    let mut joined = 0u64;
    for (i, k, v) in probe {
        if let Some(bucket) = build.get(&k) {
            for (j, w) in bucket {
                groups[(i - 1) * c + (j - 1)] += v * w;
                joined += 1;
            }
        }
    }
    debug_assert_eq!(joined, (a * b * c) as u64);
    stats.record_matmul(a, b, c);

    let entries = groups
        .into_iter()
        .enumerate()
        .map(|(idx, v)| Entry::new(idx / c + 1, idx % c + 1, v))
        .collect();
    Ok(RelMatrix::from_sorted(a, c, entries))
}

/// Equi-join on both indices (after roles), projecting `f(left.v, right.v)`.
/// Output follows the left operand's tuple order.
pub fn join_project(
    left: &RelMatrix,
    left_transposed: bool,
    right: &RelMatrix,
    right_transposed: bool,
    stats: &mut TupleStats,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<RelMatrix, MatrixError> {
    let (rows, cols) = role_dims(left, left_transposed);
    let rdims = role_dims(right, right_transposed);
    if (rows, cols) != rdims {
        return Err(MatrixError::Shape { op, left: (rows, cols), right: rdims });
    }
    let mut index = vec![usize::MAX; rows * cols];
    for (pos, e) in right.entries.iter().enumerate() {
        let (i, j) = roles(e, right_transposed);
        index[(i - 1) * cols + (j - 1)] = pos;
    }
    let mut entries: Vec<Entry> = left
        .entries
        .iter()
        .map(|e| {
            let (i, j) = roles(e, left_transposed);
            let rv = right.entries[index[(i - 1) * cols + (j - 1)]].v;
            Entry::new(i, j, f(e.v, rv))
        })
        .collect();
    if left_transposed {
        entries.sort_by_key(|e| (e.i, e.j));
    }
    stats.record_elementwise(entries.len(), 2);
    Ok(RelMatrix::from_sorted(rows, cols, entries))
}

/// Single-relation projection `f(v)` with optional index swap.
pub fn project(m: &RelMatrix, transposed: bool, stats: &mut TupleStats, f: impl Fn(f64) -> f64) -> RelMatrix {
    let (rows, cols) = role_dims(m, transposed);
    let mut entries: Vec<Entry> = m
        .entries
        .iter()
        .map(|e| {
            let (i, j) = roles(e, transposed);
            Entry::new(i, j, f(e.v))
        })
        .collect();
    if transposed {
        entries.sort_by_key(|e| (e.i, e.j));
    }
    stats.record_elementwise(entries.len(), 1);
    RelMatrix::from_sorted(rows, cols, entries)
}

pub fn matmul(m: &RelMatrix, n: &RelMatrix, stats: &mut TupleStats) -> Result<RelMatrix, MatrixError> {
    join_aggregate(m, false, n, false, stats)
}

pub fn hadamard(m: &RelMatrix, n: &RelMatrix, stats: &mut TupleStats) -> Result<RelMatrix, MatrixError> {
    join_project(m, false, n, false, stats, "hadamard", |a, b| a * b)
}

pub fn add(m: &RelMatrix, n: &RelMatrix, stats: &mut TupleStats) -> Result<RelMatrix, MatrixError> {
    join_project(m, false, n, false, stats, "add", |a, b| a + b)
}

pub fn sub(m: &RelMatrix, n: &RelMatrix, stats: &mut TupleStats) -> Result<RelMatrix, MatrixError> {
    join_project(m, false, n, false, stats, "sub", |a, b| a - b)
}

pub fn scalar_mul(c: f64, m: &RelMatrix, stats: &mut TupleStats) -> RelMatrix {
    project(m, false, stats, |v| c * v)
}

pub fn one_minus(m: &RelMatrix, stats: &mut TupleStats) -> RelMatrix {
    project(m, false, stats, |v| 1.0 - v)
}

pub fn map_sigmoid(m: &RelMatrix, stats: &mut TupleStats) -> RelMatrix {
    map(Activation::Sigmoid, m, stats)
}

pub fn map(f: Activation, m: &RelMatrix, stats: &mut TupleStats) -> RelMatrix {
    project(m, false, stats, |v| f.apply(v))
}

/// `(i, j, v) → (j, i, v)`.
pub fn transpose(m: &RelMatrix) -> RelMatrix {
    let mut entries: Vec<Entry> = m.entries.iter().map(|e| Entry::new(e.j, e.i, e.v)).collect();
    entries.sort_by_key(|e| (e.i, e.j));
    RelMatrix::from_sorted(m.cols, m.rows, entries)
}

/// Dense one-hot encoding: row `r` (1-based) has a 1 in column
/// `labels[r - 1] + 1` and zeros elsewhere.
pub fn one_hot(labels: &[usize], num_rows: usize, num_classes: usize) -> Result<RelMatrix, MatrixError> {
    if labels.len() != num_rows {
        return Err(MatrixError::Length { expected: num_rows, got: labels.len() });
    }
    if num_rows == 0 || num_classes == 0 {
        return Err(MatrixError::Empty(num_rows, num_classes));
    }
    let mut entries = Vec::with_capacity(num_rows * num_classes);
    for (r, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(MatrixError::LabelOutOfRange { row: r + 1, label, classes: num_classes });
        }
        for j in 1..=num_classes {
            entries.push(Entry::new(r + 1, j, if j == label + 1 { 1.0 } else { 0.0 }));
        }
    }
    Ok(RelMatrix::from_sorted(num_rows, num_classes, entries))
}

pub fn footprint_bytes(m: &RelMatrix) -> u64 {
    (m.rows * m.cols) as u64 * BYTES_PER_ENTRY
}

pub fn dense_footprint_bytes(m: &RelMatrix) -> u64 {
    (m.rows * m.cols) as u64 * DENSE_BYTES_PER_ENTRY
}

/// Relational engine as an evaluation backend.
#[derive(Debug, Default)]
pub struct RelBackend {
    pub stats: TupleStats,
}

impl MatrixBackend for RelBackend {
    type Matrix = RelMatrix;

    fn dims(m: &RelMatrix) -> (usize, usize) {
        (m.rows, m.cols)
    }

    fn matmul(&mut self, a: &RelMatrix, b: &RelMatrix) -> Result<RelMatrix, MatrixError> {
        matmul(a, b, &mut self.stats)
    }

    fn hadamard(&mut self, a: &RelMatrix, b: &RelMatrix) -> Result<RelMatrix, MatrixError> {
        hadamard(a, b, &mut self.stats)
    }

    fn add(&mut self, a: &RelMatrix, b: &RelMatrix) -> Result<RelMatrix, MatrixError> {
        add(a, b, &mut self.stats)
    }

    fn sub(&mut self, a: &RelMatrix, b: &RelMatrix) -> Result<RelMatrix, MatrixError> {
        sub(a, b, &mut self.stats)
    }

    fn scalar_mul(&mut self, c: f64, a: &RelMatrix) -> RelMatrix {
        scalar_mul(c, a, &mut self.stats)
    }

    fn transpose(&mut self, a: &RelMatrix) -> RelMatrix {
        transpose(a)
    }

    fn map(&mut self, f: Activation, a: &RelMatrix) -> RelMatrix {
        map(f, a, &mut self.stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denseengine::{init_uniform, Prng};

    fn rel(rows: &[&[f64]]) -> RelMatrix {
        from_dense(&DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
    }

    #[test]
    fn matmul_two_by_two_against_triple_loop() {
        let a = [[1.0, 2.0], [3.0, 4.0]];
        let b = [[5.0, 6.0], [7.0, 8.0]];
        let mut expect = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    expect[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        assert_eq!(expect, [[19.0, 22.0], [43.0, 50.0]]);
        let mut stats = TupleStats::new();
        let r = matmul(&rel(&[&a[0], &a[1]]), &rel(&[&b[0], &b[1]]), &mut stats).unwrap();
        assert_eq!(to_dense(&r).unwrap().values(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(stats.joined_tuples, 8);
        assert_eq!(stats.output_tuples, 4);
    }

    #[test]
    fn identity_product() {
        let a = rel(&[&[0.3, -1.5], &[2.0, 7.0]]);
        let i2 = rel(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = matmul(&i2, &a, &mut TupleStats::new()).unwrap();
        assert_eq!(r, a);
    }

    #[test]
    fn accounting_is_exact() {
        let mut p = Prng::new(4);
        let a = from_dense(&init_uniform(&mut p, 3, 5).unwrap());
        let b = from_dense(&init_uniform(&mut p, 5, 2).unwrap());
        let mut stats = TupleStats::new();
        matmul(&a, &b, &mut stats).unwrap();
        assert_eq!(stats.joined_tuples, 30);
        assert_eq!(stats.output_tuples, 6);
        assert!(stats.peak_entries >= stats.output_tuples);
        assert_eq!(stats.bytes_per_entry(), 24);
    }

    #[test]
    fn elementwise_examples() {
        let mut s = TupleStats::new();
        let h = hadamard(&rel(&[&[1.0, 2.0]]), &rel(&[&[3.0, 4.0]]), &mut s).unwrap();
        assert_eq!(to_dense(&h).unwrap().values(), &[3.0, 8.0]);
        let a = rel(&[&[1.5, -2.0], &[0.25, 9.0]]);
        let ones = rel(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(hadamard(&a, &ones, &mut s).unwrap(), a);
        let z = sub(&a, &a, &mut s).unwrap();
        assert!(to_dense(&z).unwrap().values().iter().all(|v| *v == 0.0));
        assert!(add(&a, &rel(&[&[1.0]]), &mut s).is_err());
    }

    #[test]
    fn transpose_examples() {
        let a = rel(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(to_dense(&transpose(&a)).unwrap().values(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(transpose(&transpose(&a)), a);
        let w = from_dense(&DenseMatrix::zeros(20, 3).unwrap());
        let t = transpose(&w);
        assert_eq!((t.rows(), t.cols()), (3, 20));
    }

    #[test]
    fn sigmoid_values() {
        let mut s = TupleStats::new();
        let r = map_sigmoid(&rel(&[&[0.0, -(3.0f64.ln())]]), &mut s);
        let d = to_dense(&r).unwrap();
        assert_eq!(d.get(0, 0), 0.5);
        assert!((d.get(0, 1) - 0.25).abs() < 1e-15);
        for x in [-3.0, -0.2, 0.7, 5.0] {
            let v = to_dense(&map_sigmoid(&rel(&[&[x, -x]]), &mut s)).unwrap();
            assert!((v.get(0, 0) + v.get(0, 1) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_examples() {
        let r = one_hot(&[0, 2], 2, 3).unwrap();
        let expect = [(1, 1, 1.0), (1, 2, 0.0), (1, 3, 0.0), (2, 1, 0.0), (2, 2, 0.0), (2, 3, 1.0)];
        let got: Vec<(usize, usize, f64)> = r.sorted_entries().iter().map(|e| (e.i, e.j, e.v)).collect();
        assert_eq!(got, expect);
        assert_eq!(one_hot(&[0], 1, 1).unwrap().entries(), &[Entry::new(1, 1, 1.0)]);
        let d = to_dense(&one_hot(&[1, 1, 0], 3, 2).unwrap()).unwrap();
        assert_eq!(crate::denseengine::argmax_row(&d), vec![2, 2, 1]);
        assert!(matches!(one_hot(&[3], 1, 3), Err(MatrixError::LabelOutOfRange { .. })));
    }

    #[test]
    fn to_dense_orders_shuffled_entries() {
        let shuffled = vec![
            Entry::new(2, 2, 22.0),
            Entry::new(1, 2, 12.0),
            Entry::new(2, 1, 21.0),
            Entry::new(1, 1, 11.0),
        ];
        let r = RelMatrix::from_entries(2, 2, shuffled).unwrap();
        assert_eq!(to_dense(&r).unwrap().values(), &[11.0, 12.0, 21.0, 22.0]);
    }

    #[test]
    fn non_dense_sets_are_rejected() {
        let missing = vec![Entry::new(1, 1, 1.0)];
        assert!(matches!(RelMatrix::from_entries(1, 2, missing), Err(MatrixError::Missing { .. })));
        let dup = vec![Entry::new(1, 1, 1.0), Entry::new(1, 1, 2.0)];
        assert!(matches!(RelMatrix::from_entries(1, 2, dup), Err(MatrixError::Duplicate { .. })));
    }

    #[test]
    fn singleton_conversion_and_footprint() {
        let d = DenseMatrix::filled(1, 1, 4.25).unwrap();
        let r = from_dense(&d);
        assert_eq!(r.entries(), &[Entry::new(1, 1, 4.25)]);
        assert_eq!(footprint_bytes(&r), 24);
        assert_eq!(dense_footprint_bytes(&r), 8);
    }

    #[test]
    fn thousand_square_footprint_ratio() {
        let bytes_rel = 1000u64 * 1000 * BYTES_PER_ENTRY;
        let bytes_dense = 1000u64 * 1000 * DENSE_BYTES_PER_ENTRY;
        assert_eq!(bytes_rel, 24_000_000);
        assert_eq!(bytes_dense, 8_000_000);
        assert_eq!(bytes_rel / bytes_dense, 3);
    }

    #[test]
    fn csv_round_trip() {
        let a = from_dense(&init_uniform(&mut Prng::new(8), 3, 2).unwrap());
        let text = a.to_csv();
        assert!(text.starts_with("i,j,v\n1,1,"));
        assert_eq!(RelMatrix::from_csv(&text).unwrap(), a);
    }

    #[test]
    fn role_swapped_join_matches_explicit_transpose() {
        let mut p = Prng::new(12);
        let x = from_dense(&init_uniform(&mut p, 6, 4).unwrap());
        let d = from_dense(&init_uniform(&mut p, 6, 3).unwrap());
        let mut s = TupleStats::new();
        let fused = join_aggregate(&x, true, &d, false, &mut s).unwrap();
        let explicit = matmul(&transpose(&x), &d, &mut s).unwrap();
        assert_eq!(fused, explicit);
    }
}
