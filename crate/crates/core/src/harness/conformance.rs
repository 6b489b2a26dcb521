//! Runs emitted SQL on an external engine and compares the rows it returns
//! with the plan interpreter.
//!
//! An executor receives schema DDL, data-load statements and one query, and
//! answers with CSV (header row first). [`CommandExecutor`] pipes the script
//! into any program; [`ReferenceShim`] answers from the interpreter for the
//! exact texts it was registered with, so the contract itself can be tested.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};

use thiserror::Error;

use crate::autodiff::{mlp_program, AutodiffError, MlpDims};
use crate::denseengine::format_float;
use crate::engine::MatrixError;
use crate::planner::{
    interpret, lower, lower_inference, render_one_hot, render_sql, LowerConfig, PlanError, QueryPlan, SqlDialect,
    TransformSpec,
};
use crate::relengine::{Entry, RelMatrix, TupleStats};
use crate::trainer::init_weights;

use super::dataset::{encode, load_csv, Dataset, DatasetError, Schema};

pub const TOLERANCE: f64 = 1e-6;

/// Reads both encoded relations back after the transformation script.
pub const TRANSFORM_QUERY: &str =
    "select 'img' as t, i, j, v from img union all select 'one_hot', i, j, v from one_hot order by 1, 2, 3;\n";

const TABLES: [&str; 6] = ["iris", "img", "one_hot", "w_xh", "w_ho", "w"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRequest {
    pub schema: String,
    pub load: String,
    pub query: String,
}

impl ExecRequest {
    pub fn script(&self) -> String {
        format!("{}{}{}", self.schema, self.load, self.query)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("executor unavailable: {0}")]
    Unavailable(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("execution error: {0}")]
    Execution(String),
}

pub trait SqlExecutor: Sync {
    fn name(&self) -> String;
    /// Result rows as CSV with a header line.
    fn execute(&self, request: &ExecRequest) -> Result<String, ExecError>;
}

/// Feeds the whole script to a program's stdin and reads CSV from stdout.
#[derive(Debug, Clone)]
pub struct CommandExecutor {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandExecutor {
    /// Splits a command line on whitespace.
    pub fn parse(command: &str) -> Option<Self> {
        let mut parts = command.split_whitespace().map(String::from);
        let program = parts.next()?;
        Some(Self { program, args: parts.collect() })
    }
}

impl SqlExecutor for CommandExecutor {
    fn name(&self) -> String {
        std::iter::once(self.program.as_str()).chain(self.args.iter().map(String::as_str)).collect::<Vec<_>>().join(" ")
    }

    fn execute(&self, request: &ExecRequest) -> Result<String, ExecError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ExecError::Unavailable(format!("{}: {e}", self.program)))?;
        if let Some(mut stdin) = child.stdin.take() {
            stdin.write_all(request.script().as_bytes()).map_err(|e| ExecError::Execution(e.to_string()))?;
        }
        let out = child.wait_with_output().map_err(|e| ExecError::Execution(e.to_string()))?;
        if !out.status.success() {
            return Err(ExecError::Execution(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        String::from_utf8(out.stdout).map_err(|e| ExecError::Execution(e.to_string()))
    }
}

#[derive(Debug, Clone)]
enum Registered {
    Transform(TransformSpec),
    Plan(QueryPlan),
}

/// Answers registered statement texts with the interpreter; anything else is
/// a parse error. Data arrives only through the load statements.
#[derive(Debug, Clone, Default)]
pub struct ReferenceShim {
    transforms: Vec<(String, TransformSpec)>,
    queries: Vec<(String, QueryPlan)>,
}

impl ReferenceShim {
    pub fn register_plan(&mut self, plan: &QueryPlan, dialect: SqlDialect) -> Result<(), PlanError> {
        self.queries.push((render_sql(plan, dialect)?, plan.clone()));
        Ok(())
    }

    pub fn register_transform(&mut self, spec: &TransformSpec) {
        self.transforms.push((render_one_hot(spec), spec.clone()));
    }

    fn lookup(&self, request: &ExecRequest) -> Result<Registered, ExecError> {
        if let Some((_, spec)) = self.transforms.iter().find(|(t, _)| *t == request.load) {
            if request.query != TRANSFORM_QUERY {
                return Err(ExecError::Parse("unrecognized query after transformation".into()));
            }
            return Ok(Registered::Transform(spec.clone()));
        }
        self.queries
            .iter()
            .find(|(t, _)| *t == request.query)
            .map(|(_, p)| Registered::Plan(p.clone()))
            .ok_or_else(|| ExecError::Parse("query text not recognized by the reference shim".into()))
    }
}

impl SqlExecutor for ReferenceShim {
    fn name(&self) -> String {
        "reference-shim".to_string()
    }

    fn execute(&self, request: &ExecRequest) -> Result<String, ExecError> {
        match self.lookup(request)? {
            Registered::Transform(spec) => {
                let path = copy_path(&request.load).ok_or_else(|| ExecError::Parse("no copy statement".into()))?;
                let schema = Schema::Generic { label_col: spec.attributes.len() };
                let ds = load_csv(Path::new(&path), schema, Some(spec.scale), Some(spec.num_classes))
                    .map_err(|e| ExecError::Execution(e.to_string()))?;
                let (img, one_hot) = encode(&ds).map_err(|e| ExecError::Execution(e.to_string()))?;
                let mut out = String::from("t,i,j,v\n");
                for (t, m) in [("img", &img), ("one_hot", &one_hot)] {
                    for e in m.sorted_entries() {
                        let _ = writeln!(out, "{t},{},{},{}", e.i, e.j, format_float(e.v));
                    }
                }
                Ok(out)
            }
            Registered::Plan(plan) => {
                let tables = parse_inserts(&request.load)?;
                let mut catalog = BTreeMap::new();
                let mut weights: Vec<Vec<f64>> = Vec::new();
                for (name, rows) in tables {
                    if name == "w" {
                        weights.extend(rows);
                    } else {
                        catalog.insert(name, relation(&rows)?);
                    }
                }
                let iter = weights.iter().map(|r| r[0] as i64).max().unwrap_or(0);
                if !weights.is_empty() {
                    for (id, param) in plan.params.iter().enumerate() {
                        let sel: Vec<Vec<f64>> = weights
                            .iter()
                            .filter(|r| r[0] as i64 == iter && r[1] as usize == id)
                            .map(|r| r[2..].to_vec())
                            .collect();
                        catalog.insert(param.clone(), relation(&sel)?);
                    }
                }
                let result = interpret(&plan, &catalog, &mut TupleStats::new())
                    .map_err(|e| ExecError::Execution(e.to_string()))?;
                let mut out = String::new();
                match result.accuracy {
                    Some(acc) => {
                        out.push_str("iter,accuracy\n");
                        if acc > 0.0 {
                            let _ = writeln!(out, "{iter},{}", format_float(acc));
                        }
                    }
                    None => {
                        let bound = plan.recursive_loop().map_or(0, |l| l.3);
                        out.push_str("iter,id,i,j,v\n");
                        for (id, w) in result.weights.iter().enumerate() {
                            for e in w.sorted_entries() {
                                let _ = writeln!(out, "{bound},{id},{},{},{}", e.i, e.j, format_float(e.v));
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

fn copy_path(load: &str) -> Option<String> {
    let line = load.lines().find(|l| l.trim_start().starts_with("copy "))?;
    let start = line.find('\'')? + 1;
    let end = start + line[start..].find('\'')?;
    Some(line[start..end].to_string())
}

fn relation(rows: &[Vec<f64>]) -> Result<RelMatrix, ExecError> {
    let entries: Vec<Entry> = rows.iter().map(|r| Entry::new(r[0] as usize, r[1] as usize, r[2])).collect();
    let rmax = entries.iter().map(|e| e.i).max().unwrap_or(0);
    let cmax = entries.iter().map(|e| e.j).max().unwrap_or(0);
    RelMatrix::from_entries(rmax, cmax, entries).map_err(|e| ExecError::Execution(e.to_string()))
}

type Rows = Vec<Vec<f64>>;

/// Parses the `insert into t values (..),(..);` statements written by
/// [`load_statements`].
fn parse_inserts(load: &str) -> Result<Vec<(String, Rows)>, ExecError> {
    let mut tables = Vec::new();
    for stmt in load.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let rest = stmt
            .strip_prefix("insert into ")
            .ok_or_else(|| ExecError::Parse(format!("unexpected load statement `{}`", stmt.lines().next().unwrap_or(""))))?;
        let (name, values) =
            rest.split_once(" values").ok_or_else(|| ExecError::Parse(format!("missing values for `{rest}`")))?;
        let mut rows = Vec::new();
        for tuple in values.split("),").map(|t| t.trim().trim_start_matches('(').trim_end_matches(')')) {
            if tuple.is_empty() {
                continue;
            }
            let row = tuple
                .split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|_| ExecError::Parse(format!("bad value `{f}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        tables.push((name.trim().to_string(), rows));
    }
    Ok(tables)
}

fn schema_ddl() -> String {
    let mut out = String::new();
    for t in TABLES {
        let _ = writeln!(out, "drop table if exists {t};");
    }
    for t in ["img", "w_xh", "w_ho"] {
        let _ = writeln!(out, "create table {t} (i int, j int, v float);");
    }
    out.push_str("create table one_hot (i int, j int, v int);\n");
    out.push_str("create table w (iter int, id int, i int, j int, v float);\n");
    out
}

/// One insert per table, one tuple per line; `prefix` values lead every
/// tuple.
pub fn load_statements(tables: &[(&str, &[f64], &RelMatrix)]) -> String {
    let mut out = String::new();
    for (name, prefix, m) in tables {
        let _ = writeln!(out, "insert into {name} values");
        let entries = m.sorted_entries();
        for (k, e) in entries.iter().enumerate() {
            let lead: String = prefix.iter().map(|p| format!("{p},")).collect();
            let sep = if k + 1 < entries.len() { "," } else { ";" };
            let _ = writeln!(out, "({lead}{},{},{}){sep}", e.i, e.j, format_float(e.v));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceReport {
    pub executor: String,
    pub outcomes: Vec<QueryOutcome>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(|o| o.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("executor: {}\n", self.executor);
        for o in &self.outcomes {
            let _ = writeln!(out, "{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.query, o.detail);
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ConformanceError {
    #[error("conformance mode disabled: {0}")]
    Disabled(String),
    #[error("conformance supports the sql92 and window dialects, not {0}")]
    Dialect(&'static str),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Statement texts to check; `None` entries are rendered from the plans.
#[derive(Debug, Clone, Default)]
pub struct SqlTexts {
    pub transform: Option<String>,
    pub train: Option<String>,
    pub infer: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ConformanceSetup {
    pub transform: TransformSpec,
    pub hidden: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub dialect: SqlDialect,
}

/// The plans a run checks: full-batch training and ranked inference.
pub fn conformance_plans(ds: &Dataset, setup: &ConformanceSetup) -> Result<(QueryPlan, QueryPlan), ConformanceError> {
    let dims = MlpDims::new(ds.features.cols(), setup.hidden, ds.num_classes, ds.rows());
    let program = mlp_program(dims, setup.learning_rate)?;
    let train = lower(&program, &LowerConfig::full_batch(setup.iterations, setup.learning_rate))?;
    let infer = lower_inference(&program, true)?;
    Ok((train, infer))
}

/// A shim that knows every statement [`conformance`] sends for `setup`.
pub fn reference_shim(ds: &Dataset, setup: &ConformanceSetup) -> Result<ReferenceShim, ConformanceError> {
    let (train, infer) = conformance_plans(ds, setup)?;
    let mut shim = ReferenceShim::default();
    shim.register_transform(&setup.transform);
    shim.register_plan(&train, setup.dialect)?;
    shim.register_plan(&infer, setup.dialect)?;
    Ok(shim)
}

/// Runs transformation, training and inference through `executor` and
/// compares each answer with the interpreter. Without an executor the mode
/// is disabled with an error, never a silent pass.
pub fn conformance(
    ds: &Dataset,
    setup: &ConformanceSetup,
    texts: &SqlTexts,
    executor: Option<&dyn SqlExecutor>,
) -> Result<ConformanceReport, ConformanceError> {
    let executor = executor.ok_or_else(|| {
        ConformanceError::Disabled("no SQL executor configured (pass --runner <command> or --runner reference)".into())
    })?;
    if setup.dialect == SqlDialect::ArrayExtended {
        return Err(ConformanceError::Dialect(setup.dialect.name()));
    }
    let (train_plan, infer_plan) = conformance_plans(ds, setup)?;
    let (img, one_hot) = encode(ds)?;
    let (w_xh, w_ho) = init_weights(setup.seed, ds.features.cols(), setup.hidden, ds.num_classes)?;
    let (w_xh, w_ho) = (crate::relengine::from_dense(&w_xh), crate::relengine::from_dense(&w_ho));
    let mut outcomes = Vec::new();

    let transform = ExecRequest {
        schema: schema_ddl(),
        load: texts.transform.clone().unwrap_or_else(|| render_one_hot(&setup.transform)),
        query: TRANSFORM_QUERY.to_string(),
    };
    outcomes.push(check("transform", executor.execute(&transform), |csv| {
        let rows = read_csv(csv, &["t", "i", "j", "v"])?;
        let mut got: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
        for r in &rows {
            let n = r[1..].iter().map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
            got.entry(if r[0] == "img" { "img" } else { "one_hot" }).or_default().push(n);
        }
        compare_relation("img", &img, got.get("img").map_or(&[][..], Vec::as_slice))?;
        compare_relation("one_hot", &one_hot, got.get("one_hot").map_or(&[][..], Vec::as_slice))
    }));

    let mut catalog = BTreeMap::new();
    catalog.insert("img".to_string(), img.clone());
    catalog.insert("one_hot".to_string(), one_hot.clone());
    catalog.insert("w_xh".to_string(), w_xh.clone());
    catalog.insert("w_ho".to_string(), w_ho.clone());
    let expected = interpret(&train_plan, &catalog, &mut TupleStats::new())?;
    let train = ExecRequest {
        schema: schema_ddl(),
        load: load_statements(&[("img", &[], &img), ("one_hot", &[], &one_hot), ("w_xh", &[], &w_xh), ("w_ho", &[], &w_ho)]),
        query: match &texts.train {
            Some(t) => t.clone(),
            None => render_sql(&train_plan, setup.dialect)?,
        },
    };
    outcomes.push(check("train", executor.execute(&train), |csv| {
        let rows = numeric(read_csv(csv, &["iter", "id", "i", "j", "v"])?)?;
        let last = rows.iter().map(|r| r[0]).fold(f64::NEG_INFINITY, f64::max);
        for (id, w) in expected.weights.iter().enumerate() {
            let sel: Vec<Vec<f64>> =
                rows.iter().filter(|r| r[0] == last && r[1] == id as f64).map(|r| r[2..].to_vec()).collect();
            compare_relation(&train_plan.params[id], w, &sel)?;
        }
        Ok(())
    }));

    catalog.insert("w_xh".to_string(), expected.weights[0].clone());
    catalog.insert("w_ho".to_string(), expected.weights[1].clone());
    let accuracy = interpret(&infer_plan, &catalog, &mut TupleStats::new())?.accuracy.unwrap_or(0.0);
    let iter = [setup.iterations as f64];
    let infer = ExecRequest {
        schema: schema_ddl(),
        load: load_statements(&[
            ("img", &[], &img),
            ("one_hot", &[], &one_hot),
            ("w", &[iter[0], 0.0], &expected.weights[0]),
            ("w", &[iter[0], 1.0], &expected.weights[1]),
        ]),
        query: match &texts.infer {
            Some(t) => t.clone(),
            None => render_sql(&infer_plan, setup.dialect)?,
        },
    };
    outcomes.push(check("infer", executor.execute(&infer), |csv| {
        let rows = numeric(read_csv(csv, &["iter", "accuracy"])?)?;
        // No correct prediction leaves the grouped query without a row.
        let got = rows.iter().find(|r| r[0] == iter[0]).map_or(0.0, |r| r[1]);
        if (got - accuracy).abs() > TOLERANCE {
            return Err(format!("accuracy {got} differs from {accuracy}"));
        }
        Ok(())
    }));

    Ok(ConformanceReport { executor: executor.name(), outcomes })
}

fn check(query: &str, answer: Result<String, ExecError>, verify: impl FnOnce(&str) -> Result<(), String>) -> QueryOutcome {
    let result = answer.map_err(|e| e.to_string()).and_then(|csv| verify(&csv));
    QueryOutcome {
        query: query.to_string(),
        passed: result.is_ok(),
        detail: result.err().unwrap_or_else(|| format!("matches within {TOLERANCE:e}")),
    }
}

/// Rows restricted to `columns`, located by header name.
fn read_csv(csv: &str, columns: &[&str]) -> Result<Vec<Vec<String>>, String> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv.as_bytes());
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    let idx = columns
        .iter()
        .map(|c| header.iter().position(|h| h.eq_ignore_ascii_case(c)).ok_or_else(|| format!("result lacks column `{c}`")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        rows.push(idx.iter().map(|&k| rec.get(k).unwrap_or("").to_string()).collect());
    }
    Ok(rows)
}

fn numeric(rows: Vec<Vec<String>>) -> Result<Vec<Vec<f64>>, String> {
    rows.iter()
        .map(|r| r.iter().map(|v| v.parse::<f64>().map_err(|_| format!("non-numeric value `{v}`"))).collect())
        .collect()
}

/// `rows` are `(i, j, v)` triples.
fn compare_relation(name: &str, expected: &RelMatrix, rows: &[Vec<f64>]) -> Result<(), String> {
    if rows.len() != expected.len() {
        return Err(format!("{name}: {} rows returned, {} expected", rows.len(), expected.len()));
    }
    for r in rows {
        let (i, j) = (r[0] as usize, r[1] as usize);
        let want = expected.value(i, j).ok_or_else(|| format!("{name}: unexpected entry ({i},{j})"))?;
        if (r[2] - want).abs() > TOLERANCE {
            return Err(format!("{name}({i},{j}) = {} differs from {want}", r[2]));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_round_trip() {
        let m = RelMatrix::from_entries(1, 2, vec![Entry::new(1, 1, 0.5), Entry::new(1, 2, -1.25)]).unwrap();
        let text = load_statements(&[("img", &[], &m), ("w", &[3.0, 1.0], &m)]);
        let parsed = parse_inserts(&text).unwrap();
        assert_eq!(parsed[0].0, "img");
        assert_eq!(parsed[0].1, vec![vec![1.0, 1.0, 0.5], vec![1.0, 2.0, -1.25]]);
        assert_eq!(parsed[1].1[1], vec![3.0, 1.0, 1.0, 2.0, -1.25]);
    }

    #[test]
    fn copy_path_is_read() {
        assert_eq!(copy_path("x;\ncopy iris from './a.csv' delimiter ','").as_deref(), Some("./a.csv"));
    }

    #[test]
    fn missing_command_is_unavailable() {
        let exec = CommandExecutor::parse("/nonexistent/sql-runner --csv").unwrap();
        let req = ExecRequest { schema: String::new(), load: String::new(), query: "select 1;".into() };
        assert!(matches!(exec.execute(&req), Err(ExecError::Unavailable(_))));
    }
}
