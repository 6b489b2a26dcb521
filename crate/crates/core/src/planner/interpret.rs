use std::collections::{BTreeMap, HashMap};

use crate::relengine::{self, Entry, RelMatrix, TupleStats};

use super::plan::{JoinPredicate, PlanId, PlanKind, PlanOp, QueryPlan, ScanSource};
use super::PlanError;

/// Sum of `|l_ho|` over one update and the number of entries summed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEntry {
    pub sum_abs: f64,
    pub count: usize,
}

impl LossEntry {
    pub fn mean(&self) -> f64 {
        self.sum_abs / self.count as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct Interpretation {
    /// Named relations of the last evaluated step (or of the forward pass).
    pub tables: BTreeMap<String, RelMatrix>,
    /// Weights by id after the final iteration.
    pub weights: Vec<RelMatrix>,
    /// One entry per update, when the step computes `l_ho`.
    pub loss: Vec<LossEntry>,
    /// Fraction of rows whose predicted and labelled ranks agree.
    pub accuracy: Option<f64>,
}

impl Interpretation {
    pub fn weight(&self, plan: &QueryPlan, param: &str) -> Option<&RelMatrix> {
        plan.params.iter().position(|p| p == param).and_then(|i| self.weights.get(i))
    }
}

struct Ctx<'a> {
    plan: &'a QueryPlan,
    catalog: &'a BTreeMap<String, RelMatrix>,
    weights: Vec<RelMatrix>,
    chunk: Option<(usize, usize)>,
    cache: HashMap<PlanId, RelMatrix>,
    sliced: HashMap<String, RelMatrix>,
}

impl Ctx<'_> {
    fn table(&mut self, name: &str, expect: (usize, usize)) -> Result<RelMatrix, PlanError> {
        let m = self.catalog.get(name).ok_or_else(|| PlanError::Unbound(name.to_string()))?;
        let got = (m.rows(), m.cols());
        match (self.plan.batch, self.chunk) {
            (Some(b), Some((start, end))) => {
                if got != (b.rows, expect.1) {
                    return Err(PlanError::CatalogShape { table: name.to_string(), expected: (b.rows, expect.1), got });
                }
                if let Some(s) = self.sliced.get(name) {
                    return Ok(s.clone());
                }
                let s = slice_rows(m, start, end);
                self.sliced.insert(name.to_string(), s.clone());
                Ok(s)
            }
            _ => {
                if got != expect {
                    return Err(PlanError::CatalogShape { table: name.to_string(), expected: expect, got });
                }
                Ok(m.clone())
            }
        }
    }

    fn eval(&mut self, id: PlanId, stats: &mut TupleStats) -> Result<RelMatrix, PlanError> {
        if let Some(m) = self.cache.get(&id) {
            return Ok(m.clone());
        }
        let node = self.plan.node(id);
        let out = match &node.op {
            PlanOp::Scan(ScanSource::Table(t)) => self.table(t, node.shape)?,
            PlanOp::Scan(ScanSource::Weights { id: w, param }) => match self.weights.get(*w) {
                Some(m) => m.clone(),
                None => return Err(PlanError::Unbound(param.clone())),
            },
            PlanOp::Scan(ScanSource::LoopState) => {
                return Err(PlanError::Unsupported("loop state is only read by the update".into()))
            }
            PlanOp::GroupAggregate { input, finisher } => {
                let PlanOp::JoinInner { left, right, predicate: JoinPredicate::InnerIndex } = self.plan.node(*input).op
                else {
                    return Err(PlanError::Unsupported("aggregate over a non-product join".into()));
                };
                let l = self.eval(left.node, stats)?;
                let r = self.eval(right.node, stats)?;
                let sum = relengine::join_aggregate(&l, left.transposed, &r, right.transposed, stats)?;
                match finisher {
                    Some(f) => relengine::map(*f, &sum, stats),
                    None => sum,
                }
            }
            PlanOp::Project { input, expr } => match self.plan.node(*input).op {
                PlanOp::JoinInner { left, right, predicate: JoinPredicate::BothIndices } => {
                    let l = self.eval(left.node, stats)?;
                    let r = self.eval(right.node, stats)?;
                    relengine::join_project(&l, left.transposed, &r, right.transposed, stats, "project", |a, b| {
                        expr.eval(a, b)
                    })?
                }
                PlanOp::JoinInner { .. } => {
                    return Err(PlanError::Unsupported("projection over a product join".into()));
                }
                _ => {
                    let m = self.eval(*input, stats)?;
                    relengine::project(&m, false, stats, |v| expr.eval(v, 0.0))
                }
            },
            PlanOp::Rank { input } => {
                let m = self.eval(*input, stats)?;
                rank(&m, stats)
            }
            PlanOp::JoinInner { .. } | PlanOp::Union(_) | PlanOp::RecursiveLoop { .. } => {
                return Err(PlanError::Unsupported(format!("node {} has no standalone relation", id.index())))
            }
        };
        self.cache.insert(id, out.clone());
        Ok(out)
    }

    fn union(&mut self, id: PlanId, stats: &mut TupleStats) -> Result<Vec<(usize, RelMatrix)>, PlanError> {
        let PlanOp::Union(branches) = &self.plan.node(id).op else {
            return Err(PlanError::Unsupported("expected a union".into()));
        };
        let mut out = Vec::with_capacity(branches.len());
        for (tag, b) in branches {
            out.push((*tag, self.eval(*b, stats)?));
        }
        Ok(out)
    }
}

fn slice_rows(m: &RelMatrix, start: usize, end: usize) -> RelMatrix {
    let entries: Vec<Entry> = m
        .entries()
        .iter()
        .filter(|e| e.i > start && e.i <= end)
        .map(|e| Entry::new(e.i - start, e.j, e.v))
        .collect();
    RelMatrix::from_entries(end - start, m.cols(), entries).expect("a row slice of a dense relation is dense")
}

/// Per-row winner as an `rows × 1` relation holding the winning column.
/// Higher value wins; equal values go to the lower column.
fn rank(m: &RelMatrix, stats: &mut TupleStats) -> RelMatrix {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; m.rows()];
    for e in m.entries() {
        let slot = &mut best[e.i - 1];
        match slot {
            Some((j, v)) if e.v < *v || (e.v == *v && e.j > *j) => {}
            _ => *slot = Some((e.j, e.v)),
        }
    }
    stats.record_elementwise(m.len(), 1);
    let entries = best
        .into_iter()
        .enumerate()
        .map(|(i, b)| Entry::new(i + 1, 1, b.map_or(0.0, |(j, _)| j as f64)))
        .collect();
    RelMatrix::from_entries(m.rows(), 1, entries).expect("one winner per row")
}

fn loss_of(m: &RelMatrix) -> LossEntry {
    let sorted;
    let entries = if m.entries().windows(2).all(|w| (w[0].i, w[0].j) < (w[1].i, w[1].j)) {
        m.entries()
    } else {
        sorted = m.sorted_entries();
        &sorted
    };
    LossEntry { sum_abs: entries.iter().map(|e| e.v.abs()).sum::<f64>(), count: entries.len() }
}

/// Executes a plan against `catalog` (table name → relation).
///
/// Training plans read initial weights from the tables named after the
/// parameters and iterate the step `bound` times, keeping only the latest
/// weights. Inference and expression plans read weights from the same
/// tables and evaluate once.
pub fn interpret(
    plan: &QueryPlan,
    catalog: &BTreeMap<String, RelMatrix>,
    stats: &mut TupleStats,
) -> Result<Interpretation, PlanError> {
    let mut weights = Vec::with_capacity(plan.params.len());
    for p in &plan.params {
        weights.push(catalog.get(p).cloned().ok_or_else(|| PlanError::Unbound(p.clone()))?);
    }
    let mut ctx = Ctx { plan, catalog, weights, chunk: None, cache: HashMap::new(), sliced: HashMap::new() };
    let mut result = Interpretation::default();

    match plan.kind {
        PlanKind::Training => {
            let root = plan.root();
            if let PlanOp::Union(_) = plan.node(root).op {
                let base = ctx.union(root, stats)?;
                result.weights = base.into_iter().map(|(_, m)| m).collect();
                return Ok(result);
            }
            let (base, step, update, bound) =
                plan.recursive_loop().ok_or_else(|| PlanError::Unsupported("training plan without a loop".into()))?;
            let initial = ctx.union(base, stats)?;
            for (tag, m) in initial {
                let expect = plan.node(plan.children(base)[tag]).shape;
                if (m.rows(), m.cols()) != expect {
                    return Err(PlanError::CatalogShape { table: plan.params[tag].clone(), expected: expect, got: (m.rows(), m.cols()) });
                }
            }
            let PlanOp::Project { input: update_join, expr: update_expr } = &plan.node(update).op else {
                return Err(PlanError::Unsupported("update is not a projection".into()));
            };
            let PlanOp::JoinInner { right: d_w, .. } = plan.node(*update_join).op else {
                return Err(PlanError::Unsupported("update does not join the gradients".into()));
            };
            let l_ho = plan.find("l_ho");
            for t in 0..bound {
                ctx.cache.clear();
                ctx.sliced.clear();
                ctx.chunk = plan.batch.map(|b| b.range(t % b.chunks()));
                for s in step {
                    if matches!(plan.node(*s).op, PlanOp::Union(_)) {
                        continue;
                    }
                    ctx.eval(*s, stats)?;
                }
                if let Some(l) = l_ho {
                    result.loss.push(loss_of(&ctx.eval(l, stats)?));
                }
                let grads = ctx.union(d_w.node, stats)?;
                let mut next = ctx.weights.clone();
                for (tag, g) in grads {
                    let w = &ctx.weights[tag];
                    next[tag] = relengine::join_project(w, false, &g, false, stats, "update", |a, b| update_expr.eval(a, b))?;
                }
                ctx.weights = next;
                if t + 1 == bound {
                    for s in step {
                        if let (Some(name), Some(m)) = (&plan.node(*s).name, ctx.cache.get(s)) {
                            result.tables.insert(name.clone(), m.clone());
                        }
                    }
                }
            }
            result.weights = ctx.weights;
        }
        PlanKind::Inference { ranked } => {
            let forward: Vec<PlanId> = plan
                .nodes()
                .filter(|(_, n)| n.name.is_some() && !matches!(n.op, PlanOp::Rank { .. }))
                .map(|(id, _)| id)
                .collect();
            for id in forward {
                let m = ctx.eval(id, stats)?;
                result.tables.insert(plan.node(id).name.clone().unwrap_or_default(), m);
            }
            if ranked {
                let pred = plan.find("pred").ok_or_else(|| PlanError::Unsupported("missing pred".into()))?;
                let test = plan.find("test").ok_or_else(|| PlanError::Unsupported("missing test".into()))?;
                let p = ctx.eval(pred, stats)?;
                let q = ctx.eval(test, stats)?;
                let hits = p.entries().iter().zip(q.entries()).filter(|(a, b)| a.v == b.v).count();
                result.accuracy = Some(hits as f64 / p.rows() as f64);
                result.tables.insert("pred".into(), p);
                result.tables.insert("test".into(), q);
            }
            result.weights = ctx.weights;
        }
        PlanKind::Expression => {
            let m = ctx.eval(plan.root(), stats)?;
            for (id, n) in plan.nodes() {
                if let (Some(name), Some(v)) = (&n.name, ctx.cache.get(&id)) {
                    result.tables.insert(name.clone(), v.clone());
                }
            }
            result.tables.insert("result".into(), m);
            result.weights = ctx.weights;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{mlp_program, MlpDims};
    use crate::denseengine::{init_uniform, DenseMatrix, Prng};
    use crate::planner::{lower, lower_inference, LowerConfig};
    use crate::relengine::{from_dense, one_hot, to_dense};

    fn catalog(n: usize, seed: u64) -> BTreeMap<String, RelMatrix> {
        let mut p = Prng::new(seed);
        let raw = init_uniform(&mut p, n, 4).unwrap();
        let x = DenseMatrix::new(n, 4, raw.values().iter().map(|v| v.abs() / 2.0).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut w = Prng::new(1);
        let w_xh = init_uniform(&mut w, 4, 5).unwrap();
        let w_ho = init_uniform(&mut w, 5, 3).unwrap();
        [
            ("img".to_string(), from_dense(&x)),
            ("one_hot".to_string(), one_hot(&labels, n, 3).unwrap()),
            ("w_xh".to_string(), from_dense(&w_xh)),
            ("w_ho".to_string(), from_dense(&w_ho)),
        ]
        .into()
    }

    #[test]
    fn zero_iterations_return_initial_weights() {
        let program = mlp_program(MlpDims::new(4, 5, 3, 6), 0.01).unwrap();
        let plan = lower(&program, &LowerConfig::full_batch(0, 0.01)).unwrap();
        let cat = catalog(6, 3);
        let out = interpret(&plan, &cat, &mut TupleStats::new()).unwrap();
        assert_eq!(out.weights[0], cat["w_xh"]);
        assert_eq!(out.weights[1], cat["w_ho"]);
        assert!(out.loss.is_empty());
    }

    #[test]
    fn one_update_matches_hand_step() {
        let program = mlp_program(MlpDims::new(4, 5, 3, 6), 0.01).unwrap();
        let plan = lower(&program, &LowerConfig::full_batch(1, 0.01)).unwrap();
        let cat = catalog(6, 3);
        let out = interpret(&plan, &cat, &mut TupleStats::new()).unwrap();

        let x = to_dense(&cat["img"]).unwrap();
        let y = to_dense(&cat["one_hot"]).unwrap();
        let w_xh = to_dense(&cat["w_xh"]).unwrap();
        let w_ho = to_dense(&cat["w_ho"]).unwrap();
        let a_xh = x.matmul(&w_xh).unwrap().map_sigmoid();
        let a_ho = a_xh.matmul(&w_ho).unwrap().map_sigmoid();
        let l_ho = a_ho.sub(&y).unwrap().scalar_mul(2.0);
        let d_ho = l_ho.hadamard(&a_ho).unwrap().hadamard(&a_ho.one_minus()).unwrap();
        let l_xh = d_ho.matmul(&w_ho.transpose()).unwrap();
        let d_xh = l_xh.hadamard(&a_xh).unwrap().hadamard(&a_xh.one_minus()).unwrap();
        let next_xh = w_xh.sub(&x.transpose().matmul(&d_xh).unwrap().scalar_mul(0.01)).unwrap();
        let next_ho = w_ho.sub(&a_xh.transpose().matmul(&d_ho).unwrap().scalar_mul(0.01)).unwrap();
        assert_eq!(to_dense(&out.weights[0]).unwrap(), next_xh);
        assert_eq!(to_dense(&out.weights[1]).unwrap(), next_ho);
        assert_eq!(out.loss[0].mean(), l_ho.mean_abs());
    }

    #[test]
    fn ranked_inference_counts_hits() {
        let program = mlp_program(MlpDims::new(4, 5, 3, 6), 0.01).unwrap();
        let plan = lower_inference(&program, true).unwrap();
        let mut cat = catalog(6, 3);
        let zeros = DenseMatrix::zeros(5, 3).unwrap();
        cat.insert("w_ho".into(), from_dense(&zeros));
        let out = interpret(&plan, &cat, &mut TupleStats::new()).unwrap();
        // all-equal probabilities: every row predicts column 1, i.e. label 0
        assert_eq!(out.accuracy, Some(2.0 / 6.0));
    }

    #[test]
    fn unbound_and_misshaped_tables_are_errors() {
        let program = mlp_program(MlpDims::new(4, 5, 3, 6), 0.01).unwrap();
        let plan = lower(&program, &LowerConfig::full_batch(1, 0.01)).unwrap();
        let mut cat = catalog(6, 3);
        cat.remove("img");
        assert!(matches!(interpret(&plan, &cat, &mut TupleStats::new()), Err(PlanError::Unbound(_))));
        let cat = catalog(7, 3);
        assert!(matches!(interpret(&plan, &cat, &mut TupleStats::new()), Err(PlanError::CatalogShape { .. })));
    }
}
