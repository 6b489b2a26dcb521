use std::collections::HashMap;

use crate::autodiff::GradientProgram;
use crate::exprgraph::{Activation, ExprGraph, ExprNode, NodeId};

use super::plan::{
    BatchSpec, JoinPredicate, Operand, PlanId, PlanKind, PlanOp, QueryPlan, ScalarExpr, ScanSource, Side,
};
use super::PlanError;

/// Loop parameters for a training plan.
///
/// Plan shapes come from the program, so for mini-batches the program should
/// be built with `rows` equal to the batch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch: Option<BatchSpec>,
}

impl LowerConfig {
    pub fn full_batch(iterations: usize, learning_rate: f64) -> Self {
        Self { iterations, learning_rate, batch: None }
    }
}

/// Feature and label tables for the program's data leaves.
pub fn table_for_leaf(name: &str) -> &str {
    match name {
        "x" => "img",
        "y_ones" => "one_hot",
        other => other,
    }
}

struct Lowerer<'a> {
    graph: &'a ExprGraph,
    plan: QueryPlan,
    /// Expression nodes already available as a relation.
    bound: HashMap<NodeId, PlanId>,
    weight_ids: Vec<String>,
    scans: HashMap<String, PlanId>,
}

impl<'a> Lowerer<'a> {
    fn new(graph: &'a ExprGraph, kind: PlanKind, weight_ids: Vec<String>) -> Self {
        Self { graph, plan: QueryPlan::empty(kind), bound: HashMap::new(), weight_ids, scans: HashMap::new() }
    }

    fn shape(&self, id: NodeId) -> Result<(usize, usize), PlanError> {
        let s = self.graph.shape(id)?;
        Ok((s.rows(), s.cols()))
    }

    fn scan(&mut self, source: ScanSource, shape: (usize, usize)) -> PlanId {
        let key = format!("{source:?}");
        if let Some(id) = self.scans.get(&key) {
            return *id;
        }
        let id = self.plan.push(PlanOp::Scan(source), None, shape);
        self.scans.insert(key, id);
        id
    }

    fn leaf(&mut self, node: NodeId) -> Result<Option<PlanId>, PlanError> {
        let shape = self.shape(node)?;
        let source = match self.graph.node(node) {
            ExprNode::Param(p) => match self.weight_ids.iter().position(|w| w == p) {
                Some(id) => ScanSource::Weights { id, param: p.clone() },
                None => ScanSource::Table(p.clone()),
            },
            ExprNode::Input(n) => ScanSource::Table(table_for_leaf(n).to_string()),
            _ => return Ok(None),
        };
        Ok(Some(self.scan(source, shape)))
    }

    /// A node usable directly as a join input: a bound variable, a leaf, or
    /// the transpose of either.
    fn operand(&mut self, node: NodeId) -> Result<Option<Operand>, PlanError> {
        if let Some(p) = self.bound.get(&node) {
            return Ok(Some(Operand::plain(*p)));
        }
        if let Some(p) = self.leaf(node)? {
            return Ok(Some(Operand::plain(p)));
        }
        if let ExprNode::Transpose(x) = self.graph.node(node) {
            return Ok(self.operand(*x)?.map(|o| Operand { node: o.node, transposed: !o.transposed }));
        }
        Ok(None)
    }

    fn require_operand(&mut self, node: NodeId) -> Result<Operand, PlanError> {
        self.operand(node)?.ok_or_else(|| {
            PlanError::Unsupported(format!(
                "matrix product operand {} must be a named variable, a table or its transpose",
                node.index()
            ))
        })
    }

    fn product(
        &mut self,
        l: NodeId,
        r: NodeId,
        finisher: Option<Activation>,
        name: Option<String>,
        shape: (usize, usize),
    ) -> Result<PlanId, PlanError> {
        let left = self.require_operand(l)?;
        let right = self.require_operand(r)?;
        let join = self.plan.push(PlanOp::JoinInner { left, right, predicate: JoinPredicate::InnerIndex }, None, shape);
        Ok(self.plan.push(PlanOp::GroupAggregate { input: join, finisher }, name, shape))
    }

    /// Lowers the expression rooted at `root` into one relation.
    fn lower_var(&mut self, root: NodeId, name: Option<String>) -> Result<PlanId, PlanError> {
        let shape = self.shape(root)?;
        match self.graph.node(root).clone() {
            ExprNode::MatMul(l, r) => return self.product(l, r, None, name, shape),
            ExprNode::Map(f, z) if f != Activation::Identity && !self.bound.contains_key(&z) => {
                if let ExprNode::MatMul(l, r) = *self.graph.node(z) {
                    return self.product(l, r, Some(f), name, shape);
                }
            }
            _ => {}
        }
        let mut operands: Vec<Operand> = Vec::new();
        let expr = self.scalar(root, &mut operands, true)?;
        let input = match operands.as_slice() {
            [] => return Err(PlanError::Unsupported("expression reads no relation".into())),
            [one] if !one.transposed => one.node,
            [one] => {
                return Err(PlanError::Unsupported(format!(
                    "entrywise expression over transposed relation {} alone",
                    one.node.index()
                )))
            }
            [m, n] => self.plan.push(
                PlanOp::JoinInner { left: *m, right: *n, predicate: JoinPredicate::BothIndices },
                None,
                shape,
            ),
            _ => {
                return Err(PlanError::Unsupported(format!(
                    "entrywise expression reads {} relations; at most two fit one join",
                    operands.len()
                )))
            }
        };
        Ok(self.plan.push(PlanOp::Project { input, expr }, name, shape))
    }

    fn scalar(&mut self, node: NodeId, operands: &mut Vec<Operand>, top: bool) -> Result<ScalarExpr, PlanError> {
        if !top {
            if let Some(op) = self.operand(node)? {
                let pos = match operands.iter().position(|o| *o == op) {
                    Some(p) => p,
                    None => {
                        operands.push(op);
                        operands.len() - 1
                    }
                };
                return Ok(ScalarExpr::Value(if pos == 0 { Side::M } else { Side::N }));
            }
        }
        let b = |e: ScalarExpr| Box::new(e);
        Ok(match self.graph.node(node).clone() {
            ExprNode::Add(l, r) => {
                ScalarExpr::Add(b(self.scalar(l, operands, false)?), b(self.scalar(r, operands, false)?))
            }
            ExprNode::Sub(l, r) => {
                ScalarExpr::Sub(b(self.scalar(l, operands, false)?), b(self.scalar(r, operands, false)?))
            }
            ExprNode::Hadamard(l, r) => {
                ScalarExpr::Mul(b(self.scalar(l, operands, false)?), b(self.scalar(r, operands, false)?))
            }
            ExprNode::ScalarMul(c, x) => ScalarExpr::Mul(b(ScalarExpr::Const(c)), b(self.scalar(x, operands, false)?)),
            ExprNode::Map(Activation::OneMinus, x) => {
                ScalarExpr::Sub(b(ScalarExpr::Const(1.0)), b(self.scalar(x, operands, false)?))
            }
            ExprNode::Map(Activation::Identity, x) => self.scalar(x, operands, false)?,
            ExprNode::Map(f, x) => ScalarExpr::Apply(f, b(self.scalar(x, operands, false)?)),
            ExprNode::MatMul(..) => {
                return Err(PlanError::Unsupported(format!(
                    "matrix product {} nested inside an entrywise expression; name it first",
                    node.index()
                )))
            }
            ExprNode::Transpose(_) | ExprNode::Input(_) | ExprNode::Param(_) => {
                return Err(PlanError::Unsupported(format!("cannot lower node {} here", node.index())))
            }
        })
    }
}

/// Lowers a gradient program to a recursive training plan: the base is the
/// id-tagged union of the initial weights, the step holds one named relation
/// per program variable followed by `d_w`, and the update subtracts
/// `γ·d_w` joined on id and indices. Zero iterations leave the base alone.
pub fn lower(program: &GradientProgram, cfg: &LowerConfig) -> Result<QueryPlan, PlanError> {
    let mut lw = Lowerer::new(&program.graph, PlanKind::Training, program.params.clone());
    lw.plan.learning_rate = cfg.learning_rate;
    lw.plan.batch = cfg.batch.filter(|b| b.size < b.rows);
    lw.plan.params = program.params.clone();

    let mut branches = Vec::new();
    for (id, p) in program.params.iter().enumerate() {
        let leaf = program.graph.leaf(p).ok_or_else(|| PlanError::Unsupported(format!("unknown parameter {p}")))?;
        let shape = lw.shape(leaf)?;
        let scan = lw.plan.push(PlanOp::Scan(ScanSource::Table(p.clone())), None, shape);
        branches.push((id, scan));
    }
    let base_shape = branches.first().map(|(_, s)| lw.plan.node(*s).shape).unwrap_or((1, 1));
    let base = lw.plan.push(PlanOp::Union(branches), None, base_shape);
    if cfg.iterations == 0 {
        lw.plan.root = base;
        return Ok(lw.plan);
    }

    let mut step = Vec::new();
    for (name, id) in program.forward_vars.iter().chain(program.backward_vars.iter()) {
        let p = lw.lower_var(*id, Some(name.clone()))?;
        lw.bound.insert(*id, p);
        step.push(p);
    }
    let mut grads = Vec::new();
    for (id, p) in program.params.iter().enumerate() {
        let g = program.grad(p).ok_or_else(|| PlanError::Unsupported(format!("no gradient for {p}")))?;
        let agg = match program.graph.node(g) {
            ExprNode::MatMul(..) => lw.lower_var(g, None)?,
            _ => return Err(PlanError::Unsupported(format!("gradient of {p} is not a matrix product"))),
        };
        grads.push((id, agg));
    }
    let d_w = lw.plan.push(PlanOp::Union(grads), Some("d_w".into()), base_shape);
    step.push(d_w);

    let state = lw.plan.push(PlanOp::Scan(ScanSource::LoopState), None, base_shape);
    let join = lw.plan.push(
        PlanOp::JoinInner {
            left: Operand::plain(state),
            right: Operand::plain(d_w),
            predicate: JoinPredicate::IdAndIndices,
        },
        None,
        base_shape,
    );
    let expr = ScalarExpr::Sub(
        Box::new(ScalarExpr::Value(Side::M)),
        Box::new(ScalarExpr::Mul(Box::new(ScalarExpr::Const(cfg.learning_rate)), Box::new(ScalarExpr::Value(Side::N)))),
    );
    let update = lw.plan.push(PlanOp::Project { input: join, expr }, None, base_shape);
    let bound = match lw.plan.batch {
        Some(b) => cfg.iterations * b.chunks(),
        None => cfg.iterations,
    };
    lw.plan.root = lw.plan.push(PlanOp::RecursiveLoop { base, step, update, bound }, None, base_shape);
    Ok(lw.plan)
}

/// Forward pass of the program's model (`a_xh`, `a_ho`) over the weight
/// table. With `ranked`, adds per-row ranking of predictions (`pred`) and
/// of the one-hot labels (`test`).
pub fn lower_inference(program: &GradientProgram, ranked: bool) -> Result<QueryPlan, PlanError> {
    let mut lw = Lowerer::new(&program.graph, PlanKind::Inference { ranked }, program.params.clone());
    lw.plan.params = program.params.clone();
    let mut last = None;
    for (name, id) in &program.forward_vars {
        let p = lw.lower_var(*id, Some(name.clone()))?;
        lw.bound.insert(*id, p);
        last = Some(p);
    }
    let out = last.ok_or_else(|| PlanError::Unsupported("program has no forward variables".into()))?;
    lw.plan.root = out;
    if ranked {
        let shape = lw.plan.node(out).shape;
        let pred = lw.plan.push(PlanOp::Rank { input: out }, Some("pred".into()), shape);
        let y = program.graph.leaf("y_ones").ok_or_else(|| PlanError::Unsupported("program has no y_ones".into()))?;
        let labels = lw.leaf(y)?.expect("y_ones is a leaf");
        lw.plan.push(PlanOp::Rank { input: labels }, Some("test".into()), shape);
        lw.plan.root = pred;
    }
    Ok(lw.plan)
}

/// Lowers a single expression. Leaves scan tables of the same name (with
/// `x`/`y_ones` mapped to `img`/`one_hot`); the root is named `result`
/// unless it is a bare leaf.
pub fn lower_expression(graph: &ExprGraph, root: NodeId) -> Result<QueryPlan, PlanError> {
    if !graph.has_shapes() {
        return Err(PlanError::Graph(crate::exprgraph::GraphError::ShapesMissing));
    }
    let mut lw = Lowerer::new(graph, PlanKind::Expression, Vec::new());
    let order = graph.topo_order_from(&[root]);
    let finished = |id: NodeId| matches!(graph.node(id), ExprNode::Map(f, _) if *f != Activation::Identity);
    // A product needs its own relation unless every consumer applies a
    // finisher to it; finished products become relations themselves.
    let mut plain_use = vec![false; graph.len()];
    for id in &order {
        for c in graph.node(*id).children() {
            if !finished(*id) {
                plain_use[c.index()] = true;
            }
        }
    }
    for id in order {
        if id == root {
            break;
        }
        let is_product = matches!(graph.node(id), ExprNode::MatMul(..));
        let is_finished_product =
            matches!(graph.node(id), ExprNode::Map(f, z) if *f != Activation::Identity && matches!(graph.node(*z), ExprNode::MatMul(..)));
        if (is_product && plain_use[id.index()]) || is_finished_product {
            let p = lw.lower_var(id, Some(format!("t{}", id.index())))?;
            lw.bound.insert(id, p);
        }
    }
    lw.plan.root = match lw.leaf(root)? {
        Some(scan) => scan,
        None => lw.lower_var(root, Some("result".into()))?,
    };
    Ok(lw.plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{mlp_program, MlpDims};
    use crate::exprgraph::Shape;
    use std::collections::BTreeMap;

    fn program() -> GradientProgram {
        mlp_program(MlpDims::new(4, 20, 3, 150), 0.01).unwrap()
    }

    #[test]
    fn training_step_follows_variable_order() {
        let plan = lower(&program(), &LowerConfig::full_batch(20, 0.01)).unwrap();
        assert_eq!(plan.cte_names(), ["a_xh", "a_ho", "l_ho", "d_ho", "l_xh", "d_xh", "d_w"]);
        let (_, _, _, bound) = plan.recursive_loop().unwrap();
        assert_eq!(bound, 20);
    }

    #[test]
    fn entrywise_expressions_fuse_into_one_project() {
        let plan = lower(&program(), &LowerConfig::full_batch(1, 0.01)).unwrap();
        let d_ho = plan.node(plan.find("d_ho").unwrap());
        let PlanOp::Project { input, expr } = &d_ho.op else { panic!("d_ho is {:?}", d_ho.op) };
        assert!(matches!(plan.node(*input).op, PlanOp::JoinInner { predicate: JoinPredicate::BothIndices, .. }));
        assert_eq!(expr.eval(3.0, 0.25), 3.0 * 0.25 * 0.75);
        let l_ho = plan.node(plan.find("l_ho").unwrap());
        let PlanOp::Project { expr, .. } = &l_ho.op else { panic!() };
        assert_eq!(expr.eval(0.75, 1.0), -0.5);
    }

    #[test]
    fn transposes_become_roles() {
        let plan = lower(&program(), &LowerConfig::full_batch(1, 0.01)).unwrap();
        let l_xh = plan.node(plan.find("l_xh").unwrap());
        let PlanOp::GroupAggregate { input, finisher: None } = l_xh.op else { panic!() };
        let PlanOp::JoinInner { left, right, .. } = plan.node(input).op else { panic!() };
        assert!(!left.transposed && right.transposed);
        assert!(plan.nodes().all(|(_, n)| !matches!(n.op, PlanOp::Scan(ScanSource::Table(ref t)) if t == "transpose")));
    }

    #[test]
    fn zero_iterations_is_the_base_union() {
        let plan = lower(&program(), &LowerConfig::full_batch(0, 0.01)).unwrap();
        assert!(matches!(plan.node(plan.root()).op, PlanOp::Union(ref b) if b.len() == 2));
        assert!(plan.recursive_loop().is_none());
    }

    #[test]
    fn single_product_is_scan_join_aggregate() {
        let mut g = ExprGraph::new();
        let a = g.input("a").unwrap();
        let b = g.input("b").unwrap();
        let p = g.matmul(a, b).unwrap();
        let decl: BTreeMap<String, Shape> =
            [("a".to_string(), Shape::new(2, 3).unwrap()), ("b".to_string(), Shape::new(3, 4).unwrap())].into();
        g.infer_shapes(&decl).unwrap();
        let plan = lower_expression(&g, p).unwrap();
        let kinds: Vec<&str> = plan
            .nodes()
            .map(|(_, n)| match n.op {
                PlanOp::Scan(_) => "scan",
                PlanOp::JoinInner { .. } => "join",
                PlanOp::GroupAggregate { .. } => "agg",
                _ => "other",
            })
            .collect();
        assert_eq!(kinds, ["scan", "scan", "join", "agg"]);
        assert_eq!(plan.materialized_estimate(plan.root()), 24);
    }

    #[test]
    fn three_relation_entrywise_is_rejected() {
        let mut g = ExprGraph::new();
        let a = g.input("a").unwrap();
        let b = g.input("b").unwrap();
        let c = g.input("c").unwrap();
        let ab = g.hadamard(a, b).unwrap();
        let abc = g.add(ab, c).unwrap();
        let decl: BTreeMap<String, Shape> =
            ["a", "b", "c"].iter().map(|n| (n.to_string(), Shape::new(2, 2).unwrap())).collect();
        g.infer_shapes(&decl).unwrap();
        assert!(matches!(lower_expression(&g, abc), Err(PlanError::Unsupported(_))));
    }
}
