use std::fmt;

use crate::exprgraph::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlanId(pub(crate) usize);

impl PlanId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a scan reads.
#[derive(Debug, Clone, PartialEq)]
pub enum ScanSource {
    /// A base table such as `img` or `one_hot`.
    Table(String),
    /// The current weights of one matrix inside a loop step (`w_` filtered by
    /// id and the latest iteration), or the weight table `w` in inference.
    Weights { id: usize, param: String },
    /// The loop's own previous iteration (`w_`), consumed by the update.
    LoopState,
}

/// One side of a join. A transposed operand swaps the `i`/`j` roles in the
/// join predicate and projection instead of materializing a copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operand {
    pub node: PlanId,
    pub transposed: bool,
}

impl Operand {
    pub fn plain(node: PlanId) -> Self {
        Self { node, transposed: false }
    }

    pub fn transposed(node: PlanId) -> Self {
        Self { node, transposed: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinPredicate {
    /// `m.j = n.i` (after roles): a matrix product.
    InnerIndex,
    /// `m.i = n.i and m.j = n.j`: elementwise.
    BothIndices,
    /// Weight update: `w.id = d_w.id and w.i = d_w.i and w.j = d_w.j`.
    IdAndIndices,
}

/// Which joined value a scalar expression reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    M,
    N,
}

/// Entrywise expression over the joined values `m.v` and `n.v`.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarExpr {
    Value(Side),
    Const(f64),
    Add(Box<ScalarExpr>, Box<ScalarExpr>),
    Sub(Box<ScalarExpr>, Box<ScalarExpr>),
    Mul(Box<ScalarExpr>, Box<ScalarExpr>),
    Apply(Activation, Box<ScalarExpr>),
}

impl ScalarExpr {
    pub fn eval(&self, m: f64, n: f64) -> f64 {
        match self {
            ScalarExpr::Value(Side::M) => m,
            ScalarExpr::Value(Side::N) => n,
            ScalarExpr::Const(c) => *c,
            ScalarExpr::Add(a, b) => a.eval(m, n) + b.eval(m, n),
            ScalarExpr::Sub(a, b) => a.eval(m, n) - b.eval(m, n),
            ScalarExpr::Mul(a, b) => a.eval(m, n) * b.eval(m, n),
            ScalarExpr::Apply(f, a) => f.apply(a.eval(m, n)),
        }
    }

    pub fn reads(&self, side: Side) -> bool {
        match self {
            ScalarExpr::Value(s) => *s == side,
            ScalarExpr::Const(_) => false,
            ScalarExpr::Add(a, b) | ScalarExpr::Sub(a, b) | ScalarExpr::Mul(a, b) => {
                a.reads(side) || b.reads(side)
            }
            ScalarExpr::Apply(_, a) => a.reads(side),
        }
    }

    /// Matrix-level operators this expression stands for.
    pub fn operator_count(&self) -> usize {
        match self {
            ScalarExpr::Value(_) | ScalarExpr::Const(_) => 0,
            ScalarExpr::Add(a, b) | ScalarExpr::Sub(a, b) | ScalarExpr::Mul(a, b) => {
                1 + a.operator_count() + b.operator_count()
            }
            ScalarExpr::Apply(Activation::Identity, a) => a.operator_count(),
            ScalarExpr::Apply(_, a) => 1 + a.operator_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOp {
    Scan(ScanSource),
    JoinInner { left: Operand, right: Operand, predicate: JoinPredicate },
    /// Sum of `m.v*n.v` per output `(i, j)` over an inner-index join, with an
    /// optional entrywise finisher applied to each sum.
    GroupAggregate { input: PlanId, finisher: Option<Activation> },
    /// Entrywise expression over a both-index join or a single scan.
    Project { input: PlanId, expr: ScalarExpr },
    /// Branches tagged with a weight id.
    Union(Vec<(usize, PlanId)>),
    /// Per-row winner by value descending, ties to the lowest column.
    Rank { input: PlanId },
    /// `base` seeds the loop; each iteration evaluates `step` in order and
    /// then `update`, `bound` times.
    RecursiveLoop { base: PlanId, step: Vec<PlanId>, update: PlanId, bound: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    pub op: PlanOp,
    /// CTE name for nodes that become a named common table expression.
    pub name: Option<String>,
    /// Logical result shape (rows, cols). For unions this is the shape of
    /// the first branch; for loops and ranks the input's.
    pub shape: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    /// One expression outside any loop.
    Expression,
    Training,
    /// Forward pass; `ranked` adds the per-row ranking of predictions and
    /// labels for accuracy.
    Inference { ranked: bool },
}

/// Consecutive row chunks for mini-batch training. Update `t` reads chunk
/// `t mod chunks`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub size: usize,
    pub rows: usize,
}

impl BatchSpec {
    pub fn chunks(&self) -> usize {
        self.rows.div_ceil(self.size)
    }

    /// 0-based `[start, end)` row range of chunk `c`.
    pub fn range(&self, c: usize) -> (usize, usize) {
        let start = c * self.size;
        (start, (start + self.size).min(self.rows))
    }
}

/// Relational operator DAG shared by the SQL renderer and the interpreter.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub(crate) nodes: Vec<PlanNode>,
    pub(crate) root: PlanId,
    pub kind: PlanKind,
    pub learning_rate: f64,
    pub batch: Option<BatchSpec>,
    /// Parameter names in weight-id order.
    pub params: Vec<String>,
}

impl QueryPlan {
    pub(crate) fn empty(kind: PlanKind) -> Self {
        Self { nodes: Vec::new(), root: PlanId(0), kind, learning_rate: 0.0, batch: None, params: Vec::new() }
    }

    pub(crate) fn push(&mut self, op: PlanOp, name: Option<String>, shape: (usize, usize)) -> PlanId {
        self.nodes.push(PlanNode { op, name, shape });
        PlanId(self.nodes.len() - 1)
    }

    pub fn root(&self) -> PlanId {
        self.root
    }

    pub fn node(&self, id: PlanId) -> &PlanNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (PlanId, &PlanNode)> {
        self.nodes.iter().enumerate().map(|(i, n)| (PlanId(i), n))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<PlanId> {
        self.nodes().find(|(_, n)| n.name.as_deref() == Some(name)).map(|(id, _)| id)
    }

    pub fn children(&self, id: PlanId) -> Vec<PlanId> {
        match &self.node(id).op {
            PlanOp::Scan(_) => Vec::new(),
            PlanOp::JoinInner { left, right, .. } => vec![left.node, right.node],
            PlanOp::GroupAggregate { input, .. } | PlanOp::Project { input, .. } | PlanOp::Rank { input } => {
                vec![*input]
            }
            PlanOp::Union(branches) => branches.iter().map(|(_, b)| *b).collect(),
            PlanOp::RecursiveLoop { base, step, update, .. } => {
                let mut c = vec![*base];
                c.extend(step);
                c.push(*update);
                c
            }
        }
    }

    /// The loop node of a training plan, if the bound is non-zero.
    pub fn recursive_loop(&self) -> Option<(PlanId, &[PlanId], PlanId, usize)> {
        match &self.node(self.root).op {
            PlanOp::RecursiveLoop { base, step, update, bound } => Some((*base, step.as_slice(), *update, *bound)),
            _ => None,
        }
    }

    /// Names of the step's CTEs in evaluation order.
    pub fn cte_names(&self) -> Vec<&str> {
        match self.recursive_loop() {
            Some((_, step, _, _)) => step.iter().filter_map(|s| self.node(*s).name.as_deref()).collect(),
            None => self.nodes.iter().filter_map(|n| n.name.as_deref()).collect(),
        }
    }

    /// Number of input tuples an aggregate or rank has to materialize:
    /// the join cardinality for a product, the input size otherwise.
    pub fn materialized_estimate(&self, id: PlanId) -> u64 {
        match &self.node(id).op {
            PlanOp::GroupAggregate { input, .. } => match &self.node(*input).op {
                PlanOp::JoinInner { left, right, .. } => {
                    let (a, b) = oriented(self.node(left.node).shape, left.transposed);
                    let (_, c) = oriented(self.node(right.node).shape, right.transposed);
                    (a * b * c) as u64
                }
                _ => entries(self.node(*input).shape),
            },
            PlanOp::Rank { input } => entries(self.node(*input).shape),
            _ => 0,
        }
    }
}

pub(crate) fn oriented(shape: (usize, usize), transposed: bool) -> (usize, usize) {
    if transposed {
        (shape.1, shape.0)
    } else {
        shape
    }
}

fn entries(shape: (usize, usize)) -> u64 {
    (shape.0 * shape.1) as u64
}

/// One line per node: `<id>: <op> [name] : RxC`.
impl fmt::Display for QueryPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, node) in self.nodes() {
            let op = match &node.op {
                PlanOp::Scan(ScanSource::Table(t)) => format!("Scan[{t}]"),
                PlanOp::Scan(ScanSource::Weights { id, param }) => format!("Scan[w id={id} {param}]"),
                PlanOp::Scan(ScanSource::LoopState) => "Scan[w_]".to_string(),
                PlanOp::JoinInner { left, right, predicate } => format!(
                    "Join[{predicate:?}]({}{}, {}{})",
                    left.node.0,
                    if left.transposed { "^T" } else { "" },
                    right.node.0,
                    if right.transposed { "^T" } else { "" }
                ),
                PlanOp::GroupAggregate { input, finisher } => match finisher {
                    Some(a) => format!("GroupAggregate[sum, {}]({})", a.name(), input.0),
                    None => format!("GroupAggregate[sum]({})", input.0),
                },
                PlanOp::Project { input, .. } => format!("Project({})", input.0),
                PlanOp::Union(b) => {
                    let parts: Vec<String> = b.iter().map(|(t, p)| format!("{t}:{}", p.0)).collect();
                    format!("Union({})", parts.join(", "))
                }
                PlanOp::Rank { input } => format!("Rank({})", input.0),
                PlanOp::RecursiveLoop { base, step, update, bound } => {
                    let s: Vec<String> = step.iter().map(|p| p.0.to_string()).collect();
                    format!("RecursiveLoop[{bound}](base {}, step {}, update {})", base.0, s.join(" "), update.0)
                }
            };
            match &node.name {
                Some(n) => writeln!(f, "{}: {op} {n} : {}x{}", id.0, node.shape.0, node.shape.1)?,
                None => writeln!(f, "{}: {op} : {}x{}", id.0, node.shape.0, node.shape.1)?,
            }
        }
        Ok(())
    }
}
