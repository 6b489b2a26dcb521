//! Reverse-mode differentiation over [`ExprGraph`].
//!
//! Seeds are propagated from the root towards the leaves by pattern
//! matching on the node kind. Every derivative is itself appended to the
//! graph as an expression, so the result can be evaluated by either engine
//! or lowered to SQL like any other expression.
//!
//! The value of a node during the forward pass is the node itself: the
//! sigmoid derivative is built from the sigmoid's own output `a ∘ (1 - a)`,
//! which is what lets the forward variables double as cached values in the
//! backward pass.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::exprgraph::{Activation, ExprGraph, ExprNode, GraphError, NodeId, Shape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("seed for node {node} has shape {seed}, node has shape {expected}")]
    SeedShape { node: NodeId, seed: Shape, expected: Shape },
    #[error("a constant seed reached matrix product node {0}; pass an explicit seed expression")]
    ConstantThroughMatMul(NodeId),
    #[error("node {0} receives both a constant and an expression seed")]
    MixedSeed(NodeId),
    #[error("gradient of parameter `{0}` is a constant matrix and has no expression form")]
    ConstantGradient(String),
    #[error("graph is missing the `{0}` node expected by the network builder")]
    MissingNode(&'static str),
}

/// Accumulated partial derivative flowing into a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Seed {
    /// `c` times the all-ones matrix of the receiving node's shape. Seeding
    /// the root with `Scaled(1.0)` differentiates the sum of its entries.
    Scaled(f64),
    Expr(NodeId),
}

impl Seed {
    pub fn ones() -> Self {
        Seed::Scaled(1.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Derivation {
    /// Per parameter name, the expression for ∂root/∂param.
    pub grads: BTreeMap<String, NodeId>,
    /// The accumulated seed each visited node received.
    pub seeds: BTreeMap<NodeId, Seed>,
}

/// Differentiates `root` with an explicit seed expression of the root's
/// shape.
pub fn derive(
    graph: &mut ExprGraph,
    root: NodeId,
    seed: NodeId,
) -> Result<BTreeMap<String, NodeId>, AutodiffError> {
    Ok(derive_seeded(graph, root, Seed::Expr(seed))?.grads)
}

/// Differentiates `root`, returning both gradients and the per-node seeds.
pub fn derive_seeded(
    graph: &mut ExprGraph,
    root: NodeId,
    seed: Seed,
) -> Result<Derivation, AutodiffError> {
    let order = graph.topo_order_from(&[root]);
    let deps = graph.param_dependence();
    let mut pending: HashMap<NodeId, Seed> = HashMap::new();
    let mut out = Derivation::default();
    accumulate(graph, &mut pending, root, seed)?;

    for &id in order.iter().rev() {
        let Some(seed) = pending.get(&id).copied() else { continue };
        out.seeds.insert(id, seed);
        if !deps[id.index()] {
            continue;
        }
        let node = graph.node(id).clone();
        match node {
            ExprNode::Input(_) => {}
            ExprNode::Param(name) => match seed {
                Seed::Expr(e) => {
                    out.grads.insert(name, e);
                }
                Seed::Scaled(_) => return Err(AutodiffError::ConstantGradient(name)),
            },
            ExprNode::Add(x, y) => {
                propagate(graph, &deps, &mut pending, x, |_| Ok(seed))?;
                propagate(graph, &deps, &mut pending, y, |_| Ok(seed))?;
            }
            ExprNode::Sub(x, y) => {
                propagate(graph, &deps, &mut pending, x, |_| Ok(seed))?;
                propagate(graph, &deps, &mut pending, y, |g| scale(g, -1.0, seed))?;
            }
            ExprNode::Hadamard(x, y) => {
                propagate(graph, &deps, &mut pending, x, |g| seed_hadamard(g, seed, y))?;
                propagate(graph, &deps, &mut pending, y, |g| seed_hadamard(g, seed, x))?;
            }
            ExprNode::MatMul(x, y) => {
                let Seed::Expr(s) = seed else {
                    return Err(AutodiffError::ConstantThroughMatMul(id));
                };
                // ∂/∂X = seed · Yᵀ, ∂/∂Y = Xᵀ · seed
                propagate(graph, &deps, &mut pending, x, |g| {
                    let yt = g.transpose(y)?;
                    Ok(Seed::Expr(g.matmul(s, yt)?))
                })?;
                propagate(graph, &deps, &mut pending, y, |g| {
                    let xt = g.transpose(x)?;
                    Ok(Seed::Expr(g.matmul(xt, s)?))
                })?;
            }
            ExprNode::Transpose(x) => {
                propagate(graph, &deps, &mut pending, x, |g| match seed {
                    Seed::Scaled(c) => Ok(Seed::Scaled(c)),
                    Seed::Expr(s) => Ok(Seed::Expr(g.transpose(s)?)),
                })?;
            }
            ExprNode::ScalarMul(c, x) => {
                propagate(graph, &deps, &mut pending, x, |g| scale(g, c, seed))?;
            }
            ExprNode::Map(f, x) => {
                propagate(graph, &deps, &mut pending, x, |g| map_rule(g, f, id, x, seed))?;
            }
        }
    }
    Ok(out)
}

fn propagate(
    graph: &mut ExprGraph,
    deps: &[bool],
    pending: &mut HashMap<NodeId, Seed>,
    child: NodeId,
    contribution: impl FnOnce(&mut ExprGraph) -> Result<Seed, AutodiffError>,
) -> Result<(), AutodiffError> {
    if !deps[child.index()] {
        return Ok(());
    }
    let seed = contribution(graph)?;
    accumulate(graph, pending, child, seed)
}

fn accumulate(
    graph: &mut ExprGraph,
    pending: &mut HashMap<NodeId, Seed>,
    node: NodeId,
    seed: Seed,
) -> Result<(), AutodiffError> {
    if let Seed::Expr(s) = seed {
        if graph.has_shapes() {
            let (got, want) = (graph.shape(s)?, graph.shape(node)?);
            if got != want {
                return Err(AutodiffError::SeedShape { node, seed: got, expected: want });
            }
        }
    }
    let merged = match (pending.get(&node).copied(), seed) {
        (None, s) => s,
        (Some(Seed::Scaled(a)), Seed::Scaled(b)) => Seed::Scaled(a + b),
        (Some(Seed::Expr(a)), Seed::Expr(b)) => Seed::Expr(graph.add(a, b)?),
        _ => return Err(AutodiffError::MixedSeed(node)),
    };
    pending.insert(node, merged);
    Ok(())
}

fn scale(graph: &mut ExprGraph, c: f64, seed: Seed) -> Result<Seed, AutodiffError> {
    Ok(match seed {
        Seed::Scaled(k) => Seed::Scaled(c * k),
        Seed::Expr(s) => Seed::Expr(graph.scalar_mul(c, s)?),
    })
}

/// `seed ∘ e`.
fn seed_hadamard(graph: &mut ExprGraph, seed: Seed, e: NodeId) -> Result<Seed, AutodiffError> {
    Ok(match seed {
        Seed::Scaled(c) if c == 1.0 => Seed::Expr(e),
        Seed::Scaled(c) => Seed::Expr(graph.scalar_mul(c, e)?),
        Seed::Expr(s) => Seed::Expr(graph.hadamard(s, e)?),
    })
}

/// `seed ∘ f'(x)`, with f' written in terms of the forward output where that
/// is possible.
fn map_rule(
    graph: &mut ExprGraph,
    f: Activation,
    output: NodeId,
    input: NodeId,
    seed: Seed,
) -> Result<Seed, AutodiffError> {
    match f {
        Activation::Identity => Ok(seed),
        Activation::OneMinus => scale(graph, -1.0, seed),
        Activation::Square => match seed {
            Seed::Scaled(c) => Ok(Seed::Expr(graph.scalar_mul(2.0 * c, input)?)),
            Seed::Expr(s) => {
                let h = graph.hadamard(s, input)?;
                Ok(Seed::Expr(graph.scalar_mul(2.0, h)?))
            }
        },
        Activation::Sigmoid => {
            // seed ∘ a ∘ (1 - a), a = sig(x)
            let one_minus = graph.map(Activation::OneMinus, output)?;
            match seed {
                Seed::Expr(s) => {
                    let h = graph.hadamard(s, output)?;
                    Ok(Seed::Expr(graph.hadamard(h, one_minus)?))
                }
                Seed::Scaled(c) => {
                    let h = graph.hadamard(output, one_minus)?;
                    if c == 1.0 {
                        Ok(Seed::Expr(h))
                    } else {
                        Ok(Seed::Expr(graph.scalar_mul(c, h)?))
                    }
                }
            }
        }
    }
}

/// Rewrites `node` into canonical form, appending new nodes where needed.
///
/// Rules, applied bottom-up to a fixpoint: constant folding of nested
/// `ScalarMul`, `1·X → X`, `Map(Identity, X) → X`, `Add(X, -1·Y) → Sub(X, Y)`
/// and `(Xᵀ)ᵀ → X`.
pub fn canonicalize(graph: &mut ExprGraph, node: NodeId) -> Result<NodeId, GraphError> {
    let mut memo = HashMap::new();
    canon(graph, node, &mut memo)
}

fn canon(
    graph: &mut ExprGraph,
    id: NodeId,
    memo: &mut HashMap<NodeId, NodeId>,
) -> Result<NodeId, GraphError> {
    if let Some(done) = memo.get(&id) {
        return Ok(*done);
    }
    let node = graph.node(id).clone();
    let rebuilt = match node {
        ExprNode::Input(_) | ExprNode::Param(_) => id,
        ExprNode::Add(l, r) => rebuild2(graph, id, l, r, memo, ExprNode::Add)?,
        ExprNode::Sub(l, r) => rebuild2(graph, id, l, r, memo, ExprNode::Sub)?,
        ExprNode::Hadamard(l, r) => rebuild2(graph, id, l, r, memo, ExprNode::Hadamard)?,
        ExprNode::MatMul(l, r) => rebuild2(graph, id, l, r, memo, ExprNode::MatMul)?,
        ExprNode::Transpose(x) => rebuild1(graph, id, x, memo, ExprNode::Transpose)?,
        ExprNode::ScalarMul(c, x) => rebuild1(graph, id, x, memo, |x| ExprNode::ScalarMul(c, x))?,
        ExprNode::Map(f, x) => rebuild1(graph, id, x, memo, |x| ExprNode::Map(f, x))?,
    };
    let mut current = rebuilt;
    while let Some(next) = rewrite(graph, current)? {
        current = next;
    }
    memo.insert(id, current);
    Ok(current)
}

fn rebuild1(
    graph: &mut ExprGraph,
    id: NodeId,
    x: NodeId,
    memo: &mut HashMap<NodeId, NodeId>,
    make: impl FnOnce(NodeId) -> ExprNode,
) -> Result<NodeId, GraphError> {
    let cx = canon(graph, x, memo)?;
    if cx == x {
        Ok(id)
    } else {
        graph.add_node(make(cx))
    }
}

fn rebuild2(
    graph: &mut ExprGraph,
    id: NodeId,
    l: NodeId,
    r: NodeId,
    memo: &mut HashMap<NodeId, NodeId>,
    make: impl FnOnce(NodeId, NodeId) -> ExprNode,
) -> Result<NodeId, GraphError> {
    let cl = canon(graph, l, memo)?;
    let cr = canon(graph, r, memo)?;
    if cl == l && cr == r {
        Ok(id)
    } else {
        graph.add_node(make(cl, cr))
    }
}

/// One local rewrite at `id`, if any rule applies.
fn rewrite(graph: &mut ExprGraph, id: NodeId) -> Result<Option<NodeId>, GraphError> {
    let node = graph.node(id).clone();
    Ok(match node {
        ExprNode::Map(Activation::Identity, x) => Some(x),
        ExprNode::ScalarMul(c, x) if c == 1.0 => Some(x),
        ExprNode::ScalarMul(c1, x) => match *graph.node(x) {
            ExprNode::ScalarMul(c2, inner) => Some(graph.scalar_mul(c1 * c2, inner)?),
            _ => None,
        },
        ExprNode::Transpose(x) => match *graph.node(x) {
            ExprNode::Transpose(inner) => Some(inner),
            _ => None,
        },
        ExprNode::Add(l, r) => match *graph.node(r) {
            ExprNode::ScalarMul(c, y) if c == -1.0 => Some(graph.sub(l, y)?),
            _ => None,
        },
        _ => None,
    })
}

/// Dimensions of the one-hidden-layer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpDims {
    /// Input attributes (m).
    pub inputs: usize,
    /// Hidden units (h).
    pub hidden: usize,
    /// Output classes (l).
    pub outputs: usize,
    /// Rows of the feature matrix (n).
    pub rows: usize,
}

impl MlpDims {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, rows: usize) -> Self {
        Self { inputs, hidden, outputs, rows }
    }
}

/// Forward graph plus named forward and backward variables and the
/// per-parameter gradient expressions.
#[derive(Debug, Clone)]
pub struct GradientProgram {
    pub graph: ExprGraph,
    pub loss: NodeId,
    pub forward_vars: Vec<(String, NodeId)>,
    pub backward_vars: Vec<(String, NodeId)>,
    /// Parameter names in weight-id order (w_xh is id 0, w_ho id 1).
    pub params: Vec<String>,
    pub grads: BTreeMap<String, NodeId>,
    pub learning_rate: f64,
    pub dims: MlpDims,
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

impl GradientProgram {
    pub fn var(&self, name: &str) -> Option<NodeId> {
        self.forward_vars
            .iter()
            .chain(self.backward_vars.iter())
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .or_else(|| self.graph.leaf(name))
    }

    pub fn grad(&self, param: &str) -> Option<NodeId> {
        self.grads.get(param).copied()
    }

    pub fn with_learning_rate(mut self, gamma: f64) -> Self {
        self.learning_rate = gamma;
        self
    }

    /// Names of every variable node plus the leaves.
    pub fn names(&self) -> BTreeMap<NodeId, String> {
        let mut names: BTreeMap<NodeId, String> =
            self.graph.leaves().iter().map(|(n, id)| (*id, n.clone())).collect();
        for (n, id) in self.forward_vars.iter().chain(self.backward_vars.iter()) {
            names.insert(*id, n.clone());
        }
        names
    }

    /// One line per variable and gradient in infix notation.
    pub fn render(&self) -> String {
        let names = self.names();
        let mut out = String::new();
        for (n, id) in self.forward_vars.iter().chain(self.backward_vars.iter()) {
            let _ = writeln!(out, "{n} = {}", self.graph.render_expr(*id, &names));
        }
        for p in &self.params {
            if let Some(g) = self.grads.get(p) {
                let _ = writeln!(out, "grad {p} = {}", self.graph.render_expr(*g, &names));
            }
        }
        out
    }
}

/// Builds `(sig(sig(x · w_xh) · w_ho) - y_ones)^∘2` with shapes inferred.
pub fn build_mlp_loss(dims: MlpDims) -> Result<GradientProgram, AutodiffError> {
    let MlpDims { inputs: m, hidden: h, outputs: l, rows: n } = dims;
    let mut g = ExprGraph::new();
    let x = g.input("x")?;
    let w_xh = g.param("w_xh")?;
    let z_xh = g.matmul(x, w_xh)?;
    let a_xh = g.sigmoid(z_xh)?;
    let w_ho = g.param("w_ho")?;
    let z_ho = g.matmul(a_xh, w_ho)?;
    let a_ho = g.sigmoid(z_ho)?;
    let y = g.input("y_ones")?;
    let diff = g.sub(a_ho, y)?;
    let loss = g.map(Activation::Square, diff)?;
    let decl: BTreeMap<String, Shape> = [
        ("x", Shape::new(n, m)?),
        ("y_ones", Shape::new(n, l)?),
        ("w_xh", Shape::new(m, h)?),
        ("w_ho", Shape::new(h, l)?),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    g.infer_shapes(&decl)?;
    Ok(GradientProgram {
        graph: g,
        loss,
        forward_vars: vec![("a_xh".into(), a_xh), ("a_ho".into(), a_ho)],
        backward_vars: Vec::new(),
        params: vec!["w_xh".into(), "w_ho".into()],
        grads: BTreeMap::new(),
        learning_rate: DEFAULT_LEARNING_RATE,
        dims,
    })
}

/// Differentiates the summed loss and names the backward variables
/// l_ho, d_ho, l_xh, d_xh after the seeds that flow into a_ho, the output
/// product, a_xh and the hidden product respectively.
pub fn gradients_mlp(mut program: GradientProgram) -> Result<GradientProgram, AutodiffError> {
    let a_xh = program.var("a_xh").ok_or(AutodiffError::MissingNode("a_xh"))?;
    let a_ho = program.var("a_ho").ok_or(AutodiffError::MissingNode("a_ho"))?;
    let product_of = |g: &ExprGraph, act: NodeId, name: &'static str| match g.node(act) {
        ExprNode::Map(Activation::Sigmoid, z) => Ok(*z),
        _ => Err(AutodiffError::MissingNode(name)),
    };
    let z_xh = product_of(&program.graph, a_xh, "a_xh")?;
    let z_ho = product_of(&program.graph, a_ho, "a_ho")?;

    let derivation = derive_seeded(&mut program.graph, program.loss, Seed::ones())?;
    let seed_of = |node: NodeId, name: &'static str| match derivation.seeds.get(&node) {
        Some(Seed::Expr(e)) => Ok(*e),
        _ => Err(AutodiffError::MissingNode(name)),
    };
    let raw = [
        ("l_ho", seed_of(a_ho, "l_ho")?),
        ("d_ho", seed_of(z_ho, "d_ho")?),
        ("l_xh", seed_of(a_xh, "l_xh")?),
        ("d_xh", seed_of(z_xh, "d_xh")?),
    ];
    let mut backward = Vec::with_capacity(raw.len());
    for (name, id) in raw {
        backward.push((name.to_string(), canonicalize(&mut program.graph, id)?));
    }
    let mut grads = BTreeMap::new();
    for (p, id) in derivation.grads {
        grads.insert(p, canonicalize(&mut program.graph, id)?);
    }
    program.backward_vars = backward;
    program.grads = grads;
    Ok(program)
}

/// `build_mlp_loss` followed by `gradients_mlp`.
pub fn mlp_program(dims: MlpDims, learning_rate: f64) -> Result<GradientProgram, AutodiffError> {
    Ok(gradients_mlp(build_mlp_loss(dims)?)?.with_learning_rate(learning_rate))
}
