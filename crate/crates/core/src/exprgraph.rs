//! Append-only matrix-expression DAG with shape inference.
//!
//! Nodes are stored in insertion order and may only reference nodes that
//! already exist, so the store is topologically ordered by construction and
//! a [`NodeId`] stays valid for the lifetime of the graph.
//!
//! Shapes are filled in by [`ExprGraph::infer_shapes`]. Once leaf shapes are
//! known, every node appended afterwards is shape-checked on insertion, which
//! lets later passes (differentiation, canonicalization) extend the graph
//! without re-running inference.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {child} referenced by a new node does not exist (graph has {len} nodes)")]
    DanglingReference { child: usize, len: usize },
    #[error("leaf `{0}` is already declared")]
    DuplicateLeaf(String),
    #[error("leaf `{0}` has no declared shape")]
    UndeclaredLeaf(String),
    #[error("shape must have at least one row and one column, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("matrix product inner dimensions differ: {left} · {right}")]
    InnerDimension { left: Shape, right: Shape },
    #[error("elementwise operands differ in shape: {left} vs {right}")]
    ElementwiseShape { left: Shape, right: Shape },
    #[error("no leaf named `{0}`")]
    UnknownLeaf(String),
    #[error("shapes have not been inferred")]
    ShapesMissing,
}

/// Matrix dimensions; both are at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    rows: usize,
    cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Result<Self, GraphError> {
        if rows == 0 || cols == 0 {
            return Err(GraphError::EmptyShape { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn transposed(&self) -> Self {
        Self { rows: self.cols, cols: self.rows }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Elementwise functions. Each one has a derivative rule in `autodiff`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    /// Elementwise power of two.
    Square,
    /// `1 - x` elementwise.
    OneMinus,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Square => v * v,
            Activation::OneMinus => 1.0 - v,
            Activation::Identity => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "Sigmoid",
            Activation::Square => "Square",
            Activation::OneMinus => "OneMinus",
            Activation::Identity => "Identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    /// Data leaf (features, labels); never differentiated.
    Input(String),
    /// Trainable leaf.
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ScalarMul(f64, NodeId),
    Map(Activation, NodeId),
}

impl ExprNode {
    pub fn children(&self) -> Vec<NodeId> {
        match *self {
            ExprNode::Input(_) | ExprNode::Param(_) => Vec::new(),
            ExprNode::Add(l, r)
            | ExprNode::Sub(l, r)
            | ExprNode::Hadamard(l, r)
            | ExprNode::MatMul(l, r) => vec![l, r],
            ExprNode::Transpose(x) | ExprNode::ScalarMul(_, x) | ExprNode::Map(_, x) => vec![x],
        }
    }

    pub fn leaf_name(&self) -> Option<&str> {
        match self {
            ExprNode::Input(n) | ExprNode::Param(n) => Some(n),
            _ => None,
        }
    }

    fn label(&self) -> String {
        match self {
            ExprNode::Input(n) => format!("Input[{n}]"),
            ExprNode::Param(n) => format!("Param[{n}]"),
            ExprNode::Add(..) => "Add".into(),
            ExprNode::Sub(..) => "Sub".into(),
            ExprNode::Hadamard(..) => "Hadamard".into(),
            ExprNode::MatMul(..) => "MatMul".into(),
            ExprNode::Transpose(_) => "Transpose".into(),
            ExprNode::ScalarMul(c, _) => format!("ScalarMul[{c}]"),
            ExprNode::Map(f, _) => format!("Map[{}]", f.name()),
        }
    }

    fn key(&self) -> NodeKey {
        match self {
            ExprNode::Input(n) => NodeKey::Input(n.clone()),
            ExprNode::Param(n) => NodeKey::Param(n.clone()),
            ExprNode::Add(l, r) => NodeKey::Binary(0, *l, *r),
            ExprNode::Sub(l, r) => NodeKey::Binary(1, *l, *r),
            ExprNode::Hadamard(l, r) => NodeKey::Binary(2, *l, *r),
            ExprNode::MatMul(l, r) => NodeKey::Binary(3, *l, *r),
            ExprNode::Transpose(x) => NodeKey::Transpose(*x),
            ExprNode::ScalarMul(c, x) => NodeKey::Scalar(c.to_bits(), *x),
            ExprNode::Map(f, x) => NodeKey::Map(*f, *x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum NodeKey {
    Input(String),
    Param(String),
    Binary(u8, NodeId, NodeId),
    Transpose(NodeId),
    Scalar(u64, NodeId),
    Map(Activation, NodeId),
}

#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<ExprNode>,
    leaves: BTreeMap<String, NodeId>,
    leaf_shapes: Option<BTreeMap<String, Shape>>,
    shapes: Vec<Shape>,
    interned: Option<HashMap<NodeKey, NodeId>>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that returns the existing id when a structurally identical
    /// node (same kind, same child ids) is added again.
    pub fn with_hash_consing() -> Self {
        Self { interned: Some(HashMap::new()), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &ExprNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &ExprNode)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn leaves(&self) -> &BTreeMap<String, NodeId> {
        &self.leaves
    }

    /// Names of all `Param` leaves, in name order.
    pub fn params(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, id)| matches!(self.node(**id), ExprNode::Param(_)))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn add_node(&mut self, node: ExprNode) -> Result<NodeId, GraphError> {
        for child in node.children() {
            if child.0 >= self.nodes.len() {
                return Err(GraphError::DanglingReference { child: child.0, len: self.nodes.len() });
            }
        }
        if let Some(name) = node.leaf_name() {
            if self.leaves.contains_key(name) {
                return Err(GraphError::DuplicateLeaf(name.to_string()));
            }
        }
        if let Some(table) = &self.interned {
            if let Some(id) = table.get(&node.key()) {
                return Ok(*id);
            }
        }
        let shape = match &self.leaf_shapes {
            Some(leaf_shapes) => Some(self.node_shape(&node, leaf_shapes, &self.shapes)?),
            None => None,
        };
        let id = NodeId(self.nodes.len());
        if let Some(name) = node.leaf_name() {
            self.leaves.insert(name.to_string(), id);
        }
        if let Some(table) = &mut self.interned {
            table.insert(node.key(), id);
        }
        self.nodes.push(node);
        if let Some(shape) = shape {
            self.shapes.push(shape);
        }
        Ok(id)
    }

    pub fn input(&mut self, name: &str) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::Input(name.to_string()))
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::Param(name.to_string()))
    }

    pub fn add(&mut self, l: NodeId, r: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::Add(l, r))
    }

    pub fn sub(&mut self, l: NodeId, r: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::Sub(l, r))
    }

    pub fn hadamard(&mut self, l: NodeId, r: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::Hadamard(l, r))
    }

    pub fn matmul(&mut self, l: NodeId, r: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::MatMul(l, r))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::Transpose(x))
    }

    pub fn scalar_mul(&mut self, c: f64, x: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::ScalarMul(c, x))
    }

    pub fn map(&mut self, f: Activation, x: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(ExprNode::Map(f, x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.map(Activation::Sigmoid, x)
    }

    /// Computes a shape for every node and keeps the leaf declarations so
    /// later insertions are checked immediately.
    pub fn infer_shapes(
        &mut self,
        leaf_shapes: &BTreeMap<String, Shape>,
    ) -> Result<&[Shape], GraphError> {
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let s = self.node_shape(node, leaf_shapes, &shapes)?;
            shapes.push(s);
        }
        self.shapes = shapes;
        self.leaf_shapes = Some(leaf_shapes.clone());
        Ok(&self.shapes)
    }

    pub fn has_shapes(&self) -> bool {
        self.leaf_shapes.is_some()
    }

    pub fn shape(&self, id: NodeId) -> Result<Shape, GraphError> {
        if self.leaf_shapes.is_none() {
            return Err(GraphError::ShapesMissing);
        }
        Ok(self.shapes[id.0])
    }

    pub fn shapes(&self) -> Option<&[Shape]> {
        self.leaf_shapes.as_ref().map(|_| self.shapes.as_slice())
    }

    pub fn leaf_shapes(&self) -> Option<&BTreeMap<String, Shape>> {
        self.leaf_shapes.as_ref()
    }

    fn node_shape(
        &self,
        node: &ExprNode,
        leaf_shapes: &BTreeMap<String, Shape>,
        shapes: &[Shape],
    ) -> Result<Shape, GraphError> {
        let elementwise = |l: NodeId, r: NodeId| {
            let (a, b) = (shapes[l.0], shapes[r.0]);
            if a == b {
                Ok(a)
            } else {
                Err(GraphError::ElementwiseShape { left: a, right: b })
            }
        };
        match node {
            ExprNode::Input(name) | ExprNode::Param(name) => leaf_shapes
                .get(name)
                .copied()
                .ok_or_else(|| GraphError::UndeclaredLeaf(name.clone())),
            ExprNode::Add(l, r) | ExprNode::Sub(l, r) | ExprNode::Hadamard(l, r) => {
                elementwise(*l, *r)
            }
            ExprNode::MatMul(l, r) => {
                let (a, b) = (shapes[l.0], shapes[r.0]);
                if a.cols != b.rows {
                    return Err(GraphError::InnerDimension { left: a, right: b });
                }
                Ok(Shape { rows: a.rows, cols: b.cols })
            }
            ExprNode::Transpose(x) => Ok(shapes[x.0].transposed()),
            ExprNode::ScalarMul(_, x) | ExprNode::Map(_, x) => Ok(shapes[x.0]),
        }
    }

    /// All nodes, children before parents. Insertion order already has this
    /// property.
    pub fn topo_order(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).map(NodeId).collect()
    }

    /// Nodes reachable from `roots`, children before parents, in insertion
    /// order.
    pub fn topo_order_from(&self, roots: &[NodeId]) -> Vec<NodeId> {
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(id) = stack.pop() {
            if reachable[id.0] {
                continue;
            }
            reachable[id.0] = true;
            stack.extend(self.nodes[id.0].children());
        }
        reachable
            .iter()
            .enumerate()
            .filter(|(_, r)| **r)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Whether the subexpression rooted at each node contains a `Param`.
    pub fn param_dependence(&self) -> Vec<bool> {
        let mut deps = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let d = match node {
                ExprNode::Param(_) => true,
                ExprNode::Input(_) => false,
                other => other.children().iter().any(|c| deps[c.0]),
            };
            deps.push(d);
        }
        deps
    }

    /// Structural equality of two subexpressions (leaf names, kinds and
    /// constants), independent of node ids.
    pub fn structurally_equal(&self, a: NodeId, b: NodeId) -> bool {
        if a == b {
            return true;
        }
        let (na, nb) = (self.node(a), self.node(b));
        match (na, nb) {
            (ExprNode::Input(x), ExprNode::Input(y)) | (ExprNode::Param(x), ExprNode::Param(y)) => {
                x == y
            }
            (ExprNode::ScalarMul(c, x), ExprNode::ScalarMul(d, y)) => {
                c == d && self.structurally_equal(*x, *y)
            }
            (ExprNode::Map(f, x), ExprNode::Map(g, y)) => f == g && self.structurally_equal(*x, *y),
            (ExprNode::Transpose(x), ExprNode::Transpose(y)) => self.structurally_equal(*x, *y),
            (ExprNode::Add(a1, a2), ExprNode::Add(b1, b2))
            | (ExprNode::Sub(a1, a2), ExprNode::Sub(b1, b2))
            | (ExprNode::Hadamard(a1, a2), ExprNode::Hadamard(b1, b2))
            | (ExprNode::MatMul(a1, a2), ExprNode::MatMul(b1, b2)) => {
                self.structurally_equal(*a1, *b1) && self.structurally_equal(*a2, *b2)
            }
            _ => false,
        }
    }

    /// Infix rendering of a subexpression. Nodes found in `names` are
    /// printed by name instead of being expanded.
    pub fn render_expr(&self, id: NodeId, names: &BTreeMap<NodeId, String>) -> String {
        self.render_inner(id, names, true)
    }

    fn render_inner(&self, id: NodeId, names: &BTreeMap<NodeId, String>, top: bool) -> String {
        if !top {
            if let Some(n) = names.get(&id) {
                return n.clone();
            }
        }
        let wrap = |s: String| if top { s } else { format!("({s})") };
        match self.node(id) {
            ExprNode::Input(n) | ExprNode::Param(n) => n.clone(),
            ExprNode::Add(l, r) => wrap(format!(
                "{} + {}",
                self.render_inner(*l, names, false),
                self.render_inner(*r, names, false)
            )),
            ExprNode::Sub(l, r) => wrap(format!(
                "{} - {}",
                self.render_inner(*l, names, false),
                self.render_inner(*r, names, false)
            )),
            ExprNode::Hadamard(l, r) => {
                // Left-nested Hadamard chains print flat: a ∘ b ∘ c.
                let left = match self.node(*l) {
                    ExprNode::Hadamard(..) if !names.contains_key(l) => {
                        self.render_inner(*l, names, true)
                    }
                    _ => self.render_inner(*l, names, false),
                };
                wrap(format!("{left} ∘ {}", self.render_inner(*r, names, false)))
            }
            ExprNode::MatMul(l, r) => wrap(format!(
                "{} · {}",
                self.render_inner(*l, names, false),
                self.render_inner(*r, names, false)
            )),
            ExprNode::Transpose(x) => format!("{}^T", self.render_inner(*x, names, false)),
            ExprNode::ScalarMul(c, x) => {
                wrap(format!("{c} * {}", self.render_inner(*x, names, false)))
            }
            ExprNode::Map(f, x) => {
                let inner = match names.get(x) {
                    Some(n) => n.clone(),
                    None => self.render_inner(*x, names, true),
                };
                match f {
                    Activation::Sigmoid => format!("sig({inner})"),
                    Activation::Square => format!("({inner})^2"),
                    Activation::OneMinus => format!("(1 - {inner})"),
                    Activation::Identity => format!("id({inner})"),
                }
            }
        }
    }
}

/// One node per line: `<id>: <kind>(<child ids>) : <rows>x<cols>`.
impl fmt::Display for ExprGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, node) in self.nodes.iter().enumerate() {
            let children: Vec<String> = node.children().iter().map(|c| c.to_string()).collect();
            let shape = match self.shapes() {
                Some(s) => s[i].to_string(),
                None => "?x?".to_string(),
            };
            writeln!(f, "{i}: {}({}) : {shape}", node.label(), children.join(","))?;
        }
        Ok(())
    }
}
