//! Engine-independent pieces: the matrix error type, the backend trait both
//! engines implement, and topological evaluation of an [`ExprGraph`].

use std::collections::BTreeMap;

use thiserror::Error;

use crate::exprgraph::{Activation, ExprGraph, ExprNode, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("matrix must have at least one row and one column, got {0}x{1}")]
    Empty(usize, usize),
    #[error("expected {expected} values for the declared shape, got {got}")]
    Length { expected: usize, got: usize },
    #[error("entry ({i},{j}) is outside a {rows}x{cols} matrix")]
    OutOfBounds { i: usize, j: usize, rows: usize, cols: usize },
    #[error("entry ({i},{j}) appears more than once")]
    Duplicate { i: usize, j: usize },
    #[error("{missing} of {total} entries are missing; relational matrices are stored densely")]
    Missing { missing: usize, total: usize },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("leaf `{0}` is not bound")]
    Unbound(String),
    #[error("binding for `{name}` is {got:?}, graph declares {expected:?}")]
    BindingShape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("malformed matrix file: {0}")]
    Parse(String),
}

/// Matrix operations an engine has to provide to evaluate expression graphs.
pub trait MatrixBackend {
    type Matrix: Clone;

    fn dims(m: &Self::Matrix) -> (usize, usize);
    fn matmul(&mut self, a: &Self::Matrix, b: &Self::Matrix) -> Result<Self::Matrix, MatrixError>;
    fn hadamard(&mut self, a: &Self::Matrix, b: &Self::Matrix)
        -> Result<Self::Matrix, MatrixError>;
    fn add(&mut self, a: &Self::Matrix, b: &Self::Matrix) -> Result<Self::Matrix, MatrixError>;
    fn sub(&mut self, a: &Self::Matrix, b: &Self::Matrix) -> Result<Self::Matrix, MatrixError>;
    fn scalar_mul(&mut self, c: f64, a: &Self::Matrix) -> Self::Matrix;
    fn transpose(&mut self, a: &Self::Matrix) -> Self::Matrix;
    fn map(&mut self, f: Activation, a: &Self::Matrix) -> Self::Matrix;
}

/// Per-node results of one evaluation.
#[derive(Debug, Clone)]
pub struct Values<M> {
    values: Vec<Option<M>>,
    evaluated: usize,
}

impl<M> Values<M> {
    pub fn get(&self, id: NodeId) -> Option<&M> {
        self.values.get(id.index()).and_then(|v| v.as_ref())
    }

    /// Number of nodes computed (leaves included). Each node is computed at
    /// most once.
    pub fn evaluated_count(&self) -> usize {
        self.evaluated
    }

    pub fn take(&mut self, id: NodeId) -> Option<M> {
        self.values.get_mut(id.index()).and_then(|v| v.take())
    }
}

/// Evaluates every node reachable from `roots`, or the whole graph when
/// `roots` is `None`, children first.
pub fn evaluate_with<B: MatrixBackend>(
    backend: &mut B,
    graph: &ExprGraph,
    bindings: &BTreeMap<String, B::Matrix>,
    roots: Option<&[NodeId]>,
) -> Result<Values<B::Matrix>, MatrixError> {
    let order = match roots {
        Some(r) => graph.topo_order_from(r),
        None => graph.topo_order(),
    };
    let mut values: Vec<Option<B::Matrix>> = vec![None; graph.len()];
    let mut evaluated = 0;
    for id in order {
        let get = |n: NodeId| values[n.index()].as_ref().expect("children are evaluated first");
        let v = match graph.node(id) {
            ExprNode::Input(name) | ExprNode::Param(name) => {
                let m = bindings.get(name).ok_or_else(|| MatrixError::Unbound(name.clone()))?;
                if let Ok(shape) = graph.shape(id) {
                    let got = B::dims(m);
                    if got != (shape.rows(), shape.cols()) {
                        return Err(MatrixError::BindingShape {
                            name: name.clone(),
                            expected: (shape.rows(), shape.cols()),
                            got,
                        });
                    }
                }
                m.clone()
            }
            ExprNode::Add(l, r) => backend.add(get(*l), get(*r))?,
            ExprNode::Sub(l, r) => backend.sub(get(*l), get(*r))?,
            ExprNode::Hadamard(l, r) => backend.hadamard(get(*l), get(*r))?,
            ExprNode::MatMul(l, r) => backend.matmul(get(*l), get(*r))?,
            ExprNode::Transpose(x) => backend.transpose(get(*x)),
            ExprNode::ScalarMul(c, x) => backend.scalar_mul(*c, get(*x)),
            ExprNode::Map(f, x) => backend.map(*f, get(*x)),
        };
        values[id.index()] = Some(v);
        evaluated += 1;
    }
    Ok(Values { values, evaluated })
}
