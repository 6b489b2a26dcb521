//! Relational query plans for gradient programs: lowering, SQL rendering,
//! interpretation on the relational engine, and pipeline analysis.

mod interpret;
mod lower;
mod pipeline;
mod plan;
mod sql;

use thiserror::Error;

use crate::engine::MatrixError;
use crate::exprgraph::GraphError;

pub use interpret::{interpret, Interpretation, LossEntry};
pub use lower::{lower, lower_expression, lower_inference, table_for_leaf, LowerConfig};
pub use pipeline::{analyze_pipelines, BreakerEstimate, PipelineReport};
pub use plan::{
    BatchSpec, JoinPredicate, Operand, PlanId, PlanKind, PlanNode, PlanOp, QueryPlan, ScalarExpr, ScanSource, Side,
};
pub use sql::{
    array_operator_count, render_array_transform, render_one_hot, render_sql, render_sql_with, render_weight_init,
    RenderOptions, SqlDialect, TransformSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("cannot lower: {0}")]
    Unsupported(String),
    #[error("{dialect} dialect cannot express {what}")]
    Dialect { dialect: &'static str, what: String },
    #[error("table `{0}` is not in the catalog")]
    Unbound(String),
    #[error("table `{table}` is {got:?}, plan expects {expected:?}")]
    CatalogShape { table: String, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}
