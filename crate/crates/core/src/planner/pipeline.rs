use super::plan::{PlanId, PlanOp, QueryPlan};

/// Materialization at one pipeline breaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BreakerEstimate {
    pub node: PlanId,
    pub name: Option<String>,
    /// Tuples the breaker has to hold before emitting: the join output for
    /// a product aggregate, the input for a rank.
    pub materialized_entries: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineReport {
    pub pipeline_count: usize,
    pub breaker_count: usize,
    pub breakers: Vec<BreakerEstimate>,
    /// Node chains, one per pipeline, from its source to where it ends:
    /// a breaker, the build side of a join, or the plan output.
    pub pipelines: Vec<Vec<PlanId>>,
}

fn is_breaker(op: &PlanOp) -> bool {
    matches!(op, PlanOp::GroupAggregate { .. } | PlanOp::Rank { .. })
}

/// A pipeline starts at every scan and at the output of every breaker (and
/// of a recursive loop, whose working table is materialized per
/// iteration). Tuples flow through the probe side of joins and through
/// projections; the build side of a join ends its pipeline.
pub fn analyze_pipelines(plan: &QueryPlan) -> PipelineReport {
    let n = plan.len();
    // first consumer of each node, and whether the node is that consumer's build side
    let mut consumer: Vec<Option<(PlanId, bool)>> = vec![None; n];
    for (id, node) in plan.nodes() {
        let uses: Vec<(PlanId, bool)> = match &node.op {
            PlanOp::JoinInner { left, right, .. } => vec![(left.node, false), (right.node, true)],
            _ => plan.children(id).into_iter().map(|c| (c, false)).collect(),
        };
        for (c, build) in uses {
            consumer[c.index()].get_or_insert((id, build));
        }
    }
    let mut pipelines = Vec::new();
    let mut breakers = Vec::new();
    for (id, node) in plan.nodes() {
        if is_breaker(&node.op) {
            breakers.push(BreakerEstimate {
                node: id,
                name: node.name.clone(),
                materialized_entries: plan.materialized_estimate(id),
            });
        }
        let source = matches!(node.op, PlanOp::Scan(_) | PlanOp::RecursiveLoop { .. }) || is_breaker(&node.op);
        if !source {
            continue;
        }
        let mut chain = vec![id];
        let mut at = id;
        while let Some((next, build)) = consumer[at.index()] {
            chain.push(next);
            if build || is_breaker(&plan.node(next).op) || matches!(plan.node(next).op, PlanOp::RecursiveLoop { .. }) {
                break;
            }
            at = next;
        }
        pipelines.push(chain);
    }
    PipelineReport { pipeline_count: pipelines.len(), breaker_count: breakers.len(), breakers, pipelines }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{mlp_program, MlpDims};
    use crate::exprgraph::{ExprGraph, Shape};
    use crate::planner::{lower_expression, lower_inference};
    use std::collections::BTreeMap;

    fn decl(pairs: &[(&str, usize, usize)]) -> BTreeMap<String, Shape> {
        pairs.iter().map(|(n, r, c)| (n.to_string(), Shape::new(*r, *c).unwrap())).collect()
    }

    #[test]
    fn inference_plan_has_five_pipelines() {
        let program = mlp_program(MlpDims::new(4, 20, 3, 150), 0.01).unwrap();
        let report = analyze_pipelines(&lower_inference(&program, false).unwrap());
        assert_eq!(report.pipeline_count, 5);
        assert_eq!(report.breaker_count, 2);
        let entries: Vec<u64> = report.breakers.iter().map(|b| b.materialized_entries).collect();
        assert_eq!(entries, [150 * 4 * 20, 150 * 20 * 3]);
    }

    #[test]
    fn scan_project_is_one_pipeline() {
        let mut g = ExprGraph::new();
        let x = g.input("x").unwrap();
        let y = g.scalar_mul(2.0, x).unwrap();
        g.infer_shapes(&decl(&[("x", 3, 2)])).unwrap();
        let report = analyze_pipelines(&lower_expression(&g, y).unwrap());
        assert_eq!((report.pipeline_count, report.breaker_count), (1, 0));
    }

    #[test]
    fn two_products_two_breakers() {
        let mut g = ExprGraph::new();
        let a = g.input("a").unwrap();
        let b = g.input("b").unwrap();
        let c = g.input("c").unwrap();
        let ab = g.matmul(a, b).unwrap();
        let abc = g.matmul(ab, c).unwrap();
        g.infer_shapes(&decl(&[("a", 2, 3), ("b", 3, 4), ("c", 4, 5)])).unwrap();
        let report = analyze_pipelines(&lower_expression(&g, abc).unwrap());
        assert_eq!(report.breaker_count, 2);
        assert_eq!(report.breakers[0].materialized_entries, 24);
        assert_eq!(report.breakers[1].materialized_entries, 40);
    }
}
