//! SQL text for query plans.
//!
//! Output is lower-case, indented by two spaces per level, one clause per
//! line, LF line endings and a trailing newline. Rendering never reads
//! anything but the plan, so identical plans give identical bytes.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::autodiff::MlpDims;
use crate::exprgraph::Activation;

use super::plan::{
    JoinPredicate, Operand, PlanId, PlanKind, PlanOp, QueryPlan, ScalarExpr, ScanSource, Side,
};
use super::PlanError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SqlDialect {
    /// Plain SQL-92 over `(i, j, v)` tables; ranking by anti-join.
    Sql92Relational,
    /// As `Sql92Relational`, ranking with `rank() over`.
    WindowRanking,
    /// Array columns with `**` (product), `*` (entrywise), `sig`,
    /// `transpose`, `sum`, `highestposition` and `array_agg`.
    ArrayExtended,
}

impl SqlDialect {
    pub fn name(self) -> &'static str {
        match self {
            SqlDialect::Sql92Relational => "sql92",
            SqlDialect::WindowRanking => "window",
            SqlDialect::ArrayExtended => "array",
        }
    }
}

impl FromStr for SqlDialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sql92" => Ok(SqlDialect::Sql92Relational),
            "window" => Ok(SqlDialect::WindowRanking),
            "array" => Ok(SqlDialect::ArrayExtended),
            other => Err(format!("unknown dialect `{other}` (expected sql92, window or array)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    /// Allow `not exists` anti-joins for ranking under `Sql92Relational`.
    pub anti_join: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { anti_join: true }
    }
}

pub fn render_sql(plan: &QueryPlan, dialect: SqlDialect) -> Result<String, PlanError> {
    render_sql_with(plan, dialect, &RenderOptions::default())
}

pub fn render_sql_with(plan: &QueryPlan, dialect: SqlDialect, opts: &RenderOptions) -> Result<String, PlanError> {
    if dialect == SqlDialect::ArrayExtended {
        return ArrayRenderer { plan }.render();
    }
    if dialect == SqlDialect::Sql92Relational && !opts.anti_join {
        if let Some((_, _)) = plan.nodes().find(|(_, n)| matches!(n.op, PlanOp::Rank { .. })) {
            return Err(PlanError::Dialect {
                dialect: dialect.name(),
                what: "ranking needs window functions or anti-joins".into(),
            });
        }
    }
    RelRenderer { plan, dialect }.render()
}

/// Lines with a running indent.
#[derive(Default)]
struct Out {
    text: String,
}

impl Out {
    fn line(&mut self, indent: usize, s: &str) {
        for _ in 0..indent {
            self.text.push_str("  ");
        }
        self.text.push_str(s);
        self.text.push('\n');
    }
}

fn fmt_const(c: f64) -> String {
    if c < 0.0 {
        format!("({c})")
    } else {
        format!("{c}")
    }
}

/// Infix rendering of a scalar expression; `value` names each side and
/// `sigmoid` wraps an argument.
fn scalar_sql(e: &ScalarExpr, value: &dyn Fn(Side) -> String, sigmoid: &dyn Fn(String, bool) -> String) -> String {
    fn prec(e: &ScalarExpr) -> u8 {
        match e {
            ScalarExpr::Add(..) | ScalarExpr::Sub(..) => 1,
            ScalarExpr::Mul(..) => 2,
            _ => 3,
        }
    }
    fn go(
        e: &ScalarExpr,
        value: &dyn Fn(Side) -> String,
        sigmoid: &dyn Fn(String, bool) -> String,
        min: u8,
    ) -> String {
        let s = match e {
            ScalarExpr::Value(side) => value(*side),
            ScalarExpr::Const(c) => fmt_const(*c),
            ScalarExpr::Add(a, b) => format!("{}+{}", go(a, value, sigmoid, 1), go(b, value, sigmoid, 2)),
            ScalarExpr::Sub(a, b) => format!("{}-{}", go(a, value, sigmoid, 1), go(b, value, sigmoid, 2)),
            ScalarExpr::Mul(a, b) => format!("{}*{}", go(a, value, sigmoid, 2), go(b, value, sigmoid, 3)),
            ScalarExpr::Apply(f, a) => {
                finisher_sql(*f, go(a, value, sigmoid, 0), prec(a) < 3, sigmoid)
            }
        };
        if prec(e) < min {
            format!("({s})")
        } else {
            s
        }
    }
    go(e, value, sigmoid, 0)
}

fn finisher_sql(f: Activation, arg: String, compound: bool, sigmoid: &dyn Fn(String, bool) -> String) -> String {
    match f {
        Activation::Sigmoid => sigmoid(arg, compound),
        Activation::Square => format!("power({arg},2)"),
        Activation::OneMinus => format!("1-({arg})"),
        Activation::Identity => arg,
    }
}

fn rel_sigmoid(arg: String, compound: bool) -> String {
    if compound {
        format!("1/(1+exp(-({arg})))")
    } else {
        format!("1/(1+exp(-{arg}))")
    }
}

fn wrap_compound(arg: String) -> String {
    if arg.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') {
        arg
    } else {
        format!("({arg})")
    }
}

struct RelRenderer<'a> {
    plan: &'a QueryPlan,
    dialect: SqlDialect,
}

/// Column roles of one join side after transposition.
struct Roles {
    alias: &'static str,
    row: &'static str,
    col: &'static str,
}

fn roles(alias: &'static str, transposed: bool) -> Roles {
    if transposed {
        Roles { alias, row: "j", col: "i" }
    } else {
        Roles { alias, row: "i", col: "j" }
    }
}

impl RelRenderer<'_> {
    fn training(&self) -> bool {
        self.plan.kind == PlanKind::Training
    }

    fn inference(&self) -> bool {
        matches!(self.plan.kind, PlanKind::Inference { .. })
    }

    /// Relation name an operand reads.
    fn relation(&self, id: PlanId) -> Result<String, PlanError> {
        let node = self.plan.node(id);
        match &node.op {
            PlanOp::Scan(ScanSource::Table(t)) => Ok(match (self.plan.batch, t.as_str()) {
                (Some(_), "img" | "one_hot") => format!("{t}_b"),
                _ => t.clone(),
            }),
            PlanOp::Scan(ScanSource::Weights { .. }) => Ok(if self.training() { "w_".into() } else { "w".into() }),
            PlanOp::Scan(ScanSource::LoopState) => Ok("w_".into()),
            _ => node
                .name
                .clone()
                .ok_or_else(|| PlanError::Unsupported(format!("unnamed relation {} used as an operand", id.index()))),
        }
    }

    /// Whether rows of this relation carry an `iter` column.
    fn has_iter(&self, id: PlanId) -> bool {
        if !self.inference() {
            return false;
        }
        match &self.plan.node(id).op {
            PlanOp::Scan(ScanSource::Weights { .. }) => true,
            PlanOp::Scan(_) => false,
            _ => self.plan.children(id).iter().any(|c| match &self.plan.node(*c).op {
                PlanOp::JoinInner { left, right, .. } => self.has_iter(left.node) || self.has_iter(right.node),
                _ => self.has_iter(*c),
            }),
        }
    }

    fn weight_filter(&self, alias: &str, id: PlanId) -> Option<String> {
        match &self.plan.node(id).op {
            PlanOp::Scan(ScanSource::Weights { id: w, .. }) if self.training() => {
                Some(format!("{alias}.id={w} and {alias}.iter=(select max(iter) from w_)"))
            }
            PlanOp::Scan(ScanSource::Weights { id: w, .. }) => Some(format!("{alias}.id={w}")),
            _ => None,
        }
    }

    /// `where` conditions and the alias providing `iter` for a two-sided join.
    fn conditions(&self, left: Operand, right: Operand) -> (Vec<String>, Option<&'static str>) {
        let mut conds = Vec::new();
        conds.extend(self.weight_filter("m", left.node));
        conds.extend(self.weight_filter("n", right.node));
        let (li, ri) = (self.has_iter(left.node), self.has_iter(right.node));
        let iter = match (li, ri) {
            (true, true) => {
                conds.push("n.iter=m.iter".into());
                Some("m")
            }
            (true, false) => Some("m"),
            (false, true) => Some("n"),
            (false, false) => None,
        };
        (conds, iter)
    }

    /// Body of one relation (no CTE header), indented at `ind`.
    fn body(&self, out: &mut Out, ind: usize, id: PlanId, tag: Option<usize>) -> Result<(), PlanError> {
        let node = self.plan.node(id);
        match &node.op {
            PlanOp::GroupAggregate { input, finisher } => {
                let PlanOp::JoinInner { left, right, predicate: JoinPredicate::InnerIndex } = self.plan.node(*input).op
                else {
                    return Err(PlanError::Unsupported("aggregate over a non-product join".into()));
                };
                let (m, n) = (roles("m", left.transposed), roles("n", right.transposed));
                let sum = "SUM(m.v*n.v)".to_string();
                let value = match finisher {
                    Some(f) => finisher_sql(*f, sum, false, &rel_sigmoid),
                    None => sum,
                };
                let (conds, iter) = self.conditions(left, right);
                let row = if m.row == "i" { format!("{}.i", m.alias) } else { format!("{}.{} as i", m.alias, m.row) };
                let col = if n.col == "j" { format!("{}.j", n.alias) } else { format!("{}.{} as j", n.alias, n.col) };
                let mut select = String::from("select ");
                if let Some(t) = tag {
                    let _ = write!(select, "{t}, ");
                }
                if let Some(a) = iter {
                    let _ = write!(select, "{a}.iter, ");
                }
                let _ = write!(select, "{row}, {col}, {value}");
                out.line(ind, &select);
                out.line(
                    ind,
                    &format!(
                        "from {} as m inner join {} as n on m.{}=n.{}",
                        self.relation(left.node)?,
                        self.relation(right.node)?,
                        if left.transposed { "i" } else { "j" },
                        if right.transposed { "j" } else { "i" },
                    ),
                );
                if !conds.is_empty() {
                    out.line(ind, &format!("where {}", conds.join(" and ")));
                }
                let mut group = String::from("group by ");
                if let Some(a) = iter {
                    let _ = write!(group, "{a}.iter, ");
                }
                let _ = write!(group, "m.{}, n.{}", m.row, n.col);
                out.line(ind, &group);
            }
            PlanOp::Project { input, expr } => {
                let value = scalar_sql(expr, &|s| if s == Side::M { "m.v".into() } else { "n.v".into() }, &rel_sigmoid);
                match self.plan.node(*input).op {
                    PlanOp::JoinInner { left, right, predicate: JoinPredicate::BothIndices } => {
                        let (m, n) = (roles("m", left.transposed), roles("n", right.transposed));
                        let (conds, iter) = self.conditions(left, right);
                        let row = if m.row == "i" { "m.i".to_string() } else { "m.j as i".to_string() };
                        let col = if m.col == "j" { "m.j".to_string() } else { "m.i as j".to_string() };
                        let iter_col = iter.map(|a| format!("{a}.iter, ")).unwrap_or_default();
                        out.line(ind, &format!("select {iter_col}{row}, {col}, {value}"));
                        out.line(
                            ind,
                            &format!("from {} as m inner join {} as n", self.relation(left.node)?, self.relation(right.node)?),
                        );
                        out.line(ind + 1, &format!("on m.{}=n.{} and m.{}=n.{}", m.row, n.row, m.col, n.col));
                        if !conds.is_empty() {
                            out.line(ind, &format!("where {}", conds.join(" and ")));
                        }
                    }
                    PlanOp::JoinInner { .. } => {
                        return Err(PlanError::Unsupported("projection over a product join".into()))
                    }
                    _ => {
                        let iter_col = if self.has_iter(*input) { "m.iter, " } else { "" };
                        out.line(ind, &format!("select {iter_col}m.i, m.j, {value}"));
                        out.line(ind, &format!("from {} as m", self.relation(*input)?));
                        if let Some(c) = self.weight_filter("m", *input) {
                            out.line(ind, &format!("where {c}"));
                        }
                    }
                }
            }
            PlanOp::Union(branches) => {
                for (k, (t, b)) in branches.iter().enumerate() {
                    if k > 0 {
                        out.line(ind, "union");
                    }
                    self.body(out, ind, *b, Some(*t))?;
                }
            }
            PlanOp::Rank { input } => self.rank(out, ind, *input)?,
            PlanOp::Scan(_) => {
                out.line(ind, &format!("select * from {}", self.relation(id)?));
            }
            PlanOp::JoinInner { .. } | PlanOp::RecursiveLoop { .. } => {
                return Err(PlanError::Unsupported(format!("node {} is not a relation body", id.index())))
            }
        }
        Ok(())
    }

    fn rank(&self, out: &mut Out, ind: usize, input: PlanId) -> Result<(), PlanError> {
        let rel = self.relation(input)?;
        let iter = self.has_iter(input);
        match self.dialect {
            SqlDialect::WindowRanking => {
                let (cols, part) = if iter { ("r.iter, r.i, r.j", "i, iter") } else { ("r.i, r.j", "i") };
                let inner_cols = if iter { "iter, i, j" } else { "i, j" };
                out.line(ind, &format!("select {cols}"));
                out.line(
                    ind,
                    &format!("from (select {inner_cols}, rank() over (partition by {part} order by v desc, j) as rank"),
                );
                out.line(ind + 1, &format!("from {rel}) as r"));
                out.line(ind, "where r.rank=1");
            }
            _ => {
                let (cols, same) = if iter { ("p.iter, p.i, p.j", "q.iter=p.iter and q.i=p.i") } else { ("p.i, p.j", "q.i=p.i") };
                out.line(ind, &format!("select {cols}"));
                out.line(ind, &format!("from {rel} as p"));
                out.line(ind, "where not exists (");
                out.line(ind + 2, &format!("select * from {rel} as q"));
                out.line(ind + 2, &format!("where {same} and q.v>p.v)"));
                out.line(ind + 1, "and not exists (");
                out.line(ind + 2, &format!("select * from {rel} as q"));
                out.line(ind + 2, &format!("where {same} and q.v=p.v and q.j<p.j)"));
            }
        }
        Ok(())
    }

    fn columns(&self, id: PlanId) -> &'static str {
        match &self.plan.node(id).op {
            PlanOp::Union(_) => "(id,i,j,v)",
            PlanOp::Rank { input } if self.has_iter(*input) => "(iter,i,j)",
            PlanOp::Rank { .. } => "(i,j)",
            _ if self.has_iter(id) => "(iter,i,j,v)",
            _ => "(i,j,v)",
        }
    }

    fn render(&self) -> Result<String, PlanError> {
        let mut out = Out::default();
        match self.plan.kind {
            PlanKind::Training => self.render_training(&mut out)?,
            PlanKind::Inference { ranked } => {
                let named: Vec<PlanId> = self.plan.nodes().filter(|(_, n)| n.name.is_some()).map(|(id, _)| id).collect();
                self.ctes(&mut out, 0, &named, "with ")?;
                if ranked {
                    out.line(0, "select pred.iter, count(*)*1.0/(select count(distinct i) from one_hot) as accuracy");
                    out.line(0, "from pred inner join test on pred.i=test.i and pred.j=test.j");
                    out.line(0, "group by pred.iter");
                    out.line(0, "order by pred.iter;");
                } else {
                    let root = self.relation(self.plan.root())?;
                    out.line(0, &format!("select iter, i, j, v from {root}"));
                    out.line(0, "order by iter, i, j;");
                }
            }
            PlanKind::Expression => {
                let root = self.plan.root();
                let named: Vec<PlanId> = self
                    .plan
                    .nodes()
                    .filter(|(id, n)| n.name.is_some() && *id != root)
                    .map(|(id, _)| id)
                    .collect();
                self.ctes(&mut out, 0, &named, "with ")?;
                self.body(&mut out, 0, root, None)?;
                terminate(&mut out);
            }
        }
        Ok(out.text)
    }

    /// `name(cols) as ( body )` blocks chained with `), `.
    fn ctes(&self, out: &mut Out, ind: usize, ids: &[PlanId], first: &str) -> Result<(), PlanError> {
        for (k, id) in ids.iter().enumerate() {
            let name = self.plan.node(*id).name.clone().unwrap_or_default();
            let lead = if k == 0 { first.to_string() } else { "), ".to_string() };
            out.line(ind, &format!("{lead}{name}{} as (", self.columns(*id)));
            self.body(out, ind + 1, *id, None)?;
        }
        if !ids.is_empty() {
            out.line(ind, ")");
        }
        Ok(())
    }

    fn render_training(&self, out: &mut Out) -> Result<(), PlanError> {
        let root = self.plan.root();
        let base = match self.plan.recursive_loop() {
            Some((base, ..)) => base,
            None => root,
        };
        let PlanOp::Union(branches) = &self.plan.node(base).op else {
            return Err(PlanError::Unsupported("training base is not a union".into()));
        };
        let base_lines: Vec<String> = branches
            .iter()
            .map(|(t, b)| Ok(format!("select 0,{t},* from {}", self.relation(*b)?)))
            .collect::<Result<_, PlanError>>()?;
        let Some((_, step, update, bound)) = self.plan.recursive_loop() else {
            out.line(0, "with w (iter,id,i,j,v) as (");
            write_union(out, 1, &base_lines, false);
            out.line(0, ")");
            out.line(0, "select * from w;");
            return Ok(());
        };
        out.line(0, "with recursive w (iter,id,i,j,v) as (");
        write_union(out, 1, &base_lines, true);
        out.line(1, "union all");
        out.line(1, "(with w_ as (");
        out.line(2, "select * from w");
        if let Some(b) = self.plan.batch {
            let chunk = format!("(select max(iter) from w_)%{}", b.chunks());
            for t in ["img", "one_hot"] {
                out.line(1, &format!("), {t}_b(i,j,v) as ("));
                out.line(2, &format!("select m.i-{}*({chunk}), m.j, m.v", b.size));
                out.line(2, &format!("from {t} as m"));
                out.line(2, &format!("where (m.i-1)/{}={chunk}", b.size));
            }
        }
        self.ctes(out, 1, step, "), ")?;
        let PlanOp::Project { expr, .. } = &self.plan.node(update).op else {
            return Err(PlanError::Unsupported("update is not a projection".into()));
        };
        let value = scalar_sql(expr, &|s| if s == Side::M { "w.v".into() } else { "d_w.v".into() }, &rel_sigmoid);
        out.line(1, &format!("select iter+1, w.id, w.i, w.j, {value}"));
        out.line(1, "from w_ as w, d_w");
        out.line(1, &format!("where iter < {bound} and w.id=d_w.id and w.i=d_w.i and w.j=d_w.j)"));
        out.line(0, ")");
        out.line(0, "select * from w;");
        Ok(())
    }
}

fn write_union(out: &mut Out, ind: usize, lines: &[String], parens: bool) {
    for (k, l) in lines.iter().enumerate() {
        let open = if parens && k == 0 { "(" } else if parens { " " } else { "" };
        let close = if parens && k + 1 == lines.len() { ")" } else { "" };
        let sep = if k + 1 < lines.len() { " union" } else { "" };
        out.line(ind, &format!("{open}{l}{sep}{close}"));
    }
}

fn terminate(out: &mut Out) {
    if out.text.ends_with('\n') {
        out.text.pop();
    }
    out.text.push_str(";\n");
}

struct ArrayRenderer<'a> {
    plan: &'a QueryPlan,
}

fn array_sigmoid(arg: String, _compound: bool) -> String {
    format!("sig({arg})")
}

impl ArrayRenderer<'_> {
    fn operand(&self, op: Operand, inline: bool) -> Result<String, PlanError> {
        let node = self.plan.node(op.node);
        let name = match &node.op {
            PlanOp::Scan(ScanSource::Table(t)) => t.clone(),
            PlanOp::Scan(ScanSource::Weights { param, .. }) => param.clone(),
            PlanOp::Scan(ScanSource::LoopState) => "w".into(),
            _ if inline => self.expr(op.node, true)?,
            _ => node.name.clone().ok_or_else(|| PlanError::Unsupported("unnamed array operand".into()))?,
        };
        Ok(if op.transposed { format!("transpose({name})") } else { name })
    }

    /// Array expression of a relation; `inline` expands named inputs.
    fn expr(&self, id: PlanId, inline: bool) -> Result<String, PlanError> {
        match &self.plan.node(id).op {
            PlanOp::GroupAggregate { input, finisher } => {
                let PlanOp::JoinInner { left, right, .. } = self.plan.node(*input).op else {
                    return Err(PlanError::Unsupported("aggregate over a non-join".into()));
                };
                let prod = format!("{}**{}", self.operand(left, inline)?, self.operand(right, inline)?);
                Ok(match finisher {
                    Some(f) => finisher_sql(*f, prod, false, &array_sigmoid),
                    None => prod,
                })
            }
            PlanOp::Project { input, expr } => {
                let (m, n) = match self.plan.node(*input).op {
                    PlanOp::JoinInner { left, right, .. } => {
                        (self.operand(left, inline)?, self.operand(right, inline)?)
                    }
                    _ => (self.operand(Operand::plain(*input), inline)?, String::new()),
                };
                let (m, n) = (wrap_compound(m), wrap_compound(n));
                Ok(scalar_sql(expr, &|s| if s == Side::M { m.clone() } else { n.clone() }, &array_sigmoid))
            }
            PlanOp::Scan(_) => self.operand(Operand::plain(id), inline),
            _ => Err(PlanError::Dialect { dialect: "array", what: format!("node {} has no array form", id.index()) }),
        }
    }

    fn render(&self) -> Result<String, PlanError> {
        let mut out = Out::default();
        match self.plan.kind {
            PlanKind::Training => self.training(&mut out)?,
            PlanKind::Inference { ranked } => {
                let root = if ranked {
                    match self.plan.node(self.plan.root()).op {
                        PlanOp::Rank { input } => input,
                        _ => self.plan.root(),
                    }
                } else {
                    self.plan.root()
                };
                let model = self.expr(root, true)?;
                if ranked {
                    out.line(0, "with test as (");
                    out.line(1, "select correct, count(*) as cnt");
                    out.line(1, "from (");
                    out.line(2, &format!("select highestposition({model})=highestposition(one_hot) as correct"));
                    out.line(2, "from data, weights) tmp");
                    out.line(1, "group by correct)");
                    out.line(0, "select cnt*1.0/(select sum(cnt) from test t2)");
                    out.line(0, "from test t1 where correct=true;");
                } else {
                    out.line(0, &format!("select {model} as a_ho"));
                    out.line(0, "from data, weights;");
                }
            }
            PlanKind::Expression => {
                let e = self.expr(self.plan.root(), true)?;
                out.line(0, &format!("select {e} as result;"));
            }
        }
        Ok(out.text)
    }

    fn training(&self, out: &mut Out) -> Result<(), PlanError> {
        if self.plan.batch.is_some() {
            return Err(PlanError::Dialect { dialect: "array", what: "mini-batch training".into() });
        }
        let params: Vec<&str> = self.plan.params.iter().map(String::as_str).collect();
        render_array_transform_into(out, "weights", &params);
        render_array_transform_into(out, "data", &["img", "one_hot"]);
        let cols = params.join(",");
        out.line(0, &format!("with recursive w (id,{cols}) as ("));
        out.line(1, &format!("select 0, {} from weights", params.join(", ")));
        let Some((_, step, _, bound)) = self.plan.recursive_loop() else {
            out.line(0, ")");
            out.line(0, "select * from w;");
            return Ok(());
        };
        out.line(1, "union all");
        out.line(1, "select id+1,");
        let gamma = fmt_const(self.plan.learning_rate);
        let d_w = *step.last().expect("step ends with d_w");
        let PlanOp::Union(branches) = &self.plan.node(d_w).op else {
            return Err(PlanError::Unsupported("step does not end with the gradient union".into()));
        };
        for (k, (t, b)) in branches.iter().enumerate() {
            let sep = if k + 1 < branches.len() { "," } else { "" };
            out.line(2, &format!("{} - {gamma} * sum({}){sep}", params[*t], self.expr(*b, false)?));
        }
        let vars: Vec<PlanId> = step[..step.len() - 1].to_vec();
        let depth = vars.len();
        for (k, v) in vars.iter().rev().enumerate() {
            let name = self.plan.node(*v).name.clone().unwrap_or_default();
            out.line(1 + k, &format!("from (select {} as {name}, *", self.expr(*v, false)?));
        }
        out.line(1 + depth, "from (select * from data) d, w");
        let mut close = format!("where id < {bound}");
        for k in (1..=depth).rev() {
            let _ = write!(close, ") t{k}");
        }
        out.line(1 + depth, &close);
        out.line(1, &format!("group by id, {}", params.join(", ")));
        out.line(0, ")");
        out.line(0, "select * from w;");
        Ok(())
    }
}

fn render_array_transform_into(out: &mut Out, table: &str, columns: &[&str]) {
    let decl: Vec<String> = columns.iter().map(|c| format!("{c} float[][]")).collect();
    out.line(0, &format!("create table {table} ({});", decl.join(", ")));
    out.line(0, &format!("insert into {table} (select"));
    for (k, c) in columns.iter().enumerate() {
        let sep = if k + 1 < columns.len() { "," } else { ");" };
        out.line(1, "(select array_agg(js order by i) from (");
        out.line(2, "select i, array_agg(v order by j) as js");
        out.line(2, &format!("from {c} group by i) tmp){sep}"));
    }
}

/// Rebuilds array columns from `(i, j, v)` tables: rows ordered by `j`
/// within each `i`, then rows ordered by `i`.
pub fn render_array_transform(table: &str, columns: &[&str]) -> String {
    let mut out = Out::default();
    render_array_transform_into(&mut out, table, columns);
    out.text
}

/// Source table layout for the relational transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub source: String,
    pub csv_path: String,
    pub attributes: Vec<String>,
    pub label: String,
    pub num_classes: usize,
    pub scale: f64,
}

impl TransformSpec {
    pub fn iris() -> Self {
        Self {
            source: "iris".into(),
            csv_path: "./iris.csv".into(),
            attributes: ["sepal_length", "sepal_width", "petal_length", "petal_width"].map(String::from).to_vec(),
            label: "species".into(),
            num_classes: 3,
            scale: 10.0,
        }
    }
}

/// Loads the source CSV and builds `img` (scaled features, row number as
/// `i`, attribute position as `j`) and a dense `one_hot` by right outer join
/// of the label positions against all index pairs.
pub fn render_one_hot(spec: &TransformSpec) -> String {
    let mut out = Out::default();
    let src = &spec.source;
    let cols: Vec<String> = spec.attributes.iter().map(|a| format!("{a} float")).collect();
    out.line(0, &format!("create table if not exists {src} (id serial, {}, {} int);", cols.join(", "), spec.label));
    out.line(0, &format!("copy {src} from '{}' delimiter ',' HEADER CSV;", spec.csv_path));
    out.line(0, "create table img (i int, j int, v float);");
    out.line(0, "create table one_hot (i int, j int, v int);");
    for (k, a) in spec.attributes.iter().enumerate() {
        out.line(0, "insert into img (");
        out.line(1, &format!("select id, {}, {a}/{} from {src});", k + 1, fmt_const(spec.scale)));
    }
    out.line(0, "insert into one_hot (");
    out.line(1, "select n.i, n.j, coalesce(l.v,0)");
    out.line(1, &format!("from (select id, {}+1 as label, 1 as v", spec.label));
    out.line(3, &format!("from {src}) l right outer join"));
    out.line(2, "(select a.i, b.j");
    out.line(2, " from (select generate_series as i");
    out.line(2, &format!("       from generate_series(1,(select count(*) from {src}))) a,"));
    out.line(2, "      (select generate_series as j");
    out.line(2, &format!("       from generate_series(1,{})) b", spec.num_classes));
    out.line(2, ") n on n.i=l.id and n.j=l.label");
    out.line(1, "order by n.i, n.j);");
    out.text
}

/// Creates `w_xh` and `w_ho` filled with uniform values in [-1, 1).
pub fn render_weight_init(dims: &MlpDims) -> String {
    let mut out = Out::default();
    let tables = [("w_xh", dims.inputs, dims.hidden), ("w_ho", dims.hidden, dims.outputs)];
    for (t, _, _) in tables {
        out.line(0, &format!("create table {t} (i int, j int, v float);"));
    }
    for (t, r, c) in tables {
        out.line(0, &format!("insert into {t} ("));
        out.line(1, "select i.*, j.*, random()*2-1");
        out.line(1, &format!("from generate_series(1,{r}) i, generate_series(1,{c}) j);"));
    }
    out.text
}

/// Matrix operators one training step issues under `ArrayExtended`: each
/// product, transpose, `sig` and entrywise operator, plus per weight the
/// gradient product, its transposes, `sum`, the scaling and the subtraction.
pub fn array_operator_count(plan: &QueryPlan) -> usize {
    let Some((_, step, _, _)) = plan.recursive_loop() else {
        return 0;
    };
    let transposes = |id: PlanId| match plan.node(id).op {
        PlanOp::JoinInner { left, right, .. } => left.transposed as usize + right.transposed as usize,
        _ => 0,
    };
    let node_count = |id: PlanId| match &plan.node(id).op {
        PlanOp::GroupAggregate { input, finisher } => {
            1 + transposes(*input) + finisher.map_or(0, |f| (f != Activation::Identity) as usize)
        }
        PlanOp::Project { input, expr } => expr.operator_count() + transposes(*input),
        _ => 0,
    };
    step.iter()
        .map(|s| match &plan.node(*s).op {
            PlanOp::Union(branches) => branches.iter().map(|(_, b)| node_count(*b) + 3).sum(),
            _ => node_count(*s),
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::mlp_program;
    use crate::exprgraph::{ExprGraph, Shape};
    use crate::planner::{lower, lower_expression, lower_inference, LowerConfig};
    use std::collections::BTreeMap;

    fn program() -> crate::autodiff::GradientProgram {
        mlp_program(MlpDims::new(4, 20, 3, 150), 0.01).unwrap()
    }

    #[test]
    fn matmul_anchor() {
        let mut g = ExprGraph::new();
        let a = g.input("m").unwrap();
        let b = g.input("n").unwrap();
        let p = g.matmul(a, b).unwrap();
        let decl: BTreeMap<String, Shape> =
            [("m".to_string(), Shape::new(2, 2).unwrap()), ("n".to_string(), Shape::new(2, 2).unwrap())].into();
        g.infer_shapes(&decl).unwrap();
        let sql = render_sql(&lower_expression(&g, p).unwrap(), SqlDialect::Sql92Relational).unwrap();
        assert!(sql.contains("SUM(m.v*n.v)"), "{sql}");
        assert!(sql.contains("group by m.i, n.j"), "{sql}");
    }

    #[test]
    fn training_text_structure() {
        let plan = lower(&program(), &LowerConfig::full_batch(20, 0.01)).unwrap();
        let sql = render_sql(&plan, SqlDialect::Sql92Relational).unwrap();
        for needle in [
            "with recursive w (iter,id,i,j,v) as (",
            "(with w_ as (",
            "select * from w\n",
            "n.iter=(select max(iter) from w_)",
            "select m.i, m.j, 2*(m.v-n.v)",
            "select m.i, m.j, m.v*n.v*(1-n.v)",
            "select m.i, n.i as j, SUM(m.v*n.v)",
            "select 0, m.j as i, n.j, SUM(m.v*n.v)",
            "select iter+1, w.id, w.i, w.j, w.v-0.01*d_w.v",
            "where iter < 20 and w.id=d_w.id and w.i=d_w.i and w.j=d_w.j",
            "1/(1+exp(-SUM(m.v*n.v)))",
        ] {
            assert!(sql.contains(needle), "missing {needle:?} in\n{sql}");
        }
        assert_eq!(sql, render_sql(&plan, SqlDialect::Sql92Relational).unwrap());
    }

    #[test]
    fn inference_dialects() {
        let plan = lower_inference(&program(), true).unwrap();
        let sql92 = render_sql(&plan, SqlDialect::Sql92Relational).unwrap();
        assert!(sql92.contains("not exists") && !sql92.contains("over ("));
        let window = render_sql(&plan, SqlDialect::WindowRanking).unwrap();
        assert!(window.contains("rank() over (partition by i, iter order by v desc, j)"));
        let array = render_sql(&plan, SqlDialect::ArrayExtended).unwrap();
        assert!(array.contains("highestposition(sig(sig(img**w_xh)**w_ho))=highestposition(one_hot)"), "{array}");
        let strict = RenderOptions { anti_join: false };
        assert!(matches!(
            render_sql_with(&plan, SqlDialect::Sql92Relational, &strict),
            Err(PlanError::Dialect { .. })
        ));
    }

    #[test]
    fn one_hot_and_init_scripts() {
        let sql = render_one_hot(&TransformSpec::iris());
        assert!(sql.contains("right outer join") && sql.contains("coalesce"));
        assert!(sql.contains("select id, 1, sepal_length/10 from iris);"));
        let init = render_weight_init(&MlpDims::new(4, 20, 3, 150));
        assert!(init.contains("generate_series(1,4) i, generate_series(1,20) j"));
    }

    #[test]
    fn array_training_counts_operators() {
        let plan = lower(&program(), &LowerConfig::full_batch(20, 0.01)).unwrap();
        let sql = render_sql(&plan, SqlDialect::ArrayExtended).unwrap();
        assert!(sql.contains("array_agg(v order by j)"));
        assert!(sql.contains("w_xh - 0.01 * sum(transpose(img)**d_xh)"), "{sql}");
        assert!(sql.contains("select l_ho*a_ho*(1-a_ho) as d_ho, *"), "{sql}");
        assert_eq!(array_operator_count(&plan), 24);
    }

    #[test]
    fn scalar_precedence() {
        let e = ScalarExpr::Mul(
            Box::new(ScalarExpr::Sub(Box::new(ScalarExpr::Value(Side::M)), Box::new(ScalarExpr::Value(Side::N)))),
            Box::new(ScalarExpr::Sub(Box::new(ScalarExpr::Const(1.0)), Box::new(ScalarExpr::Value(Side::N)))),
        );
        let s = scalar_sql(&e, &|s| if s == Side::M { "a".into() } else { "b".into() }, &rel_sigmoid);
        assert_eq!(s, "(a-b)*(1-b)");
        let nested = ScalarExpr::Sub(
            Box::new(ScalarExpr::Value(Side::M)),
            Box::new(ScalarExpr::Sub(Box::new(ScalarExpr::Value(Side::N)), Box::new(ScalarExpr::Const(1.0)))),
        );
        assert_eq!(scalar_sql(&nested, &|_| "x".into(), &rel_sigmoid), "x-(x-1)");
    }
}
