#![allow(dead_code)]

use std::path::PathBuf;

use nnsql::autodiff::{mlp_program, GradientProgram, MlpDims};
use nnsql::harness::{load_csv, Dataset, Schema};
use nnsql::planner::{
    lower, lower_inference, render_one_hot, render_sql, render_weight_init, BatchSpec, LowerConfig, QueryPlan, SqlDialect,
    TransformSpec,
};

pub const GOLDEN_ITERATIONS: usize = 100;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn iris() -> Dataset {
    load_csv(&fixture("iris.csv"), Schema::Iris, None, None).expect("bundled iris fixture")
}

pub fn iris_program() -> GradientProgram {
    mlp_program(MlpDims::new(4, 20, 3, 150), 0.01).unwrap()
}

pub fn training_plan() -> QueryPlan {
    lower(&iris_program(), &LowerConfig::full_batch(GOLDEN_ITERATIONS, 0.01)).unwrap()
}

pub fn inference_plan() -> QueryPlan {
    lower_inference(&iris_program(), true).unwrap()
}

/// Every checked-in golden file and the text it must hold.
pub fn golden_texts() -> Vec<(&'static str, String)> {
    let train = training_plan();
    let infer = inference_plan();
    let batched_program = mlp_program(MlpDims::new(4, 20, 3, 50), 0.01).unwrap();
    let batched = lower(
        &batched_program,
        &LowerConfig { iterations: 10, learning_rate: 0.01, batch: Some(BatchSpec { size: 50, rows: 150 }) },
    )
    .unwrap();
    vec![
        ("gradient_program.txt", iris_program().render()),
        ("training_plan.txt", train.to_string()),
        ("sql92_one_hot.sql", render_one_hot(&TransformSpec::iris())),
        ("sql92_weight_init.sql", render_weight_init(&iris_program().dims)),
        ("sql92_train.sql", render_sql(&train, SqlDialect::Sql92Relational).unwrap()),
        ("sql92_train_batch50.sql", render_sql(&batched, SqlDialect::Sql92Relational).unwrap()),
        ("sql92_infer.sql", render_sql(&infer, SqlDialect::Sql92Relational).unwrap()),
        ("window_infer.sql", render_sql(&infer, SqlDialect::WindowRanking).unwrap()),
        ("array_train.sql", render_sql(&train, SqlDialect::ArrayExtended).unwrap()),
        ("array_infer.sql", render_sql(&infer, SqlDialect::ArrayExtended).unwrap()),
    ]
}

pub fn inference_plan_for(hidden: usize) -> QueryPlan {
    lower_inference(&mlp_program(MlpDims::new(4, hidden, 3, 150), 0.01).unwrap(), true).unwrap()
}
