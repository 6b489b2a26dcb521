mod common;

use nnsql::harness::{
    conformance, encode, reference_shim, write_encoded, ConformanceError, ConformanceSetup, ExecRequest,
    SqlExecutor, SqlTexts,
};
use nnsql::planner::{SqlDialect, TransformSpec};
use nnsql::relengine::{Entry, RelMatrix};
use nnsql::trainer::{accuracy, infer_mlp, init_weights};

fn setup(dialect: SqlDialect) -> ConformanceSetup {
    let mut transform = TransformSpec::iris();
    transform.csv_path = common::fixture("iris.csv").display().to_string();
    ConformanceSetup { transform, hidden: 5, iterations: 3, learning_rate: 0.01, seed: 4, dialect }
}

#[test]
fn iris_fixture_encodes() {
    let ds = common::iris();
    assert_eq!((ds.rows(), ds.num_classes), (150, 3));
    assert_eq!(ds.features.row(0), &[0.51, 0.35, 0.13999999999999999, 0.02]);
    let (img, one_hot) = encode(&ds).unwrap();
    assert_eq!(img.len(), 600);
    assert_eq!(&one_hot.sorted_entries()[..3], &[Entry::new(1, 1, 1.0), Entry::new(1, 2, 0.0), Entry::new(1, 3, 0.0)]);
    let dir = tempfile::tempdir().unwrap();
    write_encoded(dir.path(), &img, &one_hot).unwrap();
    let back = RelMatrix::from_csv(&std::fs::read_to_string(dir.path().join("img.csv")).unwrap()).unwrap();
    assert_eq!(back, img);
}

#[test]
fn reference_shim_passes_itself() {
    let ds = common::iris();
    for dialect in [SqlDialect::Sql92Relational, SqlDialect::WindowRanking] {
        let s = setup(dialect);
        let shim = reference_shim(&ds, &s).unwrap();
        let report = conformance(&ds, &s, &SqlTexts::default(), Some(&shim)).unwrap();
        assert!(report.all_passed(), "{}", report.to_text());
        assert_eq!(report.outcomes.len(), 3);
    }
}

#[test]
fn corrupted_sql_fails_with_parse_error() {
    let ds = common::iris();
    let s = setup(SqlDialect::Sql92Relational);
    let shim = reference_shim(&ds, &s).unwrap();
    let texts = SqlTexts { train: Some("with recursive w as (select oops".into()), ..SqlTexts::default() };
    let report = conformance(&ds, &s, &texts, Some(&shim)).unwrap();
    let train = report.outcomes.iter().find(|o| o.query == "train").unwrap();
    assert!(!train.passed && train.detail.starts_with("parse error"), "{}", train.detail);
    assert!(!report.all_passed());
}

#[test]
fn no_executor_disables_the_mode() {
    let ds = common::iris();
    let err = conformance(&ds, &setup(SqlDialect::Sql92Relational), &SqlTexts::default(), None).unwrap_err();
    assert!(matches!(err, ConformanceError::Disabled(_)));
    let s = setup(SqlDialect::Sql92Relational);
    let shim = reference_shim(&ds, &s).unwrap();
    let array = ConformanceSetup { dialect: SqlDialect::ArrayExtended, ..s };
    let err = conformance(&ds, &array, &SqlTexts::default(), Some(&shim)).unwrap_err();
    assert!(matches!(err, ConformanceError::Dialect("array")));
}

#[test]
fn tied_predictions_follow_argmax_rule() {
    // Zero weights make every probability 0.5, so every row ties and the
    // lowest class wins: accuracy is the share of label 0.
    let ds = common::iris();
    let mut s = setup(SqlDialect::WindowRanking);
    s.iterations = 0;
    s.seed = 0;
    let (w_xh, w_ho) = init_weights(0, 4, 5, 3).unwrap();
    let zero_ho = nnsql::denseengine::DenseMatrix::zeros(5, 3).unwrap();
    let dense = accuracy(&infer_mlp(&ds.features, &w_xh, &zero_ho).unwrap(), &ds.labels);
    assert_eq!(dense, 50.0 / 150.0);
    assert!(w_ho.values().iter().any(|v| *v != 0.0));

    let shim = reference_shim(&ds, &s).unwrap();
    let infer = shim
        .execute(&ExecRequest {
            schema: String::new(),
            load: nnsql::harness::conformance::load_statements(&[
                ("img", &[], &encode(&ds).unwrap().0),
                ("one_hot", &[], &encode(&ds).unwrap().1),
                ("w", &[0.0, 0.0], &nnsql::relengine::from_dense(&w_xh)),
                ("w", &[0.0, 1.0], &nnsql::relengine::from_dense(&zero_ho)),
            ]),
            query: nnsql::planner::render_sql(&common::inference_plan_for(5), SqlDialect::WindowRanking).unwrap(),
        })
        .unwrap();
    let row = infer.lines().nth(1).unwrap();
    let acc: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(acc, dense);
}
