//! Values frozen from an independent NumPy reimplementation of the same
//! generator, initialization and update rule on the bundled Iris fixture.

mod common;

use nnsql::trainer::{accuracy, infer_mlp, init_weights, train_mlp, TrainConfig};

fn assert_close(got: f64, want: f64, tol: f64) {
    assert!((got - want).abs() <= tol, "{got} vs {want}");
}

#[test]
fn initial_weights() {
    let (w_xh, w_ho) = init_weights(1, 4, 20, 3).unwrap();
    assert_eq!(&w_xh.row(0)[..3], &[0.1331231503445618, 0.49156351452540226, 0.9420055071735924]);
    assert_close(w_ho.get(19, 2), -0.2213640533334975, 1e-15);
}

#[test]
fn iris_reference_run() {
    let ds = common::iris();
    let cfg = TrainConfig { iterations: 1000, hidden: 20, ..TrainConfig::default() };
    let r = train_mlp(&ds.features, &ds.labels, 3, &cfg).unwrap();
    assert_close(r.loss[0], 0.9032887482498759, 1e-12);
    assert_close(r.loss[9], 0.8613171659084851, 1e-12);
    assert_close(r.loss[999], 0.3601226971422967, 1e-10);
    assert!(r.loss[9] < r.loss[0]);
    let w = r.w_xh.row(0);
    for (got, want) in w[..3].iter().zip([0.3907202896990565, 0.06530540096988015, 1.1066064973553196]) {
        assert_close(*got, want, 1e-9);
    }
    assert_close(r.w_ho.get(19, 2), 0.15250806288618837, 1e-9);
    let acc = accuracy(&infer_mlp(&ds.features, &r.w_xh, &r.w_ho).unwrap(), &ds.labels);
    assert_close(acc, 146.0 / 150.0, 1e-12);
}
