//! One line per acceptance criterion; exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use nnsql::autodiff::{mlp_program, MlpDims};
use nnsql::denseengine::{evaluate_roots, init_uniform, DenseMatrix, Prng};
use nnsql::harness::{bench, mem_report, BenchSweep, CellStatus, MemDims};
use nnsql::planner::analyze_pipelines;
use nnsql::planner::lower_inference;
use nnsql::relengine::{self, TupleStats};
use nnsql::trainer::{accuracy, gd_linreg, gd_linreg_from, infer_mlp, init_weights, train_mlp, BatchSize, Engine, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn summed_loss(x: &DenseMatrix, y: &DenseMatrix, w_xh: &DenseMatrix, w_ho: &DenseMatrix) -> f64 {
    let a = infer_mlp(x, w_xh, w_ho).unwrap();
    a.sub(y).unwrap().values().iter().map(|v| v * v).sum()
}

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-7 || diff <= 1e-4 * analytic.abs().max(numeric.abs())
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut prng = Prng::new(2024);
    let mut checked = 0;
    for case in 0..50 {
        let mut dim = |hi: u64| 1 + (prng.next_u64() % hi) as usize;
        let (n, m, h, l) = (dim(6), dim(8), dim(8), dim(8));
        let x = init_uniform(&mut prng, n, m).unwrap();
        let y = init_uniform(&mut prng, n, l).unwrap();
        let w_xh = init_uniform(&mut prng, m, h).unwrap();
        let w_ho = init_uniform(&mut prng, h, l).unwrap();
        let program = mlp_program(MlpDims::new(m, h, l, n), 0.01).unwrap();
        let bindings: BTreeMap<String, DenseMatrix> = [
            ("x".to_string(), x.clone()),
            ("y_ones".to_string(), y.clone()),
            ("w_xh".to_string(), w_xh.clone()),
            ("w_ho".to_string(), w_ho.clone()),
        ]
        .into();
        let (gx, go) = (program.grad("w_xh").unwrap(), program.grad("w_ho").unwrap());
        let values = evaluate_roots(&program.graph, &bindings, &[gx, go]).unwrap();
        for (which, grad) in [(0, values.get(gx).unwrap()), (1, values.get(go).unwrap())] {
            let base = if which == 0 { &w_xh } else { &w_ho };
            for k in 0..base.len() {
                let shifted = |d: f64| {
                    let mut v = base.values().to_vec();
                    v[k] += d;
                    let w = DenseMatrix::new(base.rows(), base.cols(), v).unwrap();
                    if which == 0 { summed_loss(&x, &y, &w, &w_ho) } else { summed_loss(&x, &y, &w_xh, &w) }
                };
                let eps = 1e-5;
                let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                let analytic = grad.values()[k];
                ensure(close(analytic, numeric), format!("case {case} param {which} entry {k}: {analytic} vs {numeric}"))?;
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, format!("took {secs:.2}s"))?;
    Ok(format!("50 instances, {checked} partials, {secs:.2}s"))
}

fn structural_backprop() -> Outcome {
    let expected = "\
a_xh = sig(x · w_xh)
a_ho = sig(a_xh · w_ho)
l_ho = 2 * (a_ho - y_ones)
d_ho = l_ho ∘ a_ho ∘ (1 - a_ho)
l_xh = d_ho · w_ho^T
d_xh = l_xh ∘ a_xh ∘ (1 - a_xh)
grad w_xh = x^T · d_xh
grad w_ho = a_xh^T · d_ho
";
    let rendered = common::iris_program().render();
    ensure(rendered == expected, format!("program differs:\n{rendered}"))?;
    let golden = fs::read_to_string(common::golden_path("gradient_program.txt")).map_err(|e| e.to_string())?;
    ensure(golden == rendered, "golden gradient_program.txt differs")?;
    Ok("eight-line program matches golden".into())
}

fn oracle_equivalence() -> Outcome {
    let mut prng = Prng::new(77);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let mut dim = |hi: u64| 1 + (prng.next_u64() % hi) as usize;
        let (a, b, c) = (dim(50), dim(50), dim(50));
        let op = case % 5;
        let l = init_uniform(&mut prng, a, b).unwrap();
        let (dense, rel) = match op {
            0 => {
                let r = init_uniform(&mut prng, b, c).unwrap();
                let mut s = TupleStats::new();
                (l.matmul(&r).unwrap(), relengine::matmul(&relengine::from_dense(&l), &relengine::from_dense(&r), &mut s).unwrap())
            }
            4 => (l.transpose(), relengine::transpose(&relengine::from_dense(&l))),
            _ => {
                let r = init_uniform(&mut prng, a, b).unwrap();
                let (rl, rr, mut s) = (relengine::from_dense(&l), relengine::from_dense(&r), TupleStats::new());
                match op {
                    1 => (l.hadamard(&r).unwrap(), relengine::hadamard(&rl, &rr, &mut s).unwrap()),
                    2 => (l.add(&r).unwrap(), relengine::add(&rl, &rr, &mut s).unwrap()),
                    _ => (l.sub(&r).unwrap(), relengine::sub(&rl, &rr, &mut s).unwrap()),
                }
            }
        };
        let back = relengine::to_dense(&rel).map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&dense));
    }
    ensure(worst <= 1e-9, format!("max-abs {worst:e}"))?;
    Ok(format!("200 cases, max-abs {worst:e}"))
}

fn memory_arithmetic() -> Outcome {
    let r = mem_report(MemDims { rows: 150, attrs: 4, hidden: 20, classes: 3 });
    let table: Vec<(&str, u64)> = r.rows.iter().map(|row| (row.variable.as_str(), row.entries)).collect();
    let want = [
        ("x", 600),
        ("a_xh", 3000),
        ("l_xh", 3000),
        ("d_xh", 3000),
        ("a_ho", 450),
        ("l_ho", 450),
        ("d_ho", 450),
        ("y_ones", 450),
        ("w_xh", 80),
        ("w_ho", 60),
    ];
    ensure(table == want, format!("rows {table:?}"))?;
    ensure(r.training.entries == 11540 && r.training.dense_bytes() == 92_320, "training sum")?;
    ensure((r.training.dense_bytes() as f64 / 1024.0).round() == 90.0, "training KiB")?;
    ensure(r.inference.entries == 4640 && r.inference.dense_bytes() as f64 / 1024.0 == 36.25, "inference subtotal")?;
    for row in r.rows.iter().chain([&r.training, &r.inference]) {
        ensure(row.relational_bytes() == 3 * row.dense_bytes(), format!("ratio for {}", row.variable))?;
    }
    Ok("11540 entries = 92320 B, inference 4640 = 36.25 KiB, ratio 3".into())
}

fn join_blowup() -> Outcome {
    let mut prng = Prng::new(5);
    for k in [10usize, 50, 100] {
        let a = relengine::from_dense(&init_uniform(&mut prng, k, k).unwrap());
        let b = relengine::from_dense(&init_uniform(&mut prng, k, k).unwrap());
        let mut stats = TupleStats::new();
        relengine::matmul(&a, &b, &mut stats).map_err(|e| e.to_string())?;
        let k = k as u64;
        ensure(stats.joined_tuples == k * k * k, format!("k={k}: joined {}", stats.joined_tuples))?;
        ensure(stats.joined_tuples == k * stats.output_tuples, format!("k={k}: not a k-fold"))?;
    }
    let mut stats = TupleStats::new();
    stats.record_matmul(1000, 1000, 1000);
    ensure(stats.joined_tuples == 1_000_000_000 && stats.joined_tuples / stats.output_tuples == 1000, "k=1000")?;
    Ok("k in {10,50,100} materialized; k=1000 gives a 1000-fold join".into())
}

fn cross_backend_training() -> Outcome {
    let ds = common::iris();
    let start = Instant::now();
    let base = TrainConfig { iterations: 10, hidden: 20, ..TrainConfig::default() };
    let dense = train_mlp(&ds.features, &ds.labels, 3, &base).map_err(|e| e.to_string())?;
    for engine in [Engine::Relational, Engine::PlanInterpreter] {
        let r = train_mlp(&ds.features, &ds.labels, 3, &TrainConfig { engine, ..base }).map_err(|e| e.to_string())?;
        let w = r.w_xh.max_abs_diff(&dense.w_xh).max(r.w_ho.max_abs_diff(&dense.w_ho));
        let l = r.loss.iter().zip(&dense.loss).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(w <= 1e-9 && l <= 1e-12, format!("{engine}: weights {w:e}, loss {l:e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.2}s"))?;
    Ok(format!("dense, relational and plan agree; {secs:.2}s"))
}

fn training_efficacy() -> Outcome {
    let ds = common::iris();
    let cfg = TrainConfig { iterations: 1000, hidden: 20, ..TrainConfig::default() };
    let r = train_mlp(&ds.features, &ds.labels, 3, &cfg).map_err(|e| e.to_string())?;
    let (w_xh, w_ho) = init_weights(cfg.seed, 4, 20, 3).unwrap();
    let acc0 = accuracy(&infer_mlp(&ds.features, &w_xh, &w_ho).unwrap(), &ds.labels);
    let acc = accuracy(&infer_mlp(&ds.features, &r.w_xh, &r.w_ho).unwrap(), &ds.labels);
    ensure(r.loss[999] < r.loss[0], format!("loss {} -> {}", r.loss[0], r.loss[999]))?;
    ensure(acc >= acc0 && acc >= 0.9, format!("accuracy {acc0} -> {acc}"))?;
    Ok(format!("loss {:.4} -> {:.4}, accuracy {acc0:.4} -> {acc:.4}", r.loss[0], r.loss[999]))
}

fn pipeline_analysis() -> Outcome {
    let plan = lower_inference(&common::iris_program(), false).map_err(|e| e.to_string())?;
    let report = analyze_pipelines(&plan);
    ensure(
        report.pipeline_count == 5 && report.breaker_count == 2,
        format!("{} pipelines, {} breakers", report.pipeline_count, report.breaker_count),
    )?;
    Ok("5 pipelines, 2 breakers".into())
}

fn sql_goldens() -> Outcome {
    let mut all = String::new();
    for (name, text) in common::golden_texts() {
        let golden = fs::read_to_string(common::golden_path(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(golden == text, format!("{name} differs from its golden"))?;
        all.push_str(&golden);
    }
    for anchor in ["SUM(m.v*n.v)", "coalesce", "1/(1+exp(-", "array_agg", "highestposition"] {
        ensure(all.contains(anchor), format!("missing anchor {anchor}"))?;
    }
    Ok(format!("{} files byte-identical, anchors present", common::golden_texts().len()))
}

fn linear_regression() -> Outcome {
    let data: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 / 10.0, 2.0 * i as f64 / 10.0 + 1.0)).collect();
    // Closed-form least squares.
    let n = data.len() as f64;
    let (sx, sy) = data.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (sxx, sxy) = data.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x * x, b + x * y));
    let a_ls = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let b_ls = (sy - a_ls * sx) / n;
    let (a, b) = *gd_linreg(&data, 0.01, 5000).map_err(|e| e.to_string())?.last().unwrap();
    ensure((a - a_ls).abs() <= 0.1 && (b - b_ls).abs() <= 0.1, format!("({a}, {b}) vs ({a_ls}, {b_ls})"))?;
    let line: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, i as f64)).collect();
    let fixed = gd_linreg_from(&line, (1.0, 0.0), 0.01, 100).map_err(|e| e.to_string())?;
    ensure(fixed.iter().all(|p| *p == (1.0, 0.0)), "stationary point moved")?;
    Ok(format!("(a, b) = ({a:.5}, {b:.5}), stationary point fixed"))
}

fn benchmark_trend() -> Outcome {
    let ds = common::iris();
    let sweep = BenchSweep {
        hidden: vec![20],
        batch: vec![BatchSize::Rows(1), BatchSize::Full],
        replicate: vec![1, 4, 16],
        engines: vec![Engine::Relational],
        iterations: 1,
        learning_rate: 0.01,
        seed: 1,
        jobs: 1,
        entry_budget: None,
    };
    let records = bench(&ds, &sweep).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for pair in records.chunks(2) {
        let (one, full) = (&pair[0], &pair[1]);
        ensure(one.status == CellStatus::Ok && full.status == CellStatus::Ok, "cell skipped")?;
        ensure(
            full.tuples_per_second > one.tuples_per_second,
            format!("{}: batch 1 {:.0}/s vs full {:.0}/s", one.dataset, one.tuples_per_second, full.tuples_per_second),
        )?;
        detail.push(format!("{} {:.1}x", one.dataset, full.tuples_per_second / one.tuples_per_second));
    }
    for r in &records {
        ensure(r.peak_bytes_relational >= 3 * r.peak_bytes_dense, format!("{}: byte ratio", r.dataset))?;
    }
    Ok(format!("full/1 throughput {}", detail.join(", ")))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_correctness),
        ("structural backprop", structural_backprop),
        ("oracle equivalence", oracle_equivalence),
        ("memory arithmetic", memory_arithmetic),
        ("join blow-up", join_blowup),
        ("cross-backend training", cross_backend_training),
        ("training efficacy", training_efficacy),
        ("pipeline analysis", pipeline_analysis),
        ("sql golden files", sql_goldens),
        ("linear regression", linear_regression),
        ("benchmark trend", benchmark_trend),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", k + 1),
            Err(why) => {
                println!("criterion {:>2} FAIL {name}: {why}", k + 1);
                failed.push(k + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
