use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use uapforge::eval::{
    apply_perturbation, fooling_ratio, fooling_ratio_parallel, report_write, transfer_matrix, EvalReport, ReportFormat,
    TaggedDelta,
};
use uapforge::model::{build_model, predict, ModelSpec, ModelState};
use uapforge::{Dataset, Tensor};

const SHAPE: [usize; 3] = [1, 6, 6];

fn models() -> Vec<(String, ModelState<f64>)> {
    ["linear", "mlp", "cnn-tiny"]
        .iter()
        .enumerate()
        .map(|(i, arch)| {
            let m = build_model(&ModelSpec::named(arch, &SHAPE, 4).unwrap(), i as u64 + 3).unwrap();
            (arch.to_string(), m)
        })
        .collect()
}

fn uniform(n: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[n, 1, 6, 6], |_| rng.random_range(0.0..1.0));
    let labels = (0..n).map(|i| i % 4).collect();
    Dataset::new(format!("uniform-{n}-{seed}"), x, Some(labels)).unwrap()
}

fn random_delta(amp: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&SHAPE, |_| rng.random_range(-amp..amp))
}

/// Per-sample loop with no batching, chunking or threads.
fn naive(model: &ModelState<f64>, ds: &Dataset<f64>, delta: &Tensor<f64>) -> (usize, usize, usize) {
    let (mut changed, mut clean_ok, mut flipped) = (0, 0, 0);
    let labels = ds.labels().unwrap();
    for i in 0..ds.len() {
        let xi = ds.images().outer_slice(i).to_vec();
        let pi: Vec<f64> = xi.iter().zip(delta.data()).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect();
        let a = predict(model, &Tensor::new(vec![1, 1, 6, 6], xi).unwrap()).unwrap()[0];
        let b = predict(model, &Tensor::new(vec![1, 1, 6, 6], pi).unwrap()).unwrap()[0];
        changed += usize::from(a != b);
        clean_ok += usize::from(a == labels[i]);
        flipped += usize::from(a == labels[i] && b != labels[i]);
    }
    (changed, clean_ok, flipped)
}

#[test]
fn matches_naive_loop_on_200_samples() {
    let ds = uniform(200, 1);
    for (k, (_, m)) in models().iter().enumerate() {
        for amp in [0.02, 0.1, 0.4] {
            let delta = random_delta(amp, k as u64);
            let r = fooling_ratio(m, &ds, &delta).unwrap();
            let (changed, clean_ok, flipped) = naive(m, &ds, &delta);
            assert_eq!(r.n_changed, changed);
            assert_eq!(r.n_evaluated, 200);
            assert_eq!(r.fooling_ratio, changed as f64 / 200.0);
            assert_eq!(r.clean_accuracy, Some(clean_ok as f64 / 200.0));
            assert_eq!(r.n_correct_to_wrong, Some(flipped));
        }
    }
}

#[test]
fn zero_delta_never_fools() {
    let ds = uniform(150, 2);
    for (_, m) in models() {
        let r = fooling_ratio(&m, &ds, &Tensor::zeros(&SHAPE)).unwrap();
        assert_eq!(r.n_changed, 0);
        assert_eq!(r.clean_accuracy, r.perturbed_accuracy);
    }
}

#[test]
fn parallel_width_does_not_change_counts() {
    // More than one evaluation chunk so the threads have work to split.
    let ds = uniform(300, 3);
    let delta = random_delta(0.3, 9);
    for (_, m) in models() {
        let serial = fooling_ratio(&m, &ds, &delta).unwrap();
        for width in [2, 3, 7] {
            assert_eq!(fooling_ratio_parallel(&m, &ds, &delta, width).unwrap(), serial);
        }
    }
}

#[test]
fn perturbation_is_clamped_to_the_unit_box() {
    let x = Tensor::new(vec![2, 2], vec![0.95, 0.05, 0.5, 0.5]).unwrap();
    let d = Tensor::vector(vec![0.1, -0.1]);
    assert_eq!(apply_perturbation(&x, &d).unwrap().data(), &[1.0, 0.0, 0.6, 0.4]);
    assert!(apply_perturbation(&x, &Tensor::vector(vec![0.1])).is_err());
}

#[test]
fn transfer_matrix_is_consistent_with_direct_calls() {
    let ds = uniform(120, 4);
    let targets = models();
    let deltas = vec![
        TaggedDelta { surrogate: "linear".into(), delta: random_delta(0.2, 1) },
        TaggedDelta { surrogate: "zero".into(), delta: Tensor::zeros(&SHAPE) },
        TaggedDelta { surrogate: "cnn-tiny".into(), delta: random_delta(0.3, 2) },
    ];
    let tm = transfer_matrix(&targets, &deltas, &ds, 2).unwrap();
    assert_eq!(tm.cells.len(), 3);
    assert_eq!(tm.targets, vec!["linear", "mlp", "cnn-tiny"]);
    for (i, d) in deltas.iter().enumerate() {
        for (j, (_, m)) in targets.iter().enumerate() {
            assert_eq!(tm.cells[i][j], fooling_ratio(m, &ds, &d.delta).unwrap());
        }
    }
    // Diagonal cells are the white-box reports.
    assert_eq!(tm.cells[0][0], fooling_ratio(&targets[0].1, &ds, &deltas[0].delta).unwrap());
    assert_eq!(tm.cells[2][2], fooling_ratio(&targets[2].1, &ds, &deltas[2].delta).unwrap());
    assert!(tm.cells[1].iter().all(|c| c.fooling_ratio == 0.0));
    let avg = tm.row_averages();
    assert_eq!(avg[1], 0.0);
    assert!((avg[0] - (tm.ratio(0, 0) + tm.ratio(0, 1) + tm.ratio(0, 2)) / 3.0).abs() < 1e-15);

    let single = transfer_matrix(&targets[..1], &deltas[..1], &ds, 1).unwrap();
    assert_eq!(single.cells, vec![vec![tm.cells[0][0].clone()]]);
}

fn sample_report() -> EvalReport {
    let ds = uniform(64, 5);
    let targets = models();
    let deltas = vec![TaggedDelta { surrogate: "mlp".into(), delta: random_delta(0.25, 6) }];
    EvalReport {
        matrix: transfer_matrix(&targets, &deltas, &ds, 1).unwrap(),
        config: json!({"attack": {"epsilon": 0.0392156862745098, "order": "model_first"}, "seed": 7}),
    }
}

#[test]
fn reports_round_trip_and_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let report = sample_report();
    for format in [ReportFormat::Json, ReportFormat::Csv] {
        let a = dir.path().join(format!("a.{}", format.extension()));
        let b = dir.path().join(format!("b.{}", format.extension()));
        report_write(&report, &a, format).unwrap();
        report_write(&report, &b, format).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(doc["config"]["seed"], 7);
    assert_eq!(doc["config"]["attack"]["epsilon"], 0.0392);
    for (j, cell) in report.matrix.cells[0].iter().enumerate() {
        let parsed = &doc["cells"][0][j];
        assert_eq!(parsed["n_changed"], cell.n_changed);
        assert_eq!(parsed["fooling_ratio"].as_f64().unwrap(), (cell.fooling_ratio * 1e4).round() / 1e4);
        assert_eq!(parsed["dataset_fp"], cell.dataset_fp.as_str());
        assert_eq!(parsed["delta_hash"], cell.delta_hash.as_str());
    }

    let mut rdr = csv::Reader::from_path(dir.path().join("a.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap(),
        vec!["surrogate", "target", "fooling_ratio", "n", "dataset_fp", "delta_hash"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (row, cell) in rows.iter().zip(&report.matrix.cells[0]) {
        assert_eq!(&row[0], "mlp");
        assert_eq!(row[2], format!("{:.4}", cell.fooling_ratio));
        assert_eq!(row[2].split('.').nth(1).unwrap().len(), 4);
        assert_eq!(row[3].parse::<usize>().unwrap(), 64);
    }
}

#[test]
fn report_write_fails_on_unwritable_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("r.json");
    assert!(report_write(&sample_report(), path, ReportFormat::Json).is_err());
}
