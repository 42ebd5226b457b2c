//! Metric unit values, grid report contracts, trajectory logging, and the
//! statistics dump format.

use normshift_core::datagen::{gen_source, DomainSpec};
use normshift_core::evalkit::{
    accuracy, brier, brier_row, dump_learned_stats, evaluate_grid, evaluate_model_on, full_grid,
    log_residual_weights, softmax_rows, EvalReport, GridConfig, TrajectoryLog,
};
use normshift_core::model::{build_model, ModelConfig};
use normshift_core::norms::{NormKind, NormSettings};
use normshift_core::tensor::Matrix;

fn one_hot(labels: &[u32], k: usize, hot: f32) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), k);
    for (r, &y) in labels.iter().enumerate() {
        m.data[r * k + y as usize] = hot;
    }
    m
}

#[test]
fn accuracy_unit_cases_and_tie_break() {
    let labels = vec![0u32, 1, 2];
    let logits = one_hot(&labels, 4, 5.0);
    assert_eq!(accuracy(&logits, &labels).unwrap(), 1.0);

    let shifted: Vec<u32> = labels.iter().map(|&y| (y + 1) % 4).collect();
    let wrong = one_hot(&shifted, 4, 5.0);
    assert_eq!(accuracy(&wrong, &labels).unwrap(), 0.0);

    // All-equal logits: argmax ties break to class 0.
    let flat = Matrix::from_vec(3, 4, vec![0.5; 12]).unwrap();
    assert_eq!(accuracy(&flat, &[0, 0, 0]).unwrap(), 1.0);
    assert_eq!(accuracy(&flat, &[1, 1, 1]).unwrap(), 0.0);

    assert!(accuracy(&Matrix::zeros(0, 4), &[]).is_err());
}

#[test]
fn accuracy_is_order_invariant() {
    let labels = vec![0u32, 1, 2, 3, 0, 2];
    let logits = Matrix::from_vec(
        6,
        4,
        (0..24).map(|i| ((i * 31 % 17) as f32 - 8.0) / 3.0).collect(),
    )
    .unwrap();
    let base = accuracy(&logits, &labels).unwrap();
    let perm = [5usize, 2, 0, 3, 1, 4];
    let mut shuffled = Matrix::zeros(6, 4);
    let mut shuffled_labels = vec![0u32; 6];
    for (to, &from) in perm.iter().enumerate() {
        shuffled.data[to * 4..(to + 1) * 4].copy_from_slice(logits.row(from));
        shuffled_labels[to] = labels[from];
    }
    assert_eq!(accuracy(&shuffled, &shuffled_labels).unwrap(), base);
}

#[test]
fn brier_unit_values_and_bounds() {
    // Exact one-hot on the true class: 0.
    assert_eq!(brier_row(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
    // Uniform over 10 classes: ((0.9)^2 + 9*(0.1)^2)/10 = 0.09.
    let uniform = vec![0.1f32; 10];
    assert!((brier_row(&uniform, 3).unwrap() - 0.09).abs() < 1e-7);
    // All mass on a wrong class: the maximum 2/K.
    let mut worst = vec![0.0f32; 10];
    worst[4] = 1.0;
    assert!((brier_row(&worst, 2).unwrap() - 0.2).abs() < 1e-7);

    assert!(brier_row(&[0.7, 0.7], 0).is_err(), "not a simplex");
    assert!(brier_row(&[0.5, 0.5], 2).is_err(), "label out of range");

    let labels = vec![1u32, 0];
    let probs = Matrix::from_vec(2, 2, vec![0.25, 0.75, 0.9, 0.1]).unwrap();
    let b = brier(&probs, &labels).unwrap();
    assert!(b >= 0.0 && b <= 1.0);
    let by_hand = 0.5 * (brier_row(&[0.25, 0.75], 1).unwrap() + brier_row(&[0.9, 0.1], 0).unwrap());
    assert!((b - by_hand).abs() < 1e-7);
}

#[test]
fn softmax_rows_are_simplex_rows() {
    let logits = Matrix::from_vec(3, 5, (0..15).map(|i| i as f32 * 0.7 - 5.0).collect()).unwrap();
    let p = softmax_rows(&logits);
    for r in 0..3 {
        let s: f32 = p.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p.row(r).iter().all(|&v| v >= 0.0));
    }
}

fn asr_model(seed: u64) -> normshift_core::model::Model {
    build_model(ModelConfig {
        norm: NormSettings { kind: NormKind::Asr, ..Default::default() },
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn grid_report_shape_averages_and_determinism() {
    let model = asr_model(1);
    let grid = GridConfig { specs: full_grid(11), n: 40, classes: 10, batch: 32 };
    assert_eq!(grid.specs.len(), 31, "source + 6 types x 5 levels");

    let a = evaluate_grid(&model, &grid, "run-a").unwrap();
    let b = evaluate_grid(&model, &grid, "run-a").unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.entries.len(), 31);
    assert_eq!(a.to_csv().lines().count(), 32, "header plus one row per domain");

    // Averages are plain arithmetic means of the entries.
    let (acc_avg, brier_avg) = a.overall_average();
    let acc_mean = a.entries.iter().map(|e| e.accuracy as f64).sum::<f64>() / 31.0;
    let brier_mean = a.entries.iter().map(|e| e.brier as f64).sum::<f64>() / 31.0;
    assert!((acc_avg as f64 - acc_mean).abs() < 1e-6);
    assert!((brier_avg as f64 - brier_mean).abs() < 1e-6);

    let (l3_acc, _) = a.level_average(3).unwrap();
    let l3_rows: Vec<f64> =
        a.entries.iter().filter(|e| e.level == 3).map(|e| e.accuracy as f64).collect();
    assert_eq!(l3_rows.len(), 6);
    assert!((l3_acc as f64 - l3_rows.iter().sum::<f64>() / 6.0).abs() < 1e-6);
}

#[test]
fn evaluation_is_batch_size_invariant_for_per_sample_norms() {
    let model = asr_model(2);
    let ds = gen_source(21, 64, 10).unwrap();
    let (a_acc, a_brier) = evaluate_model_on(&model, &ds.images, &ds.labels, 7).unwrap();
    let (b_acc, b_brier) = evaluate_model_on(&model, &ds.images, &ds.labels, 64).unwrap();
    assert_eq!(a_acc.to_bits(), b_acc.to_bits());
    assert_eq!(a_brier.to_bits(), b_brier.to_bits());
}

#[test]
fn trajectory_log_records_initial_sigmoid_values() {
    let model = asr_model(3);
    let mut log = TrajectoryLog::new();
    log_residual_weights(&model, 0, &mut log);
    assert_eq!(log.rows.len(), 2, "one row per norm layer");
    for row in &log.rows {
        assert!((row.lambda_mu - 0.047426).abs() < 1e-5);
        assert!((row.lambda_sigma - 0.047426).abs() < 1e-5);
        assert!(row.lambda_beta.is_none());
    }
    log_residual_weights(&model, 100, &mut log);
    let steps: Vec<u64> = log.rows.iter().map(|r| r.step).collect();
    let mut sorted = steps.clone();
    sorted.sort();
    assert_eq!(steps, sorted, "log rows are appended in step order");

    let csv = log.to_csv();
    assert!(csv.starts_with("step,layer,lambda_mu,lambda_sigma,lambda_beta,lambda_gamma\n"));
    assert!(csv.contains("0,0,0.047426,0.047426,,"));
}

#[test]
fn trajectory_log_pretrain_variant_includes_rescale_weights() {
    let model = build_model(ModelConfig {
        norm: NormSettings { kind: NormKind::Asr, pretrain_variant: true, ..Default::default() },
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let mut log = TrajectoryLog::new();
    log_residual_weights(&model, 0, &mut log);
    for row in &log.rows {
        assert!((row.lambda_beta.unwrap() - 0.006693).abs() < 1e-5);
        assert!((row.lambda_gamma.unwrap() - 0.006693).abs() < 1e-5);
    }
}

#[test]
fn trajectory_logging_is_a_warning_noop_without_asr() {
    let model = build_model(ModelConfig {
        norm: NormSettings { kind: NormKind::Bn, ..Default::default() },
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let mut log = TrajectoryLog::new();
    log_residual_weights(&model, 0, &mut log);
    assert!(log.rows.is_empty());
}

#[test]
fn stats_dump_shape_and_nonnegative_sigma() {
    let model = asr_model(6);
    let ds = gen_source(31, 25, 10).unwrap();
    let csv = dump_learned_stats(&model, &ds, 0).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 26, "header + one row per sample");
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(header.len(), 2 + 2 * 16, "domain, label, then 2C stats for C=16");
    assert_eq!(header[0], "domain");
    assert_eq!(header[2], "mu_stan_0");
    assert_eq!(header[2 + 16], "sigma_stan_0");
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 2 + 32);
        assert_eq!(cols[0], "source");
        for v in &cols[2 + 16..] {
            assert!(v.parse::<f32>().unwrap() >= 0.0, "sigma column {v} negative");
        }
    }

    // Second norm layer works too, with C=32.
    let csv2 = dump_learned_stats(&model, &ds, 1).unwrap();
    assert_eq!(csv2.lines().next().unwrap().split(',').count(), 2 + 64);

    // Non-adaptive models are rejected.
    let bn = build_model(ModelConfig {
        norm: NormSettings { kind: NormKind::Bn, ..Default::default() },
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    assert!(dump_learned_stats(&bn, &ds, 0).is_err());
    assert!(dump_learned_stats(&model, &ds, 7).is_err(), "no such layer");
}

#[test]
fn metrics_csv_header_is_frozen() {
    let report = EvalReport { run_id: "r1".into(), entries: vec![] };
    assert_eq!(report.to_csv(), "run_id,domain,level,n,accuracy,brier\n");
    let spec = DomainSpec::parse("corruption:pixelate:2", 3).unwrap();
    assert_eq!(spec.domain_name(), "pixelate");
}
