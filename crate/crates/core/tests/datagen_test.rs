//! Benchmark generator contracts: determinism, balance, corruption
//! intensity against its table, monotone distortion, style properties,
//! file round-trips, and the discrepancy gradient a linear probe sees.

use normshift_core::datagen::{
    apply_corruption, apply_style, gen_source, read_dataset, realize, write_dataset,
    CorruptionType, Dataset, DomainSpec, StyleKind, GAUSSIAN_SIGMA,
};
use normshift_core::model::{build_model, ModelConfig};
use normshift_core::norms::{NormKind, NormSettings};
use normshift_core::tensor::Tensor4;
use normshift_core::{evalkit, trainer};

#[test]
fn source_generation_is_deterministic_balanced_and_in_range() {
    let a = gen_source(7, 1000, 10).unwrap();
    let b = gen_source(7, 1000, 10).unwrap();
    assert_eq!(a.images.data, b.images.data);
    assert_eq!(a.labels, b.labels);

    let mut counts = [0usize; 10];
    for &l in &a.labels {
        counts[l as usize] += 1;
    }
    assert!(counts.iter().all(|&c| c == 100), "{counts:?}");

    let min = a.images.data.iter().cloned().fold(f32::MAX, f32::min);
    let max = a.images.data.iter().cloned().fold(f32::MIN, f32::max);
    assert!(min >= 0.0 && max <= 1.0);

    assert!(gen_source(7, 5, 10).is_err(), "fewer images than classes");
}

#[test]
fn corruption_level_zero_is_identity_bitwise() {
    let ds = gen_source(1, 50, 10).unwrap();
    for ctype in CorruptionType::ALL {
        let out = apply_corruption(&ds.images, ctype, 0, 9).unwrap();
        assert_eq!(out.data, ds.images.data, "{ctype:?}");
    }
    assert!(apply_corruption(&ds.images, CorruptionType::BoxBlur, 9, 9).is_err());
}

#[test]
fn gaussian_noise_std_matches_table_within_five_percent() {
    let ds = gen_source(3, 1000, 10).unwrap();
    for (li, &sigma) in GAUSSIAN_SIGMA.iter().enumerate() {
        let noisy = apply_corruption(&ds.images, CorruptionType::GaussianNoise, li as u8 + 1, 11).unwrap();
        let diffs: Vec<f64> =
            noisy.data.iter().zip(&ds.images.data).map(|(a, b)| (a - b) as f64).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
        let got = var.sqrt();
        let rel = (got - sigma as f64).abs() / sigma as f64;
        assert!(rel < 0.05, "level {}: measured {got:.4} vs table {sigma}", li + 1);
    }
}

#[test]
fn mean_distortion_strictly_increases_with_level_for_every_type() {
    let ds = gen_source(5, 500, 10).unwrap();
    for ctype in CorruptionType::ALL {
        let mut prev = 0.0f64;
        for level in 1..=5u8 {
            let out = apply_corruption(&ds.images, ctype, level, 13).unwrap();
            let l2: f64 = out
                .data
                .iter()
                .zip(&ds.images.data)
                .map(|(a, b)| ((a - b) as f64) * ((a - b) as f64))
                .sum::<f64>()
                / ds.images.n as f64;
            assert!(
                l2 > prev,
                "{ctype:?}: distortion {l2:.5} at level {level} not above {prev:.5}"
            );
            prev = l2;
        }
    }
}

#[test]
fn corruptions_and_styles_preserve_dims_and_labels() {
    let ds = gen_source(8, 60, 10).unwrap();
    for ctype in CorruptionType::ALL {
        let out = apply_corruption(&ds.images, ctype, 3, 17).unwrap();
        assert_eq!(out.dims(), ds.images.dims());
    }
    for style in StyleKind::ALL {
        let spec = DomainSpec::style(style, 8);
        let styled = realize(&spec, 60, 10).unwrap();
        assert_eq!(styled.labels, ds.labels, "{style:?} must keep labels");
        assert_eq!(styled.images.dims(), ds.images.dims());
    }
}

#[test]
fn invert_is_a_bitwise_involution() {
    let ds = gen_source(21, 200, 10).unwrap();
    let once = apply_style(&ds.images, StyleKind::Invert, 0).unwrap();
    let twice = apply_style(&once, StyleKind::Invert, 0).unwrap();
    assert_eq!(twice.data, ds.images.data);
    assert!(once.data.iter().zip(&ds.images.data).any(|(a, b)| a != b));
}

#[test]
fn dilate_increases_ink_fraction() {
    let ds = gen_source(22, 500, 10).unwrap();
    let dilated = apply_style(&ds.images, StyleKind::Dilate, 0).unwrap();
    let ink = |t: &Tensor4| t.data.iter().filter(|&&v| v > 0.5).count() as f64 / t.data.len() as f64;
    assert!(
        ink(&dilated) > ink(&ds.images) * 1.2,
        "dilate ink {} vs source {}",
        ink(&dilated),
        ink(&ds.images)
    );
}

#[test]
fn texture_bg_fills_background_without_touching_range() {
    let ds = gen_source(23, 50, 10).unwrap();
    let styled = apply_style(&ds.images, StyleKind::TextureBg, 5).unwrap();
    let mean_src = ds.images.data.iter().sum::<f32>() / ds.images.data.len() as f32;
    let mean_out = styled.data.iter().sum::<f32>() / styled.data.len() as f32;
    assert!(mean_out > mean_src + 0.1, "background texture should add intensity");
    assert!(styled.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn dataset_files_round_trip_and_reject_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.nsds");
    let spec = DomainSpec::corruption(CorruptionType::Contrast, 2, 31).unwrap();
    let ds = realize(&spec, 40, 10).unwrap();
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.images.data, ds.images.data);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.manifest.domain, "contrast");
    assert_eq!(back.manifest.level, 2);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    let err = read_dataset(&path).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
    assert!(read_dataset(&path).is_err());
}

#[test]
fn generators_are_pure_functions_of_spec_and_seed() {
    let spec = DomainSpec::parse("corruption:impulse_noise:4", 55).unwrap();
    let a = realize(&spec, 64, 10).unwrap();
    let b = realize(&spec, 64, 10).unwrap();
    assert_eq!(a.images.data, b.images.data);

    let other = realize(&DomainSpec::parse("corruption:impulse_noise:4", 56).unwrap(), 64, 10).unwrap();
    assert!(a.images.data != other.images.data);

    assert!(DomainSpec::parse("corruption:box_blur:9", 0).is_err());
    assert!(DomainSpec::parse("corruption:fog:3", 0).is_err());
    assert!(DomainSpec::parse("style:unknown", 0).is_err());
    assert!(DomainSpec::parse("gibberish", 0).is_err());
}

/// A linear probe must separate the source classes almost perfectly yet
/// degrade as the corruption level rises: the benchmark encodes a usable
/// discrepancy gradient.
#[test]
fn linear_probe_sees_a_discrepancy_gradient() {
    let train = gen_source(101, 2000, 10).unwrap();
    let cfg = ModelConfig {
        conv_channels: vec![],
        fc_widths: vec![],
        norm: NormSettings { kind: NormKind::None, ..Default::default() },
        seed: 5,
        ..Default::default()
    };
    let mut model = build_model(cfg).unwrap();
    let tc = trainer::TrainConfig { epochs: 8, seed: 5, ..Default::default() };
    trainer::train(&mut model, &train, &tc, None).unwrap();

    let held_out = gen_source(202, 1000, 10).unwrap();
    let (src_acc, _) =
        evalkit::evaluate_model_on(&model, &held_out.images, &held_out.labels, 64).unwrap();
    assert!(src_acc >= 0.95, "linear source accuracy {src_acc}");

    let mut level_acc = Vec::new();
    for level in 1..=5u8 {
        let mut acc_sum = 0.0f64;
        for ctype in CorruptionType::ALL {
            let images = apply_corruption(&held_out.images, ctype, level, 777).unwrap();
            let (acc, _) = evalkit::evaluate_model_on(&model, &images, &held_out.labels, 64).unwrap();
            acc_sum += acc as f64;
        }
        level_acc.push(acc_sum / 6.0);
    }
    for w in level_acc.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-6,
            "accuracy should not rise with corruption level: {level_acc:?}"
        );
    }
    assert!(
        level_acc[4] < src_acc as f64 - 0.15,
        "level 5 should hurt a linear probe: {level_acc:?} vs {src_acc}"
    );
}

#[test]
fn realize_source_matches_gen_source() {
    let a = realize(&DomainSpec::source(9), 30, 10).unwrap();
    let b: Dataset = gen_source(9, 30, 10).unwrap();
    assert_eq!(a.images.data, b.images.data);
}
