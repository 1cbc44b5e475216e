use nnid::calibration::builtin_residual_detector;
use nnid::cost_model::compute_cost_map;
use nnid::embedding::{compute_change_probabilities, simulate_embedding, EmbeddingPlan};
use nnid::synth::textured_image;
use nnid::{Error, GrayImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth gradients with uniform noise of amplitude `amp`.
fn smooth_covers(n: usize, seed: u64, amp: f64) -> Vec<GrayImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (a, b, c) = (rng.gen_range(40.0..200.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let noise: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-amp..amp)).collect();
            GrayImage::from_fn(64, 64, |r, col| {
                (a + b * r as f64 + c * col as f64 + noise[r * 64 + col]).round().clamp(0.0, 255.0) as u8
            })
            .unwrap()
        })
        .collect()
}

fn embed_all(covers: &[GrayImage], alpha: f64, seed: u64) -> Vec<GrayImage> {
    covers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let costs = compute_cost_map(c, 1.0).unwrap();
            let target = alpha * (c.width() * c.height()) as f64;
            let plan = compute_change_probabilities(&costs, target, 1e-3 * target).unwrap();
            simulate_embedding(c, &plan, seed.wrapping_mul(1000) + i as u64).unwrap()
        })
        .collect()
}

#[test]
fn identical_classes_sit_at_chance() {
    let covers = smooth_covers(30, 1, 0.6);
    let acc = builtin_residual_detector(&covers, &covers, 4).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn saturated_embedding_is_blatant() {
    let covers = smooth_covers(40, 2, 0.6);
    let stegos: Vec<GrayImage> = covers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let plan = EmbeddingPlan::from_beta(64, 64, vec![1.0 / 3.0; 64 * 64]).unwrap();
            simulate_embedding(c, &plan, i as u64).unwrap()
        })
        .collect();
    let acc = builtin_residual_detector(&covers, &stegos, 5).unwrap();
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn accuracy_grows_with_payload() {
    // Heavily textured covers hide these payloads from residual statistics
    // altogether; mild noise leaves room for a visible trend.
    let covers = smooth_covers(40, 1, 2.0);
    let mut means = Vec::new();
    for alpha in [0.05, 0.2, 0.4, 1.0] {
        let mut sum = 0.0;
        for seed in 0..5 {
            let stegos = embed_all(&covers, alpha, seed);
            sum += builtin_residual_detector(&covers, &stegos, seed).unwrap();
        }
        means.push(sum / 5.0);
    }
    for w in means.windows(2) {
        assert!(w[1] >= w[0] - 0.03, "{means:?}");
    }
    assert!(means[3] > means[0] + 0.2, "{means:?}");
}

#[test]
fn textured_covers_hide_small_payloads() {
    let covers: Vec<GrayImage> = (0..40).map(|i| textured_image(64, 64, 100 + i)).collect();
    let stegos = embed_all(&covers, 0.05, 0);
    let acc = builtin_residual_detector(&covers, &stegos, 0).unwrap();
    assert!((0.5..0.6).contains(&acc), "{acc}");
}

#[test]
fn too_few_images_is_a_sample_size_error() {
    let covers = smooth_covers(19, 3, 0.6);
    assert!(matches!(
        builtin_residual_detector(&covers, &covers, 0),
        Err(Error::Shortfall { required: 20, available: 19, .. })
    ));
    assert!(builtin_residual_detector(&covers, &covers[..10], 0).is_err());
}

#[test]
fn dataset_probe_calibrates_with_builtin_detector() {
    use nnid::calibration::{calibrate_dataset, CalibrationConfig, DatasetProbe, DetectorKind, ProbeConfig};
    use nnid::dataset::{build_nnid, BuildConfig};
    use nnid::image::write_image;

    let tmp = tempfile::tempdir().unwrap();
    let mothers = tmp.path().join("mothers");
    for (i, img) in smooth_covers(24, 7, 2.0).iter().enumerate() {
        write_image(&mothers.join(format!("c{i:02}.pgm")), img).unwrap();
    }
    let out = tmp.path().join("out");
    let cfg = BuildConfig {
        sizes: vec![48],
        stride: 4,
        random_crops: 2,
        ..Default::default()
    };
    let manifest = build_nnid(&mothers, &out, &cfg).unwrap().remove(0);
    let path = out.join("UNI_48/manifest.json");
    manifest.save(&path).unwrap();

    let probe_cfg = ProbeConfig {
        probe_pairs: Some(20),
        sigma: 1.0,
        work_dir: tmp.path().join("work"),
    };
    let mut probe = DatasetProbe::new(&manifest, &path, 48, DetectorKind::BuiltinResidual, &probe_cfg).unwrap();
    let cal = CalibrationConfig {
        target: 0.75,
        tolerance: 0.05,
        max_iter: 12,
        repeats: 1,
    };
    let r = calibrate_dataset(&mut probe, &cal).unwrap();
    let last = r.history.last().unwrap();
    assert_eq!(last.note.as_deref(), Some("full-size confirmation"));
    assert_eq!(r.achieved_accuracy, last.accuracy);
    assert!(r.alpha > 0.0 && r.alpha < 1.59);
    assert!(r.history.iter().all(|p| (0.5..=1.0).contains(&p.accuracy)));
}
