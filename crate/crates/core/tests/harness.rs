mod common;

use common::checks::{degenerate_mismatches, determinism, freezing, manifest, masking, tiny_config};
use common::{class_names, random_images, tiny_dual};
use fate_core::experiment::{
    export_features, run_ablation_suite, run_experiment, run_noisy_dp_control, ExperimentConfig, FeatureSplit,
    StageSelect,
};
use fate_core::FateError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_stage_runs_keep_frozen_tensors() {
    let dir = tempfile::tempdir().unwrap();
    for vl in [false, true] {
        let cfg = tiny_config(&dir.path().join(vl.to_string()), vl, "run");
        let f = freezing(&cfg);
        assert!(f.holds(), "vl={vl}: {f:?}");
    }
}

#[test]
fn fully_masked_runs_equal_supervised_runs() {
    let dir = tempfile::tempdir().unwrap();
    for vl in [false, true] {
        let cfg = tiny_config(&dir.path().join(vl.to_string()), vl, "mask");
        let (l_u, identical) = masking(&cfg);
        assert_eq!(l_u, 0.0, "vl={vl}");
        assert!(identical, "vl={vl}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for vl in [false, true] {
        let cfg = tiny_config(&dir.path().join(vl.to_string()), vl, "det");
        assert!(determinism(&cfg), "vl={vl}");
    }
}

#[test]
fn template_context_without_dp_is_zero_shot() {
    let (enc, store) = tiny_dual::<f32>(4, 30.0);
    let images = random_images(40, 16, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(degenerate_mismatches(&enc, &store, &class_names(), &images), 0);
}

#[test]
fn classify_without_adaptation_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), false, "order");
    match run_experiment(&cfg, StageSelect::Classify) {
        Err(FateError::Missing(_)) => {}
        other => panic!("expected a missing-checkpoint error, got {other:?}"),
    }
    run_experiment(&cfg, StageSelect::Adapt).unwrap();
    let m = run_experiment(&cfg, StageSelect::Classify).unwrap();
    assert!(m.test_accuracy.is_some());
    let csv = std::fs::read_to_string(cfg.output_dir.join("metrics.csv")).unwrap();
    let stages: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(stages, ["adapt", "classify", "classify"]);
}

#[test]
fn manifest_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), false, "replay");
    run_experiment(&cfg, StageSelect::All).unwrap();
    let m = manifest(&cfg);
    let replay = ExperimentConfig {
        output_dir: dir.path().join("replayed"),
        ..m.config.clone()
    };
    let again = run_experiment(&replay, StageSelect::All).unwrap();
    assert_eq!(m.labeled_indices, again.labeled_indices);
    assert_eq!(m.test_accuracy, again.test_accuracy);
    assert_eq!(m.data_hash, again.data_hash);
    assert_eq!(
        std::fs::read(cfg.output_dir.join("metrics.csv")).unwrap(),
        std::fs::read(replay.output_dir.join("metrics.csv")).unwrap()
    );
}

#[test]
fn ablation_grid_has_four_rows_and_token_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), false, "abl");
    let report = run_ablation_suite(&cfg, &[0, 1]).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["no DP, no CP", "no DP, CP", "DP, no CP", "DP, CP"]);
    assert!(report.rows.iter().all(|r| r.columns[0].1.values.len() == 2));
    // 32 px, patch 8: m = 16; n_d = n_c = 2.
    assert_eq!(report.rows[3].notes, ["weak/labeled tokens 21, strong tokens 19"]);
    assert_eq!(report.rows[0].notes, ["weak/labeled tokens 17, strong tokens 17"]);
    let csv = std::fs::read_to_string(cfg.output_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn noisy_control_has_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), false, "noisy");
    let report = run_noisy_dp_control(&cfg, &[0]).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["w. DP", "w. noisy DP", "w.o. DP"]);
}

#[test]
fn exported_features_depend_on_dp() {
    let dir = tempfile::tempdir().unwrap();
    let with = tiny_config(dir.path(), false, "with");
    let without = ExperimentConfig {
        use_dp: false,
        ..tiny_config(dir.path(), false, "without")
    };
    run_experiment(&with, StageSelect::All).unwrap();
    run_experiment(&without, StageSelect::All).unwrap();
    let read = |run: &std::path::Path| {
        let path = export_features(run, FeatureSplit::Test).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        text.lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    let a = read(&with.output_dir);
    let b = read(&without.output_dir);
    // 5 classes x 4 test images; index and label columns plus d = 16 feature columns.
    assert_eq!(a.len(), 20);
    assert!(a.iter().all(|r| r.len() == 18));
    let delta: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| x[2..].iter().zip(&y[2..]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.len() as f64;
    assert!(delta > 0.0);
}
