use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fate_core::tensor::ParamStore;
use fate_core::vit::{names, BackboneManifest, VisionBackbone, VitConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fate")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_backbone(dir: &Path) {
    let cfg = VitConfig {
        image_size: 32,
        channels: 1,
        patch: 8,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_hidden: 32,
    };
    let vb = VisionBackbone::new(cfg, names::VISION).unwrap();
    let mut store = ParamStore::<f32>::new();
    vb.init(&mut store, false, &mut ChaCha8Rng::seed_from_u64(1));
    fs::create_dir_all(dir).unwrap();
    BackboneManifest {
        config: vb.config.clone(),
        prefix: vb.prefix.clone(),
        auxiliary_classes: vec![],
        heldout_accuracy: 0.0,
        content_hash: store.content_hash(&vb.prefix),
    }
    .save(dir, &store)
    .unwrap();
}

/// A tiny vision experiment config in `dir`, with relative paths.
fn write_config(dir: &Path) -> std::path::PathBuf {
    write_backbone(&dir.join("bb"));
    let path = dir.join("exp.cfg");
    fs::write(
        &path,
        "# tiny run\nvariant = vision\nbackbone_dir = bb\noutput_dir = out\n\
         glyph_train_per_class = 8\nglyph_test_per_class = 4\nadapt_epochs = 1\nclassify_epochs = 1\n\
         batch_size = 4\nmu = 2\nadapt_batch_size = 8\ndp_len = 2\ncp_len = 2\n",
    )
    .unwrap();
    path
}

fn assert_one_line_error(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error[{code}]: ")), "{err}");
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "variant = vision\nlearning_rate = 0.1\n").unwrap();
    let o = fate(&["run", "--config", path.to_str().unwrap()]);
    assert_one_line_error(&o, "config");
}

#[test]
fn classify_before_adapt_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = fate(&["run", "--config", cfg.to_str().unwrap(), "--stage", "classify"]);
    assert_one_line_error(&o, "missing_prerequisite");
}

#[test]
fn run_then_export_features() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = fate(&["run", "--config", cfg.to_str().unwrap(), "--stage", "all", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(manifest["seed"], 3);
    let out = dir.path().join("out");
    for f in ["metrics.csv", "timing.csv", "manifest.json", "adapt.ckpt", "classify.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = fate(&["export-features", "--run", out.to_str().unwrap(), "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("features_test.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 4);
}

#[test]
fn bad_stage_name_is_rejected() {
    let o = fate(&["run", "--config", "x.cfg", "--stage", "both"]);
    assert!(!o.status.success());
}
