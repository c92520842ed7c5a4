//! Harness-level checks on tiny random encoders, shared by the integration
//! tests and the acceptance gate.

use std::fs;
use std::path::Path;

use fate_core::clip::{zero_shot_pseudo_label, ClipModel, DualEncoder};
use fate_core::experiment::{run_experiment, ExperimentConfig, RunManifest, StageSelect};
use fate_core::tensor::{load_checkpoint, ParamStore};
use fate_core::text::ContextInit;
use fate_core::vit::names;
use fate_core::data::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{quick_config, write_tiny_backbone, write_tiny_dual};

pub const VISION_TINY: &str = "
variant = vision
dataset = glyphs
glyph_train_per_class = 8
glyph_test_per_class = 4
glyph_seed = 3
adapt_epochs = 1
classify_epochs = 2
batch_size = 4
mu = 2
adapt_batch_size = 8
dp_len = 2
cp_len = 2
";

pub const VL_TINY: &str = "
variant = vl
dataset = glyphs
glyph_train_per_class = 8
glyph_test_per_class = 4
glyph_seed = 3
adapt_epochs = 1
classify_epochs = 2
batch_size = 2
mu = 2
adapt_batch_size = 4
dp_len = 2
cp_len = 4
k = 2
";

/// Config for a tiny run of `variant` ("vision" or "vl") with a fresh random
/// encoder under `root/encoder` and outputs under `root/<name>`.
pub fn tiny_config(root: &Path, vl: bool, name: &str) -> ExperimentConfig {
    let enc = root.join("encoder");
    if !enc.exists() {
        if vl {
            write_tiny_dual(&enc, 1);
        } else {
            write_tiny_backbone(&enc, 1);
        }
    }
    quick_config(if vl { VL_TINY } else { VISION_TINY }, &enc, &root.join(name))
}

/// Outcome of the freezing contract on a complete two-stage run.
#[derive(Debug)]
pub struct Freezing {
    pub encoder_unchanged: bool,
    pub dp_unchanged: bool,
    pub dp_matches_adapt_checkpoint: bool,
}

impl Freezing {
    pub fn holds(&self) -> bool {
        self.encoder_unchanged && self.dp_unchanged && self.dp_matches_adapt_checkpoint
    }
}

pub fn freezing(cfg: &ExperimentConfig) -> Freezing {
    let m = run_experiment(cfg, StageSelect::All).unwrap();
    let adapt: ParamStore<f32> = load_checkpoint(&cfg.output_dir.join("adapt.ckpt")).unwrap();
    let classify: ParamStore<f32> = load_checkpoint(&cfg.output_dir.join("classify.ckpt")).unwrap();
    Freezing {
        encoder_unchanged: m.encoder_hash == m.encoder_hash_after,
        dp_unchanged: m.dp_hash.is_some() && m.dp_hash == m.dp_hash_after,
        dp_matches_adapt_checkpoint: adapt.content_hash(names::DP) == classify.content_hash(names::DP),
    }
}

/// Largest logged `L_u` of a fully masked run and whether its trained
/// parameters equal bit for bit those of a `lambda = 0` run in which every
/// unlabeled term is unmasked (`theta = 0`).
pub fn masking(cfg: &ExperimentConfig) -> (f64, bool) {
    let masked = ExperimentConfig {
        theta: 1.5,
        output_dir: cfg.output_dir.join("masked"),
        ..cfg.clone()
    };
    let supervised = ExperimentConfig {
        lambda: 0.0,
        theta: 0.0,
        output_dir: cfg.output_dir.join("supervised"),
        ..cfg.clone()
    };
    run_experiment(&masked, StageSelect::All).unwrap();
    run_experiment(&supervised, StageSelect::All).unwrap();
    let csv = fs::read_to_string(masked.output_dir.join("metrics.csv")).unwrap();
    let max_l_u = csv
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("classify"))
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap().abs())
        .fold(0.0, f64::max);
    let a = fs::read(masked.output_dir.join("classify.ckpt")).unwrap();
    let b = fs::read(supervised.output_dir.join("classify.ckpt")).unwrap();
    (max_l_u, a == b)
}

/// Whether two runs of the same config produce byte-identical metrics.
pub fn determinism(cfg: &ExperimentConfig) -> bool {
    let first = ExperimentConfig {
        output_dir: cfg.output_dir.join("first"),
        ..cfg.clone()
    };
    let second = ExperimentConfig {
        output_dir: cfg.output_dir.join("second"),
        ..cfg.clone()
    };
    run_experiment(&first, StageSelect::All).unwrap();
    run_experiment(&second, StageSelect::All).unwrap();
    let a = fs::read(first.output_dir.join("metrics.csv")).unwrap();
    let b = fs::read(second.output_dir.join("metrics.csv")).unwrap();
    !a.is_empty() && a == b
}

/// Number of images whose prediction with a template-initialised context and
/// no DP differs from the zero-shot prediction.
pub fn degenerate_mismatches(enc: &DualEncoder, store: &ParamStore<f32>, class_names: &[String], images: &[Image]) -> usize {
    let mut store = store.clone();
    let model = ClipModel::new(enc.clone(), 0, 4, class_names.to_vec()).unwrap();
    model
        .init_context(&mut store, ContextInit::Template, true, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let f = enc.class_features(&store, class_names).unwrap();
    let zero_shot = zero_shot_pseudo_label(&store, enc, images, &f).unwrap();
    let prompted = fate_core::clip::clip_classify(&store, &model, images).unwrap();
    zero_shot.iter().zip(&prompted).filter(|((z, _), p)| z != *p).count()
}

pub fn manifest(cfg: &ExperimentConfig) -> RunManifest {
    RunManifest::load(&cfg.output_dir).unwrap()
}
