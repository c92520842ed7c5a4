//! Tiny randomly initialised encoders and datasets shared by the
//! integration tests.
#![allow(dead_code)]

use std::path::Path;

use fate_core::clip::{DualEncoder, DualEncoderManifest};
use fate_core::data::synth::{downstream_classes, glyph_dataset, GlyphClass, GlyphStyle};
use fate_core::data::{Dataset, Image};
use fate_core::experiment::ExperimentConfig;
use fate_core::tensor::{ParamStore, Real};
use fate_core::text::{TextConfig, TokenTable};
use fate_core::vit::{names, BackboneManifest, VisionBackbone, VitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_vit() -> VitConfig {
    VitConfig {
        image_size: 16,
        channels: 1,
        patch: 8,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_hidden: 16,
    }
}

/// Tiny encoder for the 32 px glyph datasets used by harness runs; wide
/// enough that the ReLU projector never maps a sample to exactly zero.
pub fn harness_vit() -> VitConfig {
    VitConfig {
        image_size: 32,
        dim: 16,
        mlp_hidden: 32,
        ..tiny_vit()
    }
}

pub fn tiny_text() -> TextConfig {
    TextConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_hidden: 16,
        out_dim: 8,
    }
}

pub fn class_names() -> Vec<String> {
    downstream_classes().iter().map(GlyphClass::name).collect()
}

pub fn tiny_backbone<F: Real>(seed: u64) -> (VisionBackbone, ParamStore<F>) {
    let vb = VisionBackbone::new(tiny_vit(), names::VISION).unwrap();
    let mut store = ParamStore::new();
    vb.init(&mut store, false, &mut ChaCha8Rng::seed_from_u64(seed));
    (vb, store)
}

pub fn tiny_dual<F: Real>(seed: u64, scale: f64) -> (DualEncoder, ParamStore<F>) {
    let table = TokenTable::from_class_names(&class_names(), 12);
    let enc = DualEncoder::new(tiny_vit(), tiny_text(), table, scale).unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, false, &mut ChaCha8Rng::seed_from_u64(seed));
    (enc, store)
}

pub fn random_images(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
    (0..n)
        .map(|_| Image::new(side, side, 1, (0..side * side).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect()
}

pub fn small_glyphs(per_class: usize, side: usize, seed: u64) -> Dataset {
    let style = GlyphStyle {
        size: side,
        jitter: 1.0,
        min_radius: side as f32 * 0.25,
        max_radius: side as f32 * 0.4,
        ..GlyphStyle::default()
    };
    glyph_dataset(&downstream_classes(), per_class, &style, seed).unwrap()
}

/// Writes a tiny random vision backbone into `dir`.
pub fn write_tiny_backbone(dir: &Path, seed: u64) {
    let vb = VisionBackbone::new(harness_vit(), names::VISION).unwrap();
    let mut store = ParamStore::<f32>::new();
    vb.init(&mut store, false, &mut ChaCha8Rng::seed_from_u64(seed));
    std::fs::create_dir_all(dir).unwrap();
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

/// Writes a tiny random dual encoder into `dir`.
pub fn write_tiny_dual(dir: &Path, seed: u64) {
    let table = TokenTable::from_class_names(&class_names(), 12);
    let text = TextConfig {
        out_dim: 16,
        ..tiny_text()
    };
    let enc = DualEncoder::new(harness_vit(), text, table, 30.0).unwrap();
    let mut store = ParamStore::<f32>::new();
    enc.init(&mut store, false, &mut ChaCha8Rng::seed_from_u64(seed));
    std::fs::create_dir_all(dir).unwrap();
    DualEncoderManifest {
        encoder: enc,
        auxiliary_classes: vec![],
        heldout_accuracy: 0.0,
        content_hash: store.content_hash(""),
    }
    .save(dir, &store)
    .unwrap();
}

/// Parses `text` and points it at `backbone` and `out`.
pub fn quick_config(text: &str, backbone: &Path, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(text).unwrap();
    c.backbone_dir = backbone.to_path_buf();
    c.output_dir = out.to_path_buf();
    c
}

pub mod checks;
pub mod oracles;
pub mod stages;
