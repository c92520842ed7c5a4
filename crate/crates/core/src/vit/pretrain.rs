// Supervised pretraining of the backbone on a class-disjoint auxiliary task.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{VisionBackbone, VitConfig};
use crate::augment::{view_rng, weak_augment};
use crate::data::{Dataset, Image};
use crate::error::{FateError, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, AdamConfig, AdamState, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out accuracy below this is an error.
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 3e-3,
            seed: 0,
            min_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub heldout_accuracy: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub seconds: f64,
}

/// Sidecar written next to a backbone checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub config: VitConfig,
    pub prefix: String,
    pub auxiliary_classes: Vec<String>,
    pub heldout_accuracy: f64,
    pub content_hash: String,
}

const HEAD_W: &str = "pretrain.head.w";
const HEAD_B: &str = "pretrain.head.b";

/// Trains `backbone` with a temporary linear head on `aux_train`, checks the
/// held-out accuracy on `aux_test`, and returns the frozen backbone
/// parameters. Fails before training if any auxiliary class name also
/// appears in `downstream_classes`.
pub fn pretrain_backbone(
    backbone: &VisionBackbone,
    aux_train: &Dataset,
    aux_test: &Dataset,
    downstream_classes: &[String],
    cfg: &PretrainConfig,
) -> Result<(ParamStore<f32>, PretrainReport)> {
    let aux: BTreeSet<&String> = aux_train.class_names.iter().collect();
    let overlap: Vec<String> = downstream_classes.iter().filter(|c| aux.contains(c)).cloned().collect();
    if !overlap.is_empty() {
        return Err(FateError::ClassOverlap(overlap));
    }
    if aux_train.class_names != aux_test.class_names {
        return Err(FateError::Invalid("auxiliary train and test class lists differ".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(FateError::Config("pretraining needs positive epochs and batch size".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    backbone.init(&mut store, true, &mut rng);
    let y = aux_train.num_classes();
    let d = backbone.config.dim;
    store.insert(HEAD_W, Tensor::randn(&[d, y], (1.0 / d as f64).sqrt(), &mut rng), true);
    store.insert(HEAD_B, Tensor::zeros(&[y]), true);

    let steps_per_epoch = aux_train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamState::new(AdamConfig::new(cfg.lr, total));
    let mut order: Vec<usize> = (0..aux_train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| weak_augment(&aux_train.images[i], &mut view_rng(cfg.seed, i as u64, epoch as u64, 0)))
                .collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| aux_train.labels[i]).collect();
            let mut tape = Tape::new();
            let out = backbone.forward_tokens(&mut tape, &store, &[], &images)?;
            let cls = backbone.cls_tokens(&mut tape, &out);
            let (w, b) = (tape.param(&store, HEAD_W)?, tape.param(&store, HEAD_B)?);
            let logits = tape.linear(cls, w, b);
            let weights = vec![1.0 / chunk.len() as f32; chunk.len()];
            let loss = tape.softmax_cross_entropy(logits, &targets, &weights, false);
            let grads = tape.backprop(loss)?;
            opt.adam_step(&grads, &mut store)?;
            epoch_loss += tape.scalar(loss)? as f64;
        }
        final_loss = epoch_loss / steps_per_epoch as f64;
        log::info!("pretrain epoch {epoch}: loss {final_loss:.4}");
    }

    let heldout_accuracy = head_accuracy(backbone, &store, aux_test)?;
    log::info!("pretrain held-out accuracy {heldout_accuracy:.4}");
    if heldout_accuracy < cfg.min_accuracy {
        return Err(FateError::Invalid(format!(
            "backbone reached {heldout_accuracy:.3} held-out accuracy, below the required {}",
            cfg.min_accuracy
        )));
    }
    store.remove(HEAD_W);
    store.remove(HEAD_B);
    store.freeze_all();
    Ok((
        store,
        PretrainReport {
            heldout_accuracy,
            final_loss,
            steps: total,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

fn head_accuracy(backbone: &VisionBackbone, store: &ParamStore<f32>, ds: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for (imgs, labels) in ds.images.chunks(128).zip(ds.labels.chunks(128)) {
        let mut tape = Tape::new();
        let out = backbone.forward_tokens(&mut tape, store, &[], imgs)?;
        let cls = backbone.cls_tokens(&mut tape, &out);
        let (w, b) = (tape.param(store, HEAD_W)?, tape.param(store, HEAD_B)?);
        let logits = tape.linear(cls, w, b);
        let v = tape.value(logits);
        correct += labels.iter().enumerate().filter(|&(i, &l)| v.argmax_row(i) == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

impl BackboneManifest {
    pub fn checkpoint_path(dir: &Path) -> PathBuf {
        dir.join("backbone.ckpt")
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("backbone.json")
    }

    /// Writes `backbone.ckpt` and `backbone.json` into `dir`.
    pub fn save(&self, dir: &Path, store: &ParamStore<f32>) -> Result<()> {
        save_checkpoint(&Self::checkpoint_path(dir), &store.subset(&self.prefix))?;
        let path = Self::manifest_path(dir);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| FateError::io(&path, e))
    }

    /// Reads a saved backbone and checks it against its manifest hash.
    pub fn load(dir: &Path) -> Result<(VisionBackbone, ParamStore<f32>, BackboneManifest)> {
        let mpath = Self::manifest_path(dir);
        if !mpath.exists() {
            return Err(FateError::Missing(format!("backbone manifest {}", mpath.display())));
        }
        let text = fs::read_to_string(&mpath).map_err(|e| FateError::io(&mpath, e))?;
        let manifest: BackboneManifest = serde_json::from_str(&text)?;
        let store: ParamStore<f32> = load_checkpoint(&Self::checkpoint_path(dir))?;
        let hash = store.content_hash(&manifest.prefix);
        if hash != manifest.content_hash {
            return Err(FateError::Invalid(format!(
                "backbone checkpoint hash {hash} does not match manifest {}",
                manifest.content_hash
            )));
        }
        let vb = VisionBackbone::new(manifest.config.clone(), manifest.prefix.clone())?;
        Ok((vb, store, manifest))
    }
}
