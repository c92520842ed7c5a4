//! Prompt tuning for a frozen image-text dual encoder.
//!
//! Adaptation: the frozen encoders label the unlabeled set zero-shot, the
//! `k` most confident samples per class are kept, and a visual `P_d` is
//! trained with cross-entropy against those pseudo-labels.
//!
//! Classification: with `P_d` frozen, a textual context `P_c` replaces the
//! "a photo of a" embeddings and is trained with the confidence-thresholded
//! objective. The weak and labeled views carry `P_d`, the strong view does not.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{view_rng, weak_augment};
use crate::data::{Dataset, Image};
use crate::error::{FateError, Result};
use crate::tensor::{
    load_checkpoint, save_checkpoint, softmax_rows, AdamConfig, AdamState, OptimizerState, ParamStore, Real, Tape,
    Tensor, Var,
};
use crate::text::{ContextInit, ContextPrompt, TextConfig, TextEncoder, TokenTable};
use crate::vision::{pseudo_label, ClassificationBatch, ClassificationConfig, StepMetrics};
use crate::vit::{names, PromptRole, PromptSet, VisionBackbone, VitConfig};

/// Default logit scale `s`.
pub const LOGIT_SCALE: f64 = 30.0;

/// Frozen image and text towers sharing one feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub vision: VisionBackbone,
    pub text: TextEncoder,
    pub table: TokenTable,
    pub scale: f64,
}

impl DualEncoder {
    pub fn new(vit: VitConfig, text: TextConfig, table: TokenTable, scale: f64) -> Result<Self> {
        if text.out_dim != vit.dim {
            return Err(FateError::Config(format!(
                "text features ({}) must match image features ({})",
                text.out_dim, vit.dim
            )));
        }
        Ok(DualEncoder {
            vision: VisionBackbone::new(vit, names::VISION)?,
            text: TextEncoder::new(text, names::TEXT)?,
            table,
            scale,
        })
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, trainable: bool, rng: &mut R) {
        self.vision.init(store, trainable, rng);
        self.text.init(store, &self.table, trainable, rng);
    }

    /// Unit-norm output class tokens `[n, d]`, recorded on `tape`.
    pub fn image_features<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        prompts: &[&PromptSet],
        images: &[Image],
    ) -> Result<Var> {
        let out = self.vision.forward_tokens(tape, store, prompts, images)?;
        let cls = self.vision.cls_tokens(tape, &out);
        tape.l2_normalize(cls)
    }

    /// [`image_features`](Self::image_features) evaluated off-tape in chunks.
    pub fn image_features_value<F: Real>(
        &self,
        store: &ParamStore<F>,
        prompts: &[&PromptSet],
        images: &[Image],
    ) -> Result<Tensor<F>> {
        let mut rows = Vec::new();
        for chunk in images.chunks(100) {
            let mut tape = Tape::new();
            let f = self.image_features(&mut tape, store, prompts, chunk)?;
            rows.extend_from_slice(tape.value(f).data());
        }
        Tensor::new(vec![images.len(), self.vision.config.dim], rows)
    }

    /// Fixed-template class features `f`, `[Y, d]`.
    pub fn class_features<F: Real>(&self, store: &ParamStore<F>, class_names: &[String]) -> Result<Tensor<F>> {
        self.text.encode_class_prompts(store, &self.table, class_names)
    }

    /// `s * <image, text>` for unit-norm feature tables.
    pub fn scaled_similarity<F: Real>(&self, tape: &mut Tape<F>, image: Var, text: Var) -> Var {
        let sim = tape.matmul_nt(image, text);
        tape.scale(sim, F::lit(self.scale))
    }

    pub fn parameter_prefixes(&self) -> [&str; 2] {
        [&self.vision.prefix, &self.text.prefix]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out zero-shot accuracy on the auxiliary classes below this is an error.
    pub min_accuracy: f64,
}

impl Default for DualPretrainConfig {
    fn default() -> Self {
        DualPretrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 3e-3,
            seed: 0,
            min_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPretrainReport {
    pub heldout_accuracy: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub seconds: f64,
}

/// Caption groups used for alignment: the full class names, then one group
/// per word position (e.g. all styles, all shapes). `labels[g][c]` is class
/// `c`'s caption index within group `g`.
fn caption_groups(class_names: &[String]) -> (Vec<Vec<String>>, Vec<Vec<usize>>) {
    let mut groups = vec![class_names.to_vec()];
    let mut labels = vec![(0..class_names.len()).collect::<Vec<_>>()];
    let words: Vec<Vec<&str>> = class_names.iter().map(|n| n.split_whitespace().collect()).collect();
    let width = words.iter().map(Vec::len).min().unwrap_or(0);
    if words.iter().all(|w| w.len() == width) && width > 1 {
        for j in 0..width {
            let uniq: Vec<String> = words
                .iter()
                .map(|w| w[j].to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let lab = words.iter().map(|w| uniq.iter().position(|u| u == w[j]).unwrap_or(0)).collect();
            groups.push(uniq);
            labels.push(lab);
        }
    }
    (groups, labels)
}

/// Trains both towers from scratch so that images of the auxiliary classes
/// match "a photo of a <name>" and the one-word captions of each attribute.
pub fn pretrain_dual_encoder(
    enc: &DualEncoder,
    aux_train: &Dataset,
    aux_test: &Dataset,
    downstream_classes: &[String],
    cfg: &DualPretrainConfig,
) -> Result<(ParamStore<f32>, DualPretrainReport)> {
    let aux: BTreeSet<&String> = aux_train.class_names.iter().collect();
    let overlap: Vec<String> = downstream_classes.iter().filter(|c| aux.contains(c)).cloned().collect();
    if !overlap.is_empty() {
        return Err(FateError::ClassOverlap(overlap));
    }
    for name in downstream_classes {
        enc.table.tokenize(name)?;
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(FateError::Config("pretraining needs positive epochs and batch size".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    enc.init(&mut store, true, &mut rng);
    let (groups, group_labels) = caption_groups(&aux_train.class_names);
    let group_ids: Vec<Vec<Vec<usize>>> = groups
        .iter()
        .map(|g| enc.text.class_ids(&enc.table, g))
        .collect::<Result<_>>()?;

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
            let mut tape = Tape::new();
            let img = enc.image_features(&mut tape, &store, &[], &images)?;
            let weights = vec![1.0 / chunk.len() as f32; chunk.len()];
            let mut loss: Option<Var> = None;
            for (ids, labels) in group_ids.iter().zip(&group_labels) {
                let ctx = enc.text.template_context(&mut tape, &store, &enc.table)?;
                let txt = enc.text.encode_with_context(&mut tape, &store, &enc.table, ctx, ids)?;
                let logits = enc.scaled_similarity(&mut tape, img, txt);
                let targets: Vec<usize> = chunk.iter().map(|&i| labels[aux_train.labels[i]]).collect();
                let l = tape.softmax_cross_entropy(logits, &targets, &weights, false);
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
            }
            let loss = loss.expect("at least one caption group");
            let grads = tape.backprop(loss)?;
            opt.adam_step(&grads, &mut store)?;
            epoch_loss += tape.scalar(loss)? as f64;
        }
        final_loss = epoch_loss / steps_per_epoch as f64;
        log::info!("dual-encoder pretrain epoch {epoch}: loss {final_loss:.4}");
    }
    store.freeze_all();
    let f = enc.class_features(&store, &aux_test.class_names)?;
    let preds = zero_shot_pseudo_label(&store, enc, &aux_test.images, &f)?;
    let correct = preds.iter().zip(&aux_test.labels).filter(|(p, &l)| p.0 == l).count();
    let heldout_accuracy = correct as f64 / aux_test.len() as f64;
    log::info!("dual-encoder held-out zero-shot accuracy {heldout_accuracy:.4}");
    if heldout_accuracy < cfg.min_accuracy {
        return Err(FateError::Invalid(format!(
            "dual encoder reached {heldout_accuracy:.3} held-out accuracy, below the required {}",
            cfg.min_accuracy
        )));
    }
    Ok((
        store,
        DualPretrainReport {
            heldout_accuracy,
            final_loss,
            steps: total,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Sidecar written next to a dual-encoder checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderManifest {
    pub encoder: DualEncoder,
    pub auxiliary_classes: Vec<String>,
    pub heldout_accuracy: f64,
    pub content_hash: String,
}

impl DualEncoderManifest {
    pub fn checkpoint_path(dir: &Path) -> PathBuf {
        dir.join("dual_encoder.ckpt")
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("dual_encoder.json")
    }

    pub fn save(&self, dir: &Path, store: &ParamStore<f32>) -> Result<()> {
        save_checkpoint(&Self::checkpoint_path(dir), store)?;
        let path = Self::manifest_path(dir);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| FateError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(DualEncoder, ParamStore<f32>, DualEncoderManifest)> {
        let mpath = Self::manifest_path(dir);
        if !mpath.exists() {
            return Err(FateError::Missing(format!("dual-encoder manifest {}", mpath.display())));
        }
        let text = fs::read_to_string(&mpath).map_err(|e| FateError::io(&mpath, e))?;
        let mut manifest: DualEncoderManifest = serde_json::from_str(&text)?;
        manifest.encoder.table = manifest.encoder.table.clone().reindex();
        let store: ParamStore<f32> = load_checkpoint(&Self::checkpoint_path(dir))?;
        let hash = store.content_hash("");
        if hash != manifest.content_hash {
            return Err(FateError::Invalid(format!(
                "dual-encoder checkpoint hash {hash} does not match manifest {}",
                manifest.content_hash
            )));
        }
        Ok((manifest.encoder.clone(), store, manifest))
    }
}

/// Zero-shot `(class, confidence)` per image: argmax and maximum of
/// `softmax(s * <x_cls, f>)`, with no prompts attached.
pub fn zero_shot_pseudo_label<F: Real>(
    store: &ParamStore<F>,
    enc: &DualEncoder,
    images: &[Image],
    f: &Tensor<F>,
) -> Result<Vec<(usize, f64)>> {
    let logits = similarity_logits(enc, &enc.image_features_value(store, &[], images)?, f)?;
    let probs = softmax_rows(&logits)?;
    Ok((0..images.len())
        .map(|i| {
            let (c, _) = pseudo_label(probs.row(i), 1.0);
            (c, probs.row(i)[c].to_f64().unwrap_or(0.0))
        })
        .collect())
}

/// `s * image @ text^T` for feature tables held outside a tape.
pub fn similarity_logits<F: Real>(enc: &DualEncoder, image: &Tensor<F>, text: &Tensor<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let i = tape.constant(image.clone());
    let t = tape.constant(text.clone());
    let l = enc.scaled_similarity(&mut tape, i, t);
    Ok(tape.value(l).clone())
}

/// Confident zero-shot samples grouped by pseudo-class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSet {
    /// `(sample_index, pseudo_class, confidence)`, class by class, most
    /// confident first.
    pub samples: Vec<(usize, usize, f64)>,
    pub k: usize,
    pub warnings: Vec<String>,
}

impl PseudoLabeledSet {
    pub fn indices(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.1).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_index,pseudo_class,confidence\n");
        for (i, c, p) in &self.samples {
            out.push_str(&format!("{i},{c},{p:.9}\n"));
        }
        fs::write(path, out).map_err(|e| FateError::io(path, e))
    }
}

/// The `k` most confident samples of each pseudo-class; ties go to the lower
/// sample index. `sample_indices[i]` names prediction `i`'s sample.
pub fn select_topk_per_class(
    predictions: &[(usize, f64)],
    sample_indices: &[usize],
    classes: usize,
    k: usize,
) -> Result<PseudoLabeledSet> {
    if k == 0 {
        return Err(FateError::Invalid("k must be at least 1".into()));
    }
    if predictions.len() != sample_indices.len() {
        return Err(FateError::Invalid("predictions and sample indices differ in length".into()));
    }
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for c in 0..classes {
        let mut cand: Vec<(usize, f64)> = predictions
            .iter()
            .zip(sample_indices)
            .filter(|((p, _), _)| *p == c)
            .map(|((_, conf), &i)| (i, *conf))
            .collect();
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if cand.len() < k {
            let msg = format!("class {c} has {} pseudo-labeled candidates, fewer than k = {k}", cand.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        samples.extend(cand.into_iter().take(k).map(|(i, p)| (i, c, p)));
    }
    Ok(PseudoLabeledSet { samples, k, warnings })
}

/// Prompts and configuration of one vision-language run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipModel {
    pub encoder: DualEncoder,
    pub dp: Option<PromptSet>,
    pub ctx: Option<ContextPrompt>,
    pub class_names: Vec<String>,
}

impl ClipModel {
    pub fn new(encoder: DualEncoder, dp_len: usize, ctx_len: usize, class_names: Vec<String>) -> Result<Self> {
        let d = encoder.vision.config.dim;
        let dp = (dp_len > 0)
            .then(|| PromptSet::new(names::DP, PromptRole::Dp, dp_len, d))
            .transpose()?;
        let ctx = (ctx_len > 0).then(|| ContextPrompt {
            name: names::TEXT_CP.to_string(),
            len: ctx_len,
        });
        Ok(ClipModel {
            encoder,
            dp,
            ctx,
            class_names,
        })
    }

    pub fn init_context<F: Real, R: Rng>(
        &self,
        store: &mut ParamStore<F>,
        init: ContextInit,
        trainable: bool,
        rng: &mut R,
    ) -> Result<()> {
        match &self.ctx {
            Some(ctx) => self
                .encoder
                .text
                .init_context(store, &self.encoder.table, ctx, init, trainable, rng),
            None => Ok(()),
        }
    }

    pub fn visual_prompts(&self) -> Vec<&PromptSet> {
        self.dp.iter().collect()
    }

    /// Class features: `f'` from the learned context when present, else `f`.
    pub fn text_features<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> Result<Var> {
        let enc = &self.encoder;
        match &self.ctx {
            Some(ctx) => enc
                .text
                .build_context_prompts(tape, store, &enc.table, ctx, &self.class_names),
            None => {
                let ids = enc.text.class_ids(&enc.table, &self.class_names)?;
                let c = enc.text.template_context(tape, store, &enc.table)?;
                enc.text.encode_with_context(tape, store, &enc.table, c, &ids)
            }
        }
    }

    pub fn text_features_value<F: Real>(&self, store: &ParamStore<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let f = self.text_features(&mut tape, store)?;
        Ok(tape.value(f).clone())
    }
}

/// Mean cross-entropy of `softmax(s * <x_cls(P_d), f>)` against pseudo-labels.
pub fn clip_dp_loss<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    model: &ClipModel,
    images: &[Image],
    labels: &[usize],
    f: &Tensor<F>,
) -> Result<Var> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(FateError::Invalid("pseudo-labeled batch is empty or mislabeled".into()));
    }
    let img = model.encoder.image_features(tape, store, &model.visual_prompts(), images)?;
    let txt = tape.constant(f.clone());
    let logits = model.encoder.scaled_similarity(tape, img, txt);
    let w = vec![F::lit(1.0 / images.len() as f64); images.len()];
    Ok(tape.softmax_cross_entropy(logits, labels, &w, false))
}

/// One SGD update of `P_d` on a pseudo-labeled batch.
pub fn clip_dp_adaptation_step<F: Real>(
    store: &mut ParamStore<F>,
    opt: &mut OptimizerState<F>,
    model: &ClipModel,
    images: &[Image],
    labels: &[usize],
    f: &Tensor<F>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = clip_dp_loss(&mut tape, store, model, images, labels, f)?;
    let grads = tape.backprop(loss)?;
    opt.sgd_step(&grads, store)?;
    Ok(tape.scalar(loss)?.to_f64().unwrap_or(f64::NAN))
}

/// Loss nodes of one vision-language classification step.
#[derive(Clone, Debug)]
pub struct ClipClassificationLosses {
    pub l_s: Var,
    pub l_u: Var,
    pub total: Var,
    pub pseudo: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ClipClassificationLosses {
    pub fn mask_rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// The frozen image features of one step are constants; only `f'` is
/// differentiated.
pub fn clip_classification_losses<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    model: &ClipModel,
    batch: &ClassificationBatch,
    cfg: &ClassificationConfig,
) -> Result<ClipClassificationLosses> {
    let enc = &model.encoder;
    let b = batch.labeled.len();
    if b == 0 || b != batch.targets.len() {
        return Err(FateError::Invalid("labeled batch is empty or mislabeled".into()));
    }
    let dp = model.visual_prompts();
    let txt = model.text_features(tape, store)?;

    let img_l = enc.image_features_value(store, &dp, &batch.labeled)?;
    let img_l = tape.constant(img_l);
    let logits_l = enc.scaled_similarity(tape, img_l, txt);
    let l_s = tape.softmax_cross_entropy(logits_l, &batch.targets, &vec![F::lit(1.0 / b as f64); b], false);

    let ub = batch.weak.len();
    let (pseudo, mask): (Vec<usize>, Vec<bool>) = if ub == 0 {
        (Vec::new(), Vec::new())
    } else {
        let img_w = enc.image_features_value(store, &dp, &batch.weak)?;
        let q_w = softmax_rows(&similarity_logits(enc, &img_w, tape.value(txt))?)?;
        (0..ub).map(|i| pseudo_label(q_w.row(i), cfg.theta)).unzip()
    };
    let l_u = if mask.iter().any(|&m| m) {
        let img_s = enc.image_features_value(store, &[], &batch.strong)?;
        let img_s = tape.constant(img_s);
        let logits_s = enc.scaled_similarity(tape, img_s, txt);
        let w: Vec<F> = mask
            .iter()
            .map(|&m| if m { F::lit(1.0 / ub as f64) } else { F::zero() })
            .collect();
        tape.softmax_cross_entropy(logits_s, &pseudo, &w, false)
    } else {
        tape.constant(Tensor::scalar(F::zero()))
    };
    let weighted = tape.scale(l_u, F::lit(cfg.lambda));
    let total = tape.add(l_s, weighted);
    Ok(ClipClassificationLosses {
        l_s,
        l_u,
        total,
        pseudo,
        mask,
    })
}

pub fn clip_classification_step<F: Real>(
    store: &mut ParamStore<F>,
    opt: &mut OptimizerState<F>,
    model: &ClipModel,
    batch: &ClassificationBatch,
    cfg: &ClassificationConfig,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let losses = clip_classification_losses(&mut tape, store, model, batch, cfg)?;
    let grads = tape.backprop(losses.total)?;
    let lr = opt.sgd_step(&grads, store)?;
    Ok(StepMetrics {
        l_s: tape.scalar(losses.l_s)?.to_f64().unwrap_or(f64::NAN),
        l_u: tape.scalar(losses.l_u)?.to_f64().unwrap_or(f64::NAN),
        mask_rate: losses.mask_rate(),
        lr,
    })
}

/// `s * <x_cls(P_d), f'>` for un-augmented images.
pub fn clip_logits<F: Real>(store: &ParamStore<F>, model: &ClipModel, images: &[Image]) -> Result<Tensor<F>> {
    let img = model.encoder.image_features_value(store, &model.visual_prompts(), images)?;
    let txt = model.text_features_value(store)?;
    similarity_logits(&model.encoder, &img, &txt)
}

pub fn clip_classify<F: Real>(store: &ParamStore<F>, model: &ClipModel, images: &[Image]) -> Result<Vec<usize>> {
    let logits = clip_logits(store, model, images)?;
    Ok((0..images.len()).map(|i| logits.argmax_row(i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_rules() {
        let preds = vec![(0, 0.9), (1, 0.8), (0, 0.95), (0, 0.9), (1, 0.7), (0, 0.5)];
        let idx: Vec<usize> = (10..16).collect();
        let s = select_topk_per_class(&preds, &idx, 3, 2).unwrap();
        assert_eq!(s.samples, vec![(12, 0, 0.95), (10, 0, 0.9), (11, 1, 0.8), (14, 1, 0.7)]);
        assert_eq!(s.warnings.len(), 1, "class 2 has no candidates");
        let one = select_topk_per_class(&preds, &idx, 2, 1).unwrap();
        assert_eq!(one.indices(), vec![12, 11]);
        let three = select_topk_per_class(&preds, &idx, 2, 16).unwrap();
        assert_eq!(three.samples.len(), 6);
        assert_eq!(three.warnings.len(), 2);
        assert!(select_topk_per_class(&preds, &idx, 2, 0).is_err());
    }

    #[test]
    fn caption_groups_split_words() {
        let names: Vec<String> = ["filled circle", "outline square", "filled triangle"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (groups, labels) = caption_groups(&names);
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[1], vec!["filled", "outline"]);
        assert_eq!(labels[1], vec![0, 1, 0]);
        assert_eq!(groups[2], vec!["circle", "square", "triangle"]);
        assert_eq!(labels[2], vec![0, 1, 2]);
    }
}
