//! Prompt tuning for a frozen vision transformer.
//!
//! Adaptation: two strong views of each unlabeled image are encoded with
//! `[x_cls; P_d; E]`, their class tokens projected by `J`, and `P_d`, `J`
//! trained with a normalized-temperature contrastive loss.
//!
//! Classification: with `P_d` frozen, the weak and labeled branches see
//! `[x_cls; P_d; P_c; E]`, the strong branch `[x_cls; P_c; E]`. The mean of the
//! output `P_c` tokens feeds the linear head `C`. Confident weak predictions
//! become pseudo-labels for the strong branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, view_rng, weak_augment};
use crate::data::{BatchPair, Dataset, Image};
use crate::error::{FateError, Result};
use crate::tensor::{argmax, softmax_rows, OptimizerState, ParamStore, Real, Tape, Tensor, Var};
use crate::vit::{names, PromptRole, PromptSet, VisionBackbone};

/// View indices fed to [`view_rng`].
pub mod views {
    pub const WEAK: u64 = 0;
    pub const STRONG: u64 = 1;
    pub const ADAPT_A: u64 = 2;
    pub const ADAPT_B: u64 = 3;
    /// Labeled draws use `LABELED + slot`.
    pub const LABELED: u64 = 16;
}

/// Two-layer MLP `d -> hidden -> out` with ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub dim: usize,
    pub hidden: usize,
    pub out: usize,
}

impl Projector {
    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, trainable: bool, rng: &mut R) {
        let p = names::PROJECTOR;
        let s1 = (2.0 / self.dim as f64).sqrt();
        let s2 = (1.0 / self.hidden as f64).sqrt();
        store.insert(format!("{p}fc1.w"), Tensor::randn(&[self.dim, self.hidden], s1, rng), trainable);
        store.insert(format!("{p}fc1.b"), Tensor::zeros(&[self.hidden]), trainable);
        store.insert(format!("{p}fc2.w"), Tensor::randn(&[self.hidden, self.out], s2, rng), trainable);
        store.insert(format!("{p}fc2.b"), Tensor::zeros(&[self.out]), trainable);
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let p = names::PROJECTOR;
        let w1 = tape.param(store, &format!("{p}fc1.w"))?;
        let b1 = tape.param(store, &format!("{p}fc1.b"))?;
        let w2 = tape.param(store, &format!("{p}fc2.w"))?;
        let b2 = tape.param(store, &format!("{p}fc2.b"))?;
        let h = tape.linear(x, w1, b1);
        let h = tape.relu(h);
        Ok(tape.linear(h, w2, b2))
    }

    /// Drops the projector once adaptation is over.
    pub fn remove<F: Real>(store: &mut ParamStore<F>) {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(names::PROJECTOR))
            .map(String::from)
            .collect();
        for n in names {
            store.remove(&n);
        }
    }
}

/// Linear map `d -> Y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub dim: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, trainable: bool, rng: &mut R) {
        let std = (1.0 / self.dim as f64).sqrt();
        store.insert(format!("{}w", names::HEAD), Tensor::randn(&[self.dim, self.classes], std, rng), trainable);
        store.insert(format!("{}b", names::HEAD), Tensor::zeros(&[self.classes]), trainable);
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, &format!("{}w", names::HEAD))?;
        let b = tape.param(store, &format!("{}b", names::HEAD))?;
        Ok(tape.linear(x, w, b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub tau: f64,
    pub epochs: usize,
    pub lr0: f64,
    /// Unlabeled images per step (`mu * B`).
    pub batch_size: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            tau: 0.5,
            epochs: 10,
            lr0: 0.03,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationConfig {
    pub theta: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub mu: f64,
    pub epochs: usize,
    pub lr0: f64,
}

impl Default for ClassificationConfig {
    fn default() -> Self {
        ClassificationConfig {
            theta: 0.95,
            lambda: 1.0,
            batch_size: 32,
            mu: 1.0,
            epochs: 50,
            lr0: 0.03,
        }
    }
}

/// Prompt sets and heads of one vision run, plus where `P_d` is attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionModel {
    pub backbone: VisionBackbone,
    pub dp: Option<PromptSet>,
    pub cp: Option<PromptSet>,
    pub projector: Projector,
    pub head: ClassifierHead,
    /// Also attach `P_d` to the strong branch.
    pub dp_on_strong: bool,
}

impl VisionModel {
    pub fn new(backbone: VisionBackbone, dp_len: usize, cp_len: usize, classes: usize) -> Result<Self> {
        let d = backbone.config.dim;
        let dp = (dp_len > 0)
            .then(|| PromptSet::new(names::DP, PromptRole::Dp, dp_len, d))
            .transpose()?;
        let cp = (cp_len > 0)
            .then(|| PromptSet::new(names::CP, PromptRole::Cp, cp_len, d))
            .transpose()?;
        Ok(VisionModel {
            backbone,
            dp,
            cp,
            projector: Projector {
                dim: d,
                hidden: d,
                out: 32,
            },
            head: ClassifierHead { dim: d, classes },
            dp_on_strong: false,
        })
    }

    /// Prompt sets for the weak and labeled branches.
    pub fn full_prompts(&self) -> Vec<&PromptSet> {
        self.dp.iter().chain(self.cp.iter()).collect()
    }

    /// Prompt sets for the strong branch.
    pub fn strong_prompts(&self) -> Vec<&PromptSet> {
        if self.dp_on_strong {
            self.full_prompts()
        } else {
            self.cp.iter().collect()
        }
    }

    /// Sequence length for a given prompt list.
    pub fn seq_len(&self, prompts: &[&PromptSet]) -> usize {
        1 + prompts.iter().map(|p| p.len).sum::<usize>() + self.backbone.config.num_patches()
    }

    /// Classification features `[batch, d]`: mean output `P_c` tokens, or the
    /// output class token when there is no `P_c` in `prompts`.
    pub fn features<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        prompts: &[&PromptSet],
        images: &[Image],
    ) -> Result<Var> {
        let out = self.backbone.forward_tokens(tape, store, prompts, images)?;
        match prompts.iter().find(|p| p.role == PromptRole::Cp) {
            Some(cp) => self.backbone.prompt_mean(tape, &out, &cp.name),
            None => Ok(self.backbone.cls_tokens(tape, &out)),
        }
    }

    pub fn logits<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        prompts: &[&PromptSet],
        images: &[Image],
    ) -> Result<Var> {
        let feat = self.features(tape, store, prompts, images)?;
        self.head.forward(tape, store, feat)
    }
}

/// Sum over all `2n` anchors of `-log(exp(s_ip / tau) / sum_{k != i} exp(s_ik / tau))`
/// with cosine similarity `s`. Rows `0..n` are the first views and rows
/// `n..2n` the second views of the same samples.
pub fn nt_xent_loss<F: Real>(tape: &mut Tape<F>, z: Var, tau: f64) -> Result<Var> {
    let rows = tape.value(z).rows();
    if rows == 0 || rows % 2 != 0 {
        return Err(FateError::Shape(format!("contrastive loss needs paired rows, got {rows}")));
    }
    if tau <= 0.0 {
        return Err(FateError::Config("temperature must be positive".into()));
    }
    let n = rows / 2;
    let zn = tape.l2_normalize(z)?;
    let sim = tape.matmul_nt(zn, zn);
    let sim = tape.scale(sim, F::lit(1.0 / tau));
    let targets: Vec<usize> = (0..rows).map(|i| (i + n) % rows).collect();
    Ok(tape.softmax_cross_entropy(sim, &targets, &vec![F::one(); rows], true))
}

/// Adaptation loss for pre-augmented view pairs.
pub fn adaptation_loss<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    model: &VisionModel,
    view_a: &[Image],
    view_b: &[Image],
    tau: f64,
) -> Result<Var> {
    if view_a.is_empty() || view_a.len() != view_b.len() {
        return Err(FateError::Invalid(format!(
            "adaptation needs matching non-empty view batches, got {} and {}",
            view_a.len(),
            view_b.len()
        )));
    }
    let dp = model
        .dp
        .as_ref()
        .ok_or_else(|| FateError::Config("adaptation requires a distribution prompt".into()))?;
    let images: Vec<Image> = view_a.iter().chain(view_b).cloned().collect();
    let out = model.backbone.forward_tokens(tape, store, &[dp], &images)?;
    let cls = model.backbone.cls_tokens(tape, &out);
    let z = model.projector.forward(tape, store, cls)?;
    nt_xent_loss(tape, z, tau)
}

/// Two independent strong views of each indexed sample.
pub fn adaptation_views(ds: &Dataset, indices: &[usize], seed: u64, epoch: u64) -> (Vec<Image>, Vec<Image>) {
    let view = |v: u64| {
        indices
            .iter()
            .map(|&i| strong_augment(&ds.images[i], &mut view_rng(seed, i as u64, epoch, v)))
            .collect()
    };
    (view(views::ADAPT_A), view(views::ADAPT_B))
}

/// One SGD update of `P_d` and `J`; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_step<F: Real>(
    store: &mut ParamStore<F>,
    opt: &mut OptimizerState<F>,
    model: &VisionModel,
    ds: &Dataset,
    indices: &[usize],
    seed: u64,
    epoch: u64,
    cfg: &AdaptationConfig,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(FateError::Invalid("empty adaptation batch".into()));
    }
    let (a, b) = adaptation_views(ds, indices, seed, epoch);
    let mut tape = Tape::new();
    let loss = adaptation_loss(&mut tape, store, model, &a, &b, cfg.tau)?;
    let grads = tape.backprop(loss)?;
    opt.sgd_step(&grads, store)?;
    Ok(tape.scalar(loss)?.to_f64().unwrap_or(f64::NAN))
}

/// `(argmax, mask)`: the class with the highest probability (lowest index on
/// ties) and whether that probability reaches `theta`.
pub fn pseudo_label<F: Real>(q_w: &[F], theta: f64) -> (usize, bool) {
    let c = argmax(q_w);
    (c, q_w[c].to_f64().unwrap_or(0.0) >= theta)
}

/// Augmented images for one classification step.
#[derive(Clone, Debug)]
pub struct ClassificationBatch {
    pub labeled: Vec<Image>,
    pub targets: Vec<usize>,
    pub weak: Vec<Image>,
    pub strong: Vec<Image>,
}

impl ClassificationBatch {
    /// Labeled images get weak views keyed by `step` and batch slot; unlabeled
    /// images get one weak and one strong view keyed by `epoch`.
    pub fn from_pair(ds: &Dataset, pair: &BatchPair, seed: u64, epoch: u64, step: u64) -> Self {
        let labeled = pair
            .labeled
            .iter()
            .enumerate()
            .map(|(slot, &i)| weak_augment(&ds.images[i], &mut view_rng(seed, i as u64, step, views::LABELED + slot as u64)))
            .collect();
        let weak = pair
            .unlabeled
            .iter()
            .map(|&i| weak_augment(&ds.images[i], &mut view_rng(seed, i as u64, epoch, views::WEAK)))
            .collect();
        let strong = pair
            .unlabeled
            .iter()
            .map(|&i| strong_augment(&ds.images[i], &mut view_rng(seed, i as u64, epoch, views::STRONG)))
            .collect();
        ClassificationBatch {
            labeled,
            targets: pair.labeled.iter().map(|&i| ds.labels[i]).collect(),
            weak,
            strong,
        }
    }
}

/// Loss nodes and pseudo-labeling outcome of one classification step.
#[derive(Clone, Debug)]
pub struct ClassificationLosses {
    pub l_s: Var,
    pub l_u: Var,
    pub total: Var,
    pub pseudo: Vec<usize>,
    pub mask: Vec<bool>,
    /// Sequence lengths of the weak/labeled and strong branches.
    pub weak_seq: usize,
    pub strong_seq: usize,
}

impl ClassificationLosses {
    pub fn mask_rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Weak-branch class probabilities, computed off the training tape.
pub fn weak_probabilities<F: Real>(store: &ParamStore<F>, model: &VisionModel, weak: &[Image]) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let logits = model.logits(&mut tape, store, &model.full_prompts(), weak)?;
    softmax_rows(tape.value(logits))
}

/// `L_s + lambda * L_u` with `L_s` the mean labeled cross-entropy and
/// `L_u = (1 / (mu B)) * sum mask_b * H(pseudo_b, q_s,b)`.
pub fn classification_losses<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    model: &VisionModel,
    batch: &ClassificationBatch,
    cfg: &ClassificationConfig,
) -> Result<ClassificationLosses> {
    let full = model.full_prompts();
    let strong_prompts = model.strong_prompts();
    let b = batch.labeled.len();
    if b == 0 || b != batch.targets.len() {
        return Err(FateError::Invalid("labeled batch is empty or mislabeled".into()));
    }
    let logits_l = model.logits(tape, store, &full, &batch.labeled)?;
    let l_s = tape.softmax_cross_entropy(logits_l, &batch.targets, &vec![F::lit(1.0 / b as f64); b], false);

    let ub = batch.weak.len();
    let (pseudo, mask) = if ub == 0 {
        (Vec::new(), Vec::new())
    } else {
        let q_w = weak_probabilities(store, model, &batch.weak)?;
        (0..ub).map(|i| pseudo_label(q_w.row(i), cfg.theta)).unzip()
    };
    let l_u = if mask.iter().any(|&m| m) {
        if batch.strong.len() != ub {
            return Err(FateError::Invalid("weak and strong batches differ in size".into()));
        }
        let logits_s = model.logits(tape, store, &strong_prompts, &batch.strong)?;
        let w: Vec<F> = mask
            .iter()
            .map(|&m| if m { F::lit(1.0 / ub as f64) } else { F::zero() })
            .collect();
        tape.softmax_cross_entropy(logits_s, &pseudo, &w, false)
    } else {
        // every term is masked: L_u is exactly zero and has no gradient
        tape.constant(Tensor::scalar(F::zero()))
    };
    let weighted = tape.scale(l_u, F::lit(cfg.lambda));
    let total = tape.add(l_s, weighted);
    Ok(ClassificationLosses {
        l_s,
        l_u,
        total,
        pseudo,
        mask,
        weak_seq: model.seq_len(&full),
        strong_seq: model.seq_len(&strong_prompts),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l_s: f64,
    pub l_u: f64,
    pub mask_rate: f64,
    pub lr: f64,
}

/// One SGD update of the classification-stage parameters.
pub fn classification_step<F: Real>(
    store: &mut ParamStore<F>,
    opt: &mut OptimizerState<F>,
    model: &VisionModel,
    batch: &ClassificationBatch,
    cfg: &ClassificationConfig,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let losses = classification_losses(&mut tape, store, model, batch, cfg)?;
    let grads = tape.backprop(losses.total)?;
    let lr = opt.sgd_step(&grads, store)?;
    Ok(StepMetrics {
        l_s: tape.scalar(losses.l_s)?.to_f64().unwrap_or(f64::NAN),
        l_u: tape.scalar(losses.l_u)?.to_f64().unwrap_or(f64::NAN),
        mask_rate: losses.mask_rate(),
        lr,
    })
}

/// Inference logits for un-augmented images with all prompts attached.
pub fn predict_logits<F: Real>(store: &ParamStore<F>, model: &VisionModel, images: &[Image]) -> Result<Tensor<F>> {
    let mut rows = Vec::new();
    for chunk in images.chunks(100) {
        let mut tape = Tape::new();
        let l = model.logits(&mut tape, store, &model.full_prompts(), chunk)?;
        rows.extend_from_slice(tape.value(l).data());
    }
    Tensor::new(vec![images.len(), model.head.classes], rows)
}

pub fn classify<F: Real>(store: &ParamStore<F>, model: &VisionModel, images: &[Image]) -> Result<Vec<usize>> {
    let logits = predict_logits(store, model, images)?;
    Ok((0..images.len()).map(|i| logits.argmax_row(i)).collect())
}

/// Classification features for export, `[N, d]`.
pub fn extract_features<F: Real>(store: &ParamStore<F>, model: &VisionModel, images: &[Image]) -> Result<Tensor<F>> {
    let mut rows = Vec::new();
    for chunk in images.chunks(100) {
        let mut tape = Tape::new();
        let f = model.features(&mut tape, store, &model.full_prompts(), chunk)?;
        rows.extend_from_slice(tape.value(f).data());
    }
    Tensor::new(vec![images.len(), model.backbone.config.dim], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_label(&[0.96f64, 0.04], 0.95), (0, true));
        assert_eq!(pseudo_label(&[0.5f64, 0.5], 0.95), (0, false));
        assert_eq!(pseudo_label(&[0.5f64, 0.5], 0.4), (0, true));
        assert_eq!(pseudo_label(&[0.2f64, 0.8], 0.8), (1, true));
    }

    #[test]
    fn single_pair_contrastive_loss_is_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap());
        let l = nt_xent_loss(&mut tape, z, 0.5).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pairs() {
        // rows: e1, e2 (first views), e1, e2 (second views)
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = nt_xent_loss(&mut tape, z, 0.5).unwrap();
        let e2 = 2f64.exp();
        let expect = 4.0 * -(e2 / (e2 + 2.0)).ln();
        assert!((tape.scalar(l).unwrap() - expect).abs() < 1e-12);
        assert!((expect / 4.0 - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn zero_vector_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 1.0, 0.0]).unwrap());
        assert!(matches!(nt_xent_loss(&mut tape, z, 0.5), Err(FateError::ZeroVector { .. })));
    }
}
