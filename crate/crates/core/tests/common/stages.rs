//! The four stage objectives on tiny random encoders, for gradient checks.

use fate_core::clip::{clip_classification_losses, clip_dp_loss, ClipModel, DualEncoder};
use fate_core::data::Image;
use fate_core::tensor::{GradMap, ParamStore, Real, Tape, Var};
use fate_core::text::ContextInit;
use fate_core::vision::{
    adaptation_loss, classification_losses, ClassificationBatch, ClassificationConfig, VisionModel,
};
use fate_core::vit::{set_stage, Stage, VisionBackbone};
use fate_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{class_names, random_images, tiny_backbone, tiny_dual};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    VisionAdapt,
    VisionClassify,
    VlAdapt,
    VlClassify,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [
        StageKind::VisionAdapt,
        StageKind::VisionClassify,
        StageKind::VlAdapt,
        StageKind::VlClassify,
    ];

    pub fn stage(self) -> Stage {
        match self {
            StageKind::VisionAdapt => Stage::VisionAdapt,
            StageKind::VisionClassify => Stage::VisionClassify,
            StageKind::VlAdapt => Stage::VlAdapt,
            StageKind::VlClassify => Stage::VlClassify,
        }
    }
}

pub struct StageProblem {
    pub kind: StageKind,
    vb: VisionBackbone,
    enc: DualEncoder,
    vision: VisionModel,
    clip: ClipModel,
    view_a: Vec<Image>,
    view_b: Vec<Image>,
    batch: ClassificationBatch,
    labels: Vec<usize>,
    cfg: ClassificationConfig,
    store: ParamStore<f64>,
}

impl StageProblem {
    /// `theta = 0` keeps every unlabeled term active so `L_u` is exercised.
    pub fn new(kind: StageKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = 5;
        let (vb, mut store) = tiny_backbone::<f64>(seed);
        let (enc, dual_store) = tiny_dual::<f64>(seed + 1, 5.0);
        let mut vision = VisionModel::new(vb.clone(), 3, 2, classes).unwrap();
        vision.dp_on_strong = false;
        let clip = ClipModel::new(enc.clone(), 3, 4, class_names()).unwrap();
        match kind {
            StageKind::VisionAdapt | StageKind::VisionClassify => {
                vision.dp.as_ref().unwrap().init(&mut store, true, &mut rng);
                vision.cp.as_ref().unwrap().init(&mut store, true, &mut rng);
                vision.projector.init(&mut store, true, &mut rng);
                vision.head.init(&mut store, true, &mut rng);
            }
            StageKind::VlAdapt | StageKind::VlClassify => {
                store = dual_store;
                clip.dp.as_ref().unwrap().init(&mut store, true, &mut rng);
                clip.init_context(&mut store, ContextInit::Random, true, &mut rng).unwrap();
            }
        }
        set_stage(&mut store, kind.stage());
        let n = 4;
        let batch = ClassificationBatch {
            labeled: random_images(3, 16, &mut rng),
            targets: (0..3).map(|_| rng.gen_range(0..classes)).collect(),
            weak: random_images(n, 16, &mut rng),
            strong: random_images(n, 16, &mut rng),
        };
        StageProblem {
            kind,
            vb,
            enc,
            vision,
            clip,
            view_a: random_images(n, 16, &mut rng),
            view_b: random_images(n, 16, &mut rng),
            labels: (0..n).map(|_| rng.gen_range(0..classes)).collect(),
            batch,
            cfg: ClassificationConfig {
                theta: 0.0,
                lambda: 1.0,
                ..ClassificationConfig::default()
            },
            store,
        }
    }

    pub fn store<F: Real>(&self) -> ParamStore<F> {
        self.store.cast()
    }

    pub fn backbone(&self) -> &VisionBackbone {
        &self.vb
    }

    pub fn loss<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> Result<Var> {
        match self.kind {
            StageKind::VisionAdapt => adaptation_loss(tape, store, &self.vision, &self.view_a, &self.view_b, 0.5),
            StageKind::VisionClassify => {
                Ok(classification_losses(tape, store, &self.vision, &self.batch, &self.cfg)?.total)
            }
            StageKind::VlAdapt => {
                let f = self.enc.class_features(store, &class_names())?;
                clip_dp_loss(tape, store, &self.clip, &self.view_a, &self.labels, &f)
            }
            StageKind::VlClassify => {
                Ok(clip_classification_losses(tape, store, &self.clip, &self.batch, &self.cfg)?.total)
            }
        }
    }

    pub fn grads<F: Real>(&self, store: &ParamStore<F>) -> Result<(f64, GradMap<F>)> {
        let mut tape = Tape::new();
        let l = self.loss(&mut tape, store)?;
        let v = tape.scalar(l)?.to_f64().unwrap();
        Ok((v, tape.backprop(l)?))
    }
}

/// Largest relative error between the analytic gradient at precision `F`
/// and a 64-bit Richardson-extrapolated central difference at the same (rounded) parameter values,
/// over `coords` sampled trainable coordinates.
pub fn max_relative_error<F: Real>(problem: &StageProblem, coords: usize, seed: u64) -> f64 {
    let store_f: ParamStore<F> = problem.store();
    let (_, grads) = problem.grads(&store_f).unwrap();
    let base: ParamStore<f64> = store_f.cast();
    let mut space = Vec::new();
    for (name, p) in base.iter().filter(|(_, p)| p.trainable) {
        space.extend((0..p.tensor.len()).map(|i| (name.to_string(), i)));
    }
    assert!(space.len() >= coords, "{:?} has only {} coordinates", problem.kind, space.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, space.len(), coords).into_vec();
    let eps = 1e-4;
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = problem.loss(&mut tape, s).unwrap();
        tape.scalar(l).unwrap()
    };
    let mut worst = 0.0f64;
    for p in picks {
        let (name, i) = &space[p];
        let analytic = grads.get(name).map(|g| g.data()[*i].to_f64().unwrap()).unwrap_or(0.0);
        let central = |eps: f64| {
            let mut plus = base.clone();
            plus.get_mut(name).unwrap().tensor.data_mut()[*i] += eps;
            let mut minus = base.clone();
            minus.get_mut(name).unwrap().tensor.data_mut()[*i] -= eps;
            (eval(&plus) - eval(&minus)) / (2.0 * eps)
        };
        // Richardson extrapolation cancels the O(eps^2) truncation term.
        let numeric = (4.0 * central(eps / 2.0) - central(eps)) / 3.0;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}
