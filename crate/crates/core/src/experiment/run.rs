//! One seeded two-stage run: adaptation, then classification.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DatasetConfig, ExperimentConfig, Variant};
use crate::augment::{derive_seed, view_rng, weak_augment};
use crate::clip::{
    clip_classification_step, clip_classify, clip_dp_adaptation_step, pretrain_dual_encoder, select_topk_per_class,
    zero_shot_pseudo_label, ClipModel, DualEncoder, DualEncoderManifest, DualPretrainConfig, DualPretrainReport,
};
use crate::data::{load_dataset, read_class_names, DataSource};
use crate::data::synth::{auxiliary_datasets, downstream_datasets, GlyphTaskSpec};
use crate::data::{make_one_shot_split, BatchSampler, Dataset, Image, SplitSpec, SslSplit};
use crate::error::{FateError, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, OptimizerState, ParamStore, SgdConfig};
use crate::text::{TextConfig, TokenTable};
use crate::vision::{
    adaptation_step, classification_step, classify, views, AdaptationConfig, ClassificationBatch,
    ClassificationConfig, VisionModel,
};
use crate::vit::{
    names, pretrain_backbone, set_stage, BackboneManifest, PretrainConfig, PretrainReport, Stage, VisionBackbone,
    VitConfig,
};

/// Stream ids for run-level randomness, kept apart from per-sample views.
mod streams {
    pub const SPLIT: u64 = 1000;
    pub const ADAPT_INIT: u64 = 1001;
    pub const ADAPT_ORDER: u64 = 1002;
    pub const HEAD_INIT: u64 = 1003;
    pub const CP_INIT: u64 = 1004;
    pub const NOISY_DP: u64 = 1005;
    pub const SAMPLER: u64 = 1006;
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0, id))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSelect {
    Adapt,
    Classify,
    All,
}

impl std::str::FromStr for StageSelect {
    type Err = FateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapt" => Ok(StageSelect::Adapt),
            "classify" => Ok(StageSelect::Classify),
            "all" => Ok(StageSelect::All),
            other => Err(FateError::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// One row of `metrics.csv`, one per epoch per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: String,
    pub l_s: Option<f64>,
    pub l_u: Option<f64>,
    pub mask_rate: Option<f64>,
    pub lr: f64,
    pub test_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,stage,L_s,L_u,mask_rate,lr,test_accuracy";
pub const TIMING_HEADER: &str = "epoch,stage,wall_seconds";

impl MetricsRecord {
    /// The deterministic columns; wall time goes to `timing.csv`.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            f(self.l_s),
            f(self.l_u),
            f(self.mask_rate),
            self.lr,
            f(self.test_accuracy)
        )
    }
}

/// Append-only writer for `metrics.csv` and `timing.csv`.
pub struct MetricsLog {
    pub metrics: PathBuf,
    pub timing: PathBuf,
    start: Instant,
}

impl MetricsLog {
    /// Starts fresh files when `fresh`, else appends to existing ones.
    pub fn open(dir: &Path, fresh: bool) -> Result<Self> {
        let log = MetricsLog {
            metrics: dir.join("metrics.csv"),
            timing: dir.join("timing.csv"),
            start: Instant::now(),
        };
        for (path, header) in [(&log.metrics, METRICS_HEADER), (&log.timing, TIMING_HEADER)] {
            if fresh || !path.exists() {
                fs::write(path, format!("{header}\n")).map_err(|e| FateError::io(path, e))?;
            }
        }
        Ok(log)
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn append(&self, rec: &MetricsRecord) -> Result<()> {
        append_line(&self.metrics, &rec.csv_row())?;
        append_line(&self.timing, &format!("{},{},{:.3}", rec.epoch, rec.stage, rec.wall_seconds))
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| FateError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| FateError::io(path, e))
}

/// Everything needed to replay a run, written as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub stage: StageSelect,
    pub code_version: String,
    pub data_hash: String,
    pub seed: u64,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_count: usize,
    /// Frozen encoder parameters before and after the run.
    pub encoder_hash: String,
    pub encoder_hash_after: String,
    /// `P_d` as loaded for classification and after it.
    pub dp_hash: Option<String>,
    pub dp_hash_after: Option<String>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub pseudo_labels: Option<PathBuf>,
    pub pseudo_label_accuracy: Option<f64>,
    pub pseudo_label_warnings: Vec<String>,
    pub zero_shot_accuracy: Option<f64>,
    pub dp_only_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub weak_seq_len: Option<usize>,
    pub strong_seq_len: Option<usize>,
}

impl RunManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let text = fs::read_to_string(&path).map_err(|e| FateError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = Self::path(dir);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| FateError::io(&path, e))
    }
}

/// Downstream train and test sets named by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Glyphs { .. } => downstream_datasets(&glyph_spec(cfg)),
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            class_names,
        } => {
            let names = read_class_names(class_names)?;
            let train = DataSource::Idx {
                images: train_images.clone(),
                labels: train_labels.clone(),
            };
            let test = DataSource::Idx {
                images: test_images.clone(),
                labels: test_labels.clone(),
            };
            Ok((load_dataset(&train, names.clone())?, load_dataset(&test, names)?))
        }
        DatasetConfig::PngDir {
            train_dir,
            test_dir,
            class_names,
            channels,
        } => {
            let names = read_class_names(class_names)?;
            let src = |dir: &PathBuf| DataSource::PngDir {
                dir: dir.clone(),
                channels: *channels,
            };
            Ok((load_dataset(&src(train_dir), names.clone())?, load_dataset(&src(test_dir), names)?))
        }
    }
}

pub fn glyph_spec(cfg: &ExperimentConfig) -> GlyphTaskSpec {
    let mut spec = GlyphTaskSpec {
        aux_train_per_class: cfg.aux_train_per_class,
        aux_test_per_class: cfg.aux_test_per_class,
        ..GlyphTaskSpec::default()
    };
    if let DatasetConfig::Glyphs {
        train_per_class,
        test_per_class,
        seed,
    } = cfg.dataset
    {
        spec.train_per_class = train_per_class;
        spec.test_per_class = test_per_class;
        spec.seed = seed;
    }
    spec
}

/// SHA-256 over the pixels and labels of the given datasets.
pub fn data_hash(sets: &[&Dataset]) -> String {
    let mut h = Sha256::new();
    for ds in sets {
        for (img, &l) in ds.images.iter().zip(&ds.labels) {
            for p in &img.pixels {
                h.update(p.to_le_bytes());
            }
            h.update((l as u32).to_le_bytes());
        }
        for n in &ds.class_names {
            h.update(n.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// The labeled/unlabeled partition of a run, capped at `unlabeled_limit`.
pub fn make_split(cfg: &ExperimentConfig, train: &Dataset) -> Result<SslSplit> {
    let mut split = make_one_shot_split(
        train,
        SplitSpec {
            labels_per_class: cfg.labels_per_class,
            seed: cfg.seed,
        },
    )?;
    if cfg.unlabeled_limit > 0 && split.unlabeled.len() > cfg.unlabeled_limit {
        split.unlabeled.shuffle(&mut stream(cfg.seed, streams::SPLIT));
        split.unlabeled.truncate(cfg.unlabeled_limit);
        split.unlabeled.sort_unstable();
    }
    Ok(split)
}

/// Frozen encoders loaded for a run.
#[derive(Clone, Debug)]
pub enum Encoders {
    Vision(VisionBackbone),
    Vl(DualEncoder),
}

pub fn load_encoders(cfg: &ExperimentConfig) -> Result<(Encoders, ParamStore<f32>)> {
    match cfg.variant {
        Variant::Vision => {
            let (vb, store, _) = BackboneManifest::load(&cfg.backbone_dir)?;
            Ok((Encoders::Vision(vb), store))
        }
        Variant::Vl => {
            let (mut enc, store, _) = DualEncoderManifest::load(&cfg.backbone_dir)?;
            enc.scale = cfg.logit_scale;
            Ok((Encoders::Vl(enc), store))
        }
    }
}

/// What encoder pretraining produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PretrainOutcome {
    Vision(PretrainReport),
    Vl(DualPretrainReport),
}

/// Pretrains the variant's encoders on the auxiliary glyph task and writes
/// them to `backbone_dir`.
pub fn pretrain_encoders(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let spec = glyph_spec(cfg);
    let (aux_train, aux_test) = auxiliary_datasets(&spec)?;
    let (train, _) = load_datasets(cfg)?;
    fs::create_dir_all(&cfg.backbone_dir).map_err(|e| FateError::io(&cfg.backbone_dir, e))?;
    match cfg.variant {
        Variant::Vision => {
            let vb = VisionBackbone::new(VitConfig::default(), names::VISION)?;
            let pcfg = PretrainConfig {
                epochs: cfg.pretrain_epochs,
                lr: cfg.pretrain_lr,
                min_accuracy: cfg.pretrain_min_accuracy,
                ..PretrainConfig::default()
            };
            let (store, report) = pretrain_backbone(&vb, &aux_train, &aux_test, &train.class_names, &pcfg)?;
            BackboneManifest {
                config: vb.config.clone(),
                prefix: vb.prefix.clone(),
                auxiliary_classes: aux_train.class_names.clone(),
                heldout_accuracy: report.heldout_accuracy,
                content_hash: store.content_hash(&vb.prefix),
            }
            .save(&cfg.backbone_dir, &store)?;
            Ok(PretrainOutcome::Vision(report))
        }
        Variant::Vl => {
            let mut words = aux_train.class_names.clone();
            words.extend(train.class_names.iter().cloned());
            let table = TokenTable::from_class_names(&words, crate::text::DEFAULT_CONTEXT_LEN);
            let enc = DualEncoder::new(VitConfig::default(), TextConfig::default(), table, cfg.logit_scale)?;
            let pcfg = DualPretrainConfig {
                epochs: cfg.pretrain_epochs,
                lr: cfg.pretrain_lr,
                min_accuracy: cfg.pretrain_min_accuracy,
                ..DualPretrainConfig::default()
            };
            let (store, report) = pretrain_dual_encoder(&enc, &aux_train, &aux_test, &train.class_names, &pcfg)?;
            DualEncoderManifest {
                encoder: enc,
                auxiliary_classes: aux_train.class_names.clone(),
                heldout_accuracy: report.heldout_accuracy,
                content_hash: store.content_hash(""),
            }
            .save(&cfg.backbone_dir, &store)?;
            Ok(PretrainOutcome::Vl(report))
        }
    }
}

pub const ADAPT_CHECKPOINT: &str = "adapt.ckpt";
pub const CLASSIFY_CHECKPOINT: &str = "classify.ckpt";
pub const PSEUDO_LABELS: &str = "pseudo_labels.csv";

fn dp_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.dp_checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(ADAPT_CHECKPOINT))
}

fn encoder_prefixes(enc: &Encoders) -> Vec<String> {
    match enc {
        Encoders::Vision(vb) => vec![vb.prefix.clone()],
        Encoders::Vl(de) => vec![de.vision.prefix.clone(), de.text.prefix.clone()],
    }
}

/// Hash of every frozen encoder tensor.
fn encoder_hash(store: &ParamStore<f32>, enc: &Encoders) -> String {
    let mut sub = ParamStore::new();
    for p in encoder_prefixes(enc) {
        sub.merge(store.subset(&p));
    }
    sub.content_hash("")
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

/// Runs the selected stage(s) and writes metrics, checkpoints and the manifest
/// into `output_dir`. Inputs are checked before any training starts.
pub fn run_experiment(cfg: &ExperimentConfig, stage: StageSelect) -> Result<RunManifest> {
    cfg.validate()?;
    let classify_stage = stage != StageSelect::Adapt;
    let adapt_stage = stage != StageSelect::Classify && cfg.use_dp && !cfg.noisy_dp;
    if stage == StageSelect::Adapt && !(cfg.use_dp && !cfg.noisy_dp) {
        return Err(FateError::Config("the adaptation stage needs use_dp = true and noisy_dp = false".into()));
    }
    if classify_stage && !adapt_stage && cfg.use_dp && !cfg.noisy_dp {
        let path = dp_checkpoint_path(cfg);
        if !path.exists() {
            return Err(FateError::Missing(format!(
                "adaptation checkpoint {} (run the adapt stage first or set use_dp = false)",
                path.display()
            )));
        }
    }
    let (enc, base) = load_encoders(cfg)?;
    let (train, test) = load_datasets(cfg)?;
    let split = make_split(cfg, &train)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| FateError::io(&cfg.output_dir, e))?;
    let log = MetricsLog::open(&cfg.output_dir, stage != StageSelect::Classify)?;

    let encoder_hash_before = encoder_hash(&base, &enc);
    let mut manifest = RunManifest {
        config: cfg.clone(),
        stage,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        data_hash: data_hash(&[&train, &test]),
        seed: cfg.seed,
        labeled_indices: split.labeled.clone(),
        unlabeled_count: split.unlabeled.len(),
        encoder_hash: encoder_hash_before.clone(),
        encoder_hash_after: encoder_hash_before,
        dp_hash: None,
        dp_hash_after: None,
        checkpoints: Vec::new(),
        metrics: log.metrics.clone(),
        pseudo_labels: None,
        pseudo_label_accuracy: None,
        pseudo_label_warnings: Vec::new(),
        zero_shot_accuracy: None,
        dp_only_accuracy: None,
        test_accuracy: None,
        weak_seq_len: None,
        strong_seq_len: None,
    };

    let mut after = base.clone();
    if adapt_stage {
        let store = match &enc {
            Encoders::Vision(vb) => adapt_vision(cfg, vb, &base, &train, &split, &log)?,
            Encoders::Vl(de) => adapt_vl(cfg, de, &base, &train, &test, &split, &log, &mut manifest)?,
        };
        let path = cfg.output_dir.join(ADAPT_CHECKPOINT);
        let mut saved = store.subset(names::DP);
        saved.merge(store.subset(names::PROJECTOR));
        save_checkpoint(&path, &saved)?;
        manifest.checkpoints.push(path);
        after = store;
    }
    if classify_stage {
        let dp = load_dp(cfg, &enc)?;
        manifest.dp_hash = dp.as_ref().map(|s| s.content_hash(names::DP));
        let store = match &enc {
            Encoders::Vision(vb) => classify_vision(cfg, vb, &base, dp, &train, &test, &split, &log, &mut manifest)?,
            Encoders::Vl(de) => classify_vl(cfg, de, &base, dp, &train, &test, &split, &log, &mut manifest)?,
        };
        manifest.dp_hash_after = manifest.dp_hash.as_ref().map(|_| store.content_hash(names::DP));
        let path = cfg.output_dir.join(CLASSIFY_CHECKPOINT);
        let mut saved = ParamStore::new();
        for prefix in [names::DP, names::CP, names::HEAD, names::TEXT_CP] {
            saved.merge(store.subset(prefix));
        }
        save_checkpoint(&path, &saved)?;
        manifest.checkpoints.push(path);
        after = store;
    }
    manifest.encoder_hash_after = encoder_hash(&after, &enc);
    manifest.save(&cfg.output_dir)?;
    Ok(manifest)
}

/// `P_d` for classification: trained, freshly random (noisy control), or none.
fn load_dp(cfg: &ExperimentConfig, enc: &Encoders) -> Result<Option<ParamStore<f32>>> {
    if !cfg.use_dp {
        return Ok(None);
    }
    let d = match enc {
        Encoders::Vision(vb) => vb.config.dim,
        Encoders::Vl(de) => de.vision.config.dim,
    };
    let prompt = crate::vit::PromptSet::new(names::DP, crate::vit::PromptRole::Dp, cfg.dp_len, d)?;
    let mut store = ParamStore::new();
    if cfg.noisy_dp {
        prompt.init(&mut store, false, &mut stream(cfg.seed, streams::NOISY_DP));
        return Ok(Some(store));
    }
    let loaded: ParamStore<f32> = load_checkpoint(&dp_checkpoint_path(cfg))?;
    let t = loaded.tensor(names::DP)?;
    if t.shape() != [cfg.dp_len, d] {
        return Err(FateError::Shape(format!(
            "adaptation checkpoint holds a {:?} prompt, config asks for [{}, {d}]",
            t.shape(),
            cfg.dp_len
        )));
    }
    store.insert(names::DP, t.clone(), false);
    Ok(Some(store))
}

fn adapt_vision(
    cfg: &ExperimentConfig,
    vb: &VisionBackbone,
    base: &ParamStore<f32>,
    train: &Dataset,
    split: &SslSplit,
    log: &MetricsLog,
) -> Result<ParamStore<f32>> {
    let model = VisionModel::new(vb.clone(), cfg.dp_len, 0, train.num_classes())?;
    let mut store = base.clone();
    let mut rng = stream(cfg.seed, streams::ADAPT_INIT);
    if let Some(dp) = &model.dp {
        dp.init(&mut store, true, &mut rng);
    }
    model.projector.init(&mut store, true, &mut rng);
    set_stage(&mut store, Stage::VisionAdapt);
    let bs = cfg.adapt_batch_size.min(split.unlabeled.len());
    if bs < 2 {
        return Err(FateError::Invalid("adaptation needs at least two unlabeled samples per batch".into()));
    }
    let steps = split.unlabeled.len() / bs;
    let acfg = AdaptationConfig {
        tau: cfg.tau,
        epochs: cfg.adapt_epochs,
        lr0: cfg.adapt_lr,
        batch_size: bs,
    };
    let mut opt = OptimizerState::new(SgdConfig::new(cfg.adapt_lr, steps * cfg.adapt_epochs));
    let mut order_rng = stream(cfg.seed, streams::ADAPT_ORDER);
    let mut order = split.unlabeled.clone();
    for epoch in 0..cfg.adapt_epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut lr = opt.lr();
        for chunk in order.chunks_exact(bs) {
            lr = opt.lr();
            total += adaptation_step(&mut store, &mut opt, &model, train, chunk, cfg.seed, epoch as u64, &acfg)?;
        }
        let rec = MetricsRecord {
            epoch,
            stage: "adapt".into(),
            l_s: None,
            l_u: Some(total / steps as f64),
            mask_rate: None,
            lr,
            test_accuracy: None,
            wall_seconds: log.elapsed(),
        };
        log::info!("adapt epoch {epoch}: contrastive loss {:.4}", total / steps as f64);
        log.append(&rec)?;
    }
    Ok(store)
}

#[allow(clippy::too_many_arguments)]
fn classify_vision(
    cfg: &ExperimentConfig,
    vb: &VisionBackbone,
    base: &ParamStore<f32>,
    dp: Option<ParamStore<f32>>,
    train: &Dataset,
    test: &Dataset,
    split: &SslSplit,
    log: &MetricsLog,
    manifest: &mut RunManifest,
) -> Result<ParamStore<f32>> {
    let dp_len = if cfg.use_dp { cfg.dp_len } else { 0 };
    let cp_len = if cfg.use_cp { cfg.cp_len } else { 0 };
    let mut model = VisionModel::new(vb.clone(), dp_len, cp_len, train.num_classes())?;
    model.dp_on_strong = cfg.dp_on_strong_branch;
    let mut store = base.clone();
    if let Some(dp) = dp {
        store.merge(dp);
    }
    model.head.init(&mut store, true, &mut stream(cfg.seed, streams::HEAD_INIT));
    if let Some(cp) = &model.cp {
        cp.init(&mut store, true, &mut stream(cfg.seed, streams::CP_INIT));
    }
    set_stage(&mut store, Stage::VisionClassify);
    manifest.weak_seq_len = Some(model.seq_len(&model.full_prompts()));
    manifest.strong_seq_len = Some(model.seq_len(&model.strong_prompts()));

    let ccfg = classification_config(cfg);
    let mut sampler = BatchSampler::new(split, cfg.batch_size, cfg.mu, derive_seed(cfg.seed, 0, 0, streams::SAMPLER))?;
    let steps = sampler.steps_per_epoch();
    let mut opt = OptimizerState::new(SgdConfig::new(cfg.classify_lr, steps * cfg.classify_epochs));
    let mut step = 0u64;
    let mut acc = None;
    for epoch in 0..cfg.classify_epochs {
        let mut sums = [0.0; 3];
        let mut lr = opt.lr();
        for _ in 0..steps {
            let pair = sampler.next_pair();
            let batch = ClassificationBatch::from_pair(train, &pair, cfg.seed, epoch as u64, step);
            let m = classification_step(&mut store, &mut opt, &model, &batch, &ccfg)?;
            sums[0] += m.l_s;
            sums[1] += m.l_u;
            sums[2] += m.mask_rate;
            lr = m.lr;
            step += 1;
        }
        let a = accuracy(&classify(&store, &model, &test.images)?, &test.labels);
        acc = Some(a);
        log::info!("classify epoch {epoch}: L_s {:.4} L_u {:.4} test {a:.4}", sums[0] / steps as f64, sums[1] / steps as f64);
        log.append(&MetricsRecord {
            epoch,
            stage: "classify".into(),
            l_s: Some(sums[0] / steps as f64),
            l_u: Some(sums[1] / steps as f64),
            mask_rate: Some(sums[2] / steps as f64),
            lr,
            test_accuracy: Some(a),
            wall_seconds: log.elapsed(),
        })?;
    }
    manifest.test_accuracy = match acc {
        Some(a) => Some(a),
        None => Some(accuracy(&classify(&store, &model, &test.images)?, &test.labels)),
    };
    Ok(store)
}

fn classification_config(cfg: &ExperimentConfig) -> ClassificationConfig {
    ClassificationConfig {
        theta: cfg.theta,
        lambda: cfg.lambda,
        batch_size: cfg.batch_size,
        mu: cfg.mu,
        epochs: cfg.classify_epochs,
        lr0: cfg.classify_lr,
    }
}

#[allow(clippy::too_many_arguments)]
fn adapt_vl(
    cfg: &ExperimentConfig,
    enc: &DualEncoder,
    base: &ParamStore<f32>,
    train: &Dataset,
    test: &Dataset,
    split: &SslSplit,
    log: &MetricsLog,
    manifest: &mut RunManifest,
) -> Result<ParamStore<f32>> {
    let model = ClipModel::new(enc.clone(), cfg.dp_len, 0, train.class_names.clone())?;
    let f = enc.class_features(base, &train.class_names)?;
    let zs = zero_shot_pseudo_label(base, enc, &test.images, &f)?;
    manifest.zero_shot_accuracy = Some(accuracy(&zs.iter().map(|p| p.0).collect::<Vec<_>>(), &test.labels));

    let unlabeled: Vec<Image> = split.unlabeled.iter().map(|&i| train.images[i].clone()).collect();
    let preds = zero_shot_pseudo_label(base, enc, &unlabeled, &f)?;
    let selected = select_topk_per_class(&preds, &split.unlabeled, train.num_classes(), cfg.k)?;
    let path = cfg.output_dir.join(PSEUDO_LABELS);
    selected.write_csv(&path)?;
    manifest.pseudo_labels = Some(path);
    let truth: Vec<usize> = selected.indices().iter().map(|&i| train.labels[i]).collect();
    manifest.pseudo_label_accuracy = Some(accuracy(&selected.labels(), &truth));
    manifest.pseudo_label_warnings = selected.warnings.clone();
    if selected.samples.is_empty() {
        return Err(FateError::Invalid("no pseudo-labeled samples to adapt on".into()));
    }

    let mut store = base.clone();
    if let Some(dp) = &model.dp {
        dp.init(&mut store, true, &mut stream(cfg.seed, streams::ADAPT_INIT));
    }
    set_stage(&mut store, Stage::VlAdapt);
    let bs = cfg.adapt_batch_size.min(selected.samples.len());
    let steps = selected.samples.len().div_ceil(bs);
    let mut opt = OptimizerState::new(SgdConfig::new(cfg.adapt_lr, steps * cfg.adapt_epochs));
    let mut order_rng = stream(cfg.seed, streams::ADAPT_ORDER);
    let mut order: Vec<(usize, usize)> = selected.samples.iter().map(|s| (s.0, s.1)).collect();
    for epoch in 0..cfg.adapt_epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut lr = opt.lr();
        for chunk in order.chunks(bs) {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&(i, _)| weak_augment(&train.images[i], &mut view_rng(cfg.seed, i as u64, epoch as u64, views::WEAK)))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|c| c.1).collect();
            lr = opt.lr();
            total += clip_dp_adaptation_step(&mut store, &mut opt, &model, &images, &labels, &f)?;
        }
        log::info!("vl adapt epoch {epoch}: loss {:.4}", total / steps as f64);
        log.append(&MetricsRecord {
            epoch,
            stage: "adapt".into(),
            l_s: None,
            l_u: Some(total / steps as f64),
            mask_rate: None,
            lr,
            test_accuracy: None,
            wall_seconds: log.elapsed(),
        })?;
    }
    Ok(store)
}

#[allow(clippy::too_many_arguments)]
fn classify_vl(
    cfg: &ExperimentConfig,
    enc: &DualEncoder,
    base: &ParamStore<f32>,
    dp: Option<ParamStore<f32>>,
    train: &Dataset,
    test: &Dataset,
    split: &SslSplit,
    log: &MetricsLog,
    manifest: &mut RunManifest,
) -> Result<ParamStore<f32>> {
    let dp_len = if cfg.use_dp { cfg.dp_len } else { 0 };
    let cp_len = if cfg.use_cp { cfg.cp_len } else { 0 };
    let model = ClipModel::new(enc.clone(), dp_len, cp_len, train.class_names.clone())?;
    let mut store = base.clone();
    if let Some(dp) = dp {
        store.merge(dp);
    }
    let plain = ClipModel::new(enc.clone(), 0, 0, train.class_names.clone())?;
    manifest.zero_shot_accuracy = Some(accuracy(&clip_classify(&store, &plain, &test.images)?, &test.labels));
    if cfg.use_dp {
        let dp_only = ClipModel::new(enc.clone(), dp_len, 0, train.class_names.clone())?;
        manifest.dp_only_accuracy = Some(accuracy(&clip_classify(&store, &dp_only, &test.images)?, &test.labels));
    }
    model.init_context(&mut store, cfg.ctx_init, true, &mut stream(cfg.seed, streams::CP_INIT))?;
    set_stage(&mut store, Stage::VlClassify);
    let prompts = model.visual_prompts();
    let seq = |extra: usize| 1 + extra + enc.vision.config.num_patches();
    manifest.weak_seq_len = Some(seq(prompts.iter().map(|p| p.len).sum()));
    manifest.strong_seq_len = Some(seq(0));

    let ccfg = classification_config(cfg);
    if cfg.use_cp {
        let mut sampler =
            BatchSampler::new(split, cfg.batch_size, cfg.mu, derive_seed(cfg.seed, 0, 0, streams::SAMPLER))?;
        let steps = sampler.steps_per_epoch();
        let mut opt = OptimizerState::new(SgdConfig::new(cfg.classify_lr, steps * cfg.classify_epochs));
        let mut step = 0u64;
        for epoch in 0..cfg.classify_epochs {
            let mut sums = [0.0; 3];
            let mut lr = opt.lr();
            for _ in 0..steps {
                let pair = sampler.next_pair();
                let batch = ClassificationBatch::from_pair(train, &pair, cfg.seed, epoch as u64, step);
                let m = clip_classification_step(&mut store, &mut opt, &model, &batch, &ccfg)?;
                sums[0] += m.l_s;
                sums[1] += m.l_u;
                sums[2] += m.mask_rate;
                lr = m.lr;
                step += 1;
            }
            let a = accuracy(&clip_classify(&store, &model, &test.images)?, &test.labels);
            log::info!("vl classify epoch {epoch}: L_s {:.4} L_u {:.4} test {a:.4}", sums[0] / steps as f64, sums[1] / steps as f64);
            log.append(&MetricsRecord {
                epoch,
                stage: "classify".into(),
                l_s: Some(sums[0] / steps as f64),
                l_u: Some(sums[1] / steps as f64),
                mask_rate: Some(sums[2] / steps as f64),
                lr,
                test_accuracy: Some(a),
                wall_seconds: log.elapsed(),
            })?;
        }
    }
    manifest.test_accuracy = Some(accuracy(&clip_classify(&store, &model, &test.images)?, &test.labels));
    Ok(store)
}
