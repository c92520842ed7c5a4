//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. Keys left out take the defaults of the chosen
//! `variant`, so `variant` is resolved first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FateError, Result};
use crate::text::ContextInit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vision,
    Vl,
}

/// Where downstream images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Procedural glyphs held out from the auxiliary task.
    Glyphs {
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        class_names: PathBuf,
    },
    PngDir {
        train_dir: PathBuf,
        test_dir: PathBuf,
        class_names: PathBuf,
        channels: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub dataset: DatasetConfig,
    /// Directory holding the frozen pretrained encoder(s).
    pub backbone_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub labels_per_class: usize,
    /// Caps the unlabeled set at this many samples; 0 keeps all of it.
    pub unlabeled_limit: usize,

    pub theta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub mu: f64,
    pub batch_size: usize,
    pub adapt_batch_size: usize,
    pub dp_len: usize,
    pub cp_len: usize,
    pub adapt_lr: f64,
    pub classify_lr: f64,
    pub adapt_epochs: usize,
    pub classify_epochs: usize,
    pub k: usize,
    pub logit_scale: f64,
    pub ctx_init: ContextInit,

    pub use_dp: bool,
    pub use_cp: bool,
    pub dp_on_strong_branch: bool,
    /// Attaches a randomly initialised, never trained `P_d`.
    pub noisy_dp: bool,
    /// Adaptation checkpoint to classify with; defaults to the one under
    /// `output_dir`.
    pub dp_checkpoint: Option<PathBuf>,

    /// Encoder pretraining on the auxiliary glyph task.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_min_accuracy: f64,
    pub aux_train_per_class: usize,
    pub aux_test_per_class: usize,
}

impl ExperimentConfig {
    pub fn defaults(variant: Variant) -> Self {
        let base = ExperimentConfig {
            variant,
            dataset: DatasetConfig::Glyphs {
                train_per_class: 400,
                test_per_class: 100,
                seed: 2024,
            },
            backbone_dir: PathBuf::from("backbone"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            labels_per_class: 1,
            unlabeled_limit: 0,
            theta: 0.95,
            lambda: 1.0,
            tau: 0.5,
            mu: 1.0,
            batch_size: 32,
            adapt_batch_size: 32,
            dp_len: 12,
            cp_len: 12,
            adapt_lr: 0.03,
            classify_lr: 0.03,
            adapt_epochs: 10,
            classify_epochs: 50,
            k: 16,
            logit_scale: crate::clip::LOGIT_SCALE,
            ctx_init: ContextInit::Random,
            use_dp: true,
            use_cp: true,
            dp_on_strong_branch: false,
            noisy_dp: false,
            dp_checkpoint: None,
            pretrain_epochs: 20,
            pretrain_lr: 3e-3,
            pretrain_min_accuracy: 0.9,
            aux_train_per_class: 300,
            aux_test_per_class: 50,
        };
        match variant {
            Variant::Vision => base,
            Variant::Vl => ExperimentConfig {
                mu: 16.0,
                batch_size: 4,
                cp_len: 16,
                adapt_lr: 0.1,
                classify_lr: 0.0025,
                adapt_epochs: 20,
                classify_epochs: 20,
                ..base
            },
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FateError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // Relative paths in a config file are relative to the file.
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FateError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(FateError::Config(format!("line {}: key `{k}` given twice", n + 1)));
            }
        }
        Self::from_pairs(pairs)
    }

    pub fn from_pairs(mut pairs: BTreeMap<String, String>) -> Result<Self> {
        let variant = match pairs.remove("variant").as_deref() {
            None | Some("vision") => Variant::Vision,
            Some("vl") => Variant::Vl,
            Some(other) => return Err(FateError::Config(format!("unknown variant `{other}`"))),
        };
        let mut c = Self::defaults(variant);
        let mut take = |key: &str| pairs.remove(key);

        let kind = take("dataset").unwrap_or_else(|| "glyphs".into());
        c.dataset = match kind.as_str() {
            "glyphs" => {
                let (tr, te, s) = match c.dataset {
                    DatasetConfig::Glyphs {
                        train_per_class,
                        test_per_class,
                        seed,
                    } => (train_per_class, test_per_class, seed),
                    _ => unreachable!("defaults use glyphs"),
                };
                DatasetConfig::Glyphs {
                    train_per_class: opt(take("glyph_train_per_class"), "glyph_train_per_class")?.unwrap_or(tr),
                    test_per_class: opt(take("glyph_test_per_class"), "glyph_test_per_class")?.unwrap_or(te),
                    seed: opt(take("glyph_seed"), "glyph_seed")?.unwrap_or(s),
                }
            }
            "idx" => DatasetConfig::Idx {
                train_images: required(take("train_images"), "train_images")?,
                train_labels: required(take("train_labels"), "train_labels")?,
                test_images: required(take("test_images"), "test_images")?,
                test_labels: required(take("test_labels"), "test_labels")?,
                class_names: required(take("class_names"), "class_names")?,
            },
            "png" => DatasetConfig::PngDir {
                train_dir: required(take("train_dir"), "train_dir")?,
                test_dir: required(take("test_dir"), "test_dir")?,
                class_names: required(take("class_names"), "class_names")?,
                channels: opt(take("channels"), "channels")?.unwrap_or(1),
            },
            other => return Err(FateError::Config(format!("unknown dataset kind `{other}`"))),
        };

        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = opt(take(stringify!($field)), stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        set!(
            backbone_dir, output_dir, seed, labels_per_class, unlabeled_limit, theta, lambda, tau, mu, batch_size,
            adapt_batch_size, dp_len, cp_len, adapt_lr, classify_lr, adapt_epochs, classify_epochs, k, logit_scale,
            use_dp, use_cp, dp_on_strong_branch, noisy_dp, pretrain_epochs, pretrain_lr, pretrain_min_accuracy,
            aux_train_per_class, aux_test_per_class
        );
        if let Some(v) = take("ctx_init") {
            c.ctx_init = match v.as_str() {
                "random" => ContextInit::Random,
                "template" => ContextInit::Template,
                other => return Err(FateError::Config(format!("unknown ctx_init `{other}`"))),
            };
        }
        if let Some(v) = take("dp_checkpoint") {
            c.dp_checkpoint = Some(PathBuf::from(v));
        }
        if let Some(key) = pairs.keys().next() {
            return Err(FateError::Config(format!("unknown key `{key}`")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FateError::Config(m.to_string()));
        if !(self.theta.is_finite() && self.lambda >= 0.0 && self.tau > 0.0 && self.logit_scale > 0.0) {
            return bad("theta must be finite, lambda non-negative, tau and logit_scale positive");
        }
        if self.batch_size == 0 || self.adapt_batch_size == 0 || self.labels_per_class == 0 || self.k == 0 {
            return bad("batch sizes, labels_per_class and k must be positive");
        }
        if !(self.adapt_lr > 0.0 && self.classify_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.use_dp && self.dp_len == 0 {
            return bad("use_dp needs dp_len > 0");
        }
        if self.use_cp && self.cp_len == 0 {
            return bad("use_cp needs cp_len > 0");
        }
        if self.noisy_dp && !self.use_dp {
            return bad("noisy_dp needs use_dp");
        }
        if self.variant == Variant::Vl && self.ctx_init == ContextInit::Template && self.use_cp && self.cp_len != 4 {
            return bad("ctx_init = template needs cp_len = 4");
        }
        crate::data::unlabeled_batch_size(self.batch_size, self.mu).map(|_| ())
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.backbone_dir);
        fix(&mut self.output_dir);
        if let Some(p) = self.dp_checkpoint.as_mut() {
            fix(p);
        }
        match &mut self.dataset {
            DatasetConfig::Glyphs { .. } => {}
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                class_names,
            } => {
                for p in [train_images, train_labels, test_images, test_labels, class_names] {
                    fix(p);
                }
            }
            DatasetConfig::PngDir {
                train_dir,
                test_dir,
                class_names,
                ..
            } => {
                for p in [train_dir, test_dir, class_names] {
                    fix(p);
                }
            }
        }
    }

    /// The config in the file format, every key spelled out.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = match self.variant {
            Variant::Vision => "vision",
            Variant::Vl => "vl",
        };
        let _ = writeln!(s, "variant = {v}");
        match &self.dataset {
            DatasetConfig::Glyphs {
                train_per_class,
                test_per_class,
                seed,
            } => {
                let _ = writeln!(s, "dataset = glyphs");
                let _ = writeln!(s, "glyph_train_per_class = {train_per_class}");
                let _ = writeln!(s, "glyph_test_per_class = {test_per_class}");
                let _ = writeln!(s, "glyph_seed = {seed}");
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                class_names,
            } => {
                let _ = writeln!(s, "dataset = idx");
                let _ = writeln!(s, "train_images = {}", train_images.display());
                let _ = writeln!(s, "train_labels = {}", train_labels.display());
                let _ = writeln!(s, "test_images = {}", test_images.display());
                let _ = writeln!(s, "test_labels = {}", test_labels.display());
                let _ = writeln!(s, "class_names = {}", class_names.display());
            }
            DatasetConfig::PngDir {
                train_dir,
                test_dir,
                class_names,
                channels,
            } => {
                let _ = writeln!(s, "dataset = png");
                let _ = writeln!(s, "train_dir = {}", train_dir.display());
                let _ = writeln!(s, "test_dir = {}", test_dir.display());
                let _ = writeln!(s, "class_names = {}", class_names.display());
                let _ = writeln!(s, "channels = {channels}");
            }
        }
        let ctx = match self.ctx_init {
            ContextInit::Random => "random",
            ContextInit::Template => "template",
        };
        let rows: Vec<(&str, String)> = vec![
            ("backbone_dir", self.backbone_dir.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("labels_per_class", self.labels_per_class.to_string()),
            ("unlabeled_limit", self.unlabeled_limit.to_string()),
            ("theta", self.theta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("tau", self.tau.to_string()),
            ("mu", self.mu.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("adapt_batch_size", self.adapt_batch_size.to_string()),
            ("dp_len", self.dp_len.to_string()),
            ("cp_len", self.cp_len.to_string()),
            ("adapt_lr", self.adapt_lr.to_string()),
            ("classify_lr", self.classify_lr.to_string()),
            ("adapt_epochs", self.adapt_epochs.to_string()),
            ("classify_epochs", self.classify_epochs.to_string()),
            ("k", self.k.to_string()),
            ("logit_scale", self.logit_scale.to_string()),
            ("ctx_init", ctx.to_string()),
            ("use_dp", self.use_dp.to_string()),
            ("use_cp", self.use_cp.to_string()),
            ("dp_on_strong_branch", self.dp_on_strong_branch.to_string()),
            ("noisy_dp", self.noisy_dp.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_min_accuracy", self.pretrain_min_accuracy.to_string()),
            ("aux_train_per_class", self.aux_train_per_class.to_string()),
            ("aux_test_per_class", self.aux_test_per_class.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        if let Some(p) = &self.dp_checkpoint {
            let _ = writeln!(s, "dp_checkpoint = {}", p.display());
        }
        s
    }
}

fn opt<T: FromStr>(value: Option<String>, key: &str) -> Result<Option<T>> {
    value
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| FateError::Config(format!("cannot parse `{v}` for key `{key}`")))
        })
        .transpose()
}

fn required<T: FromStr>(value: Option<String>, key: &str) -> Result<T> {
    opt(value, key)?.ok_or_else(|| FateError::Config(format!("missing key `{key}`")))
}
