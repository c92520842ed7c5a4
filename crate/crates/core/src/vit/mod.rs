//! Miniature vision transformer with prompt insertion.
//!
//! Input sequences are laid out as `[x_cls; prompt sets...; E]`. Only the
//! patch embeddings `E` carry positional encoding, so prompt tokens and the
//! class token are position-free.

mod pretrain;

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{FateError, Result};
use crate::tensor::{ParamStore, Part, Real, Tape, Tensor, Var};

pub use pretrain::{pretrain_backbone, BackboneManifest, PretrainConfig, PretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            channels: 1,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(FateError::Shape(format!(
                "image side {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(FateError::Config(format!(
                "width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_hidden == 0 {
            return Err(FateError::Config("depth, channels and mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Which role a prompt set plays in the two-stage procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptRole {
    /// Distribution-adaptive prompt, trained on unlabeled data first.
    Dp,
    /// Classification prompt, trained second.
    Cp,
}

/// A group of `len` learnable `dim`-wide tokens stored under `name`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub name: String,
    pub role: PromptRole,
    pub len: usize,
    pub dim: usize,
}

/// Standard deviation of prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

impl PromptSet {
    pub fn new(name: impl Into<String>, role: PromptRole, len: usize, dim: usize) -> Result<Self> {
        if len == 0 {
            return Err(FateError::Invalid("a prompt set needs at least one token".into()));
        }
        Ok(PromptSet {
            name: name.into(),
            role,
            len,
            dim,
        })
    }

    /// Inserts fresh `N(0, 0.02^2)` tokens into `store`.
    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, trainable: bool, rng: &mut R) {
        store.insert(
            self.name.clone(),
            Tensor::randn(&[self.len, self.dim], PROMPT_INIT_STD, rng),
            trainable,
        );
    }

    pub fn tokens<'a, F: Real>(&self, store: &'a ParamStore<F>) -> Result<&'a Tensor<F>> {
        let t = store.tensor(&self.name)?;
        if t.shape() != [self.len, self.dim] {
            return Err(FateError::Shape(format!(
                "prompt `{}` is {:?}, expected [{}, {}]",
                self.name,
                t.shape(),
                self.len,
                self.dim
            )));
        }
        Ok(t)
    }
}

/// Training stages and what each one updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    VisionAdapt,
    VisionClassify,
    VlAdapt,
    VlClassify,
}

/// Parameter names (or name prefixes ending in `.`) each stage trains.
pub fn stage_patterns(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::VisionAdapt => &[names::DP, names::PROJECTOR],
        Stage::VisionClassify => &[names::CP, names::HEAD],
        Stage::VlAdapt => &[names::DP],
        Stage::VlClassify => &[names::TEXT_CP],
    }
}

/// Parameter names used across the crate.
pub mod names {
    pub const DP: &str = "dp";
    pub const CP: &str = "cp";
    pub const PROJECTOR: &str = "proj.";
    pub const HEAD: &str = "head.";
    pub const TEXT_CP: &str = "ctx";
    pub const VISION: &str = "vit.";
    pub const TEXT: &str = "text.";
}

fn matches_pattern(name: &str, pattern: &str) -> bool {
    if pattern.ends_with('.') {
        name.starts_with(pattern)
    } else {
        name == pattern
    }
}

/// The entries of `store` that `stage` updates.
pub fn trainable_parameters<F: Real>(store: &ParamStore<F>, stage: Stage) -> BTreeSet<String> {
    let pats = stage_patterns(stage);
    store
        .names()
        .filter(|n| pats.iter().any(|p| matches_pattern(n, p)))
        .map(String::from)
        .collect()
}

/// Marks exactly the stage's parameters trainable and freezes everything else.
pub fn set_stage<F: Real>(store: &mut ParamStore<F>, stage: Stage) -> BTreeSet<String> {
    let names = trainable_parameters(store, stage);
    store.set_trainable_where(|n| names.contains(n));
    names
}

/// Where each block of a sequence came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub seq: usize,
    /// `(name, start, len)` of each prompt set, in order.
    pub prompts: Vec<(String, usize, usize)>,
    pub patches: (usize, usize),
}

impl TokenLayout {
    pub fn range_of(&self, name: &str) -> Option<(usize, usize)> {
        self.prompts.iter().find(|p| p.0 == name).map(|p| (p.1, p.2))
    }
}

/// Output of [`VisionBackbone::forward_tokens`]: `[batch * seq, d]` rows after
/// the final layer norm.
#[derive(Clone, Debug)]
pub struct TokenOutput {
    pub tokens: Var,
    pub batch: usize,
    pub layout: TokenLayout,
}

/// A vision transformer whose parameters live in a [`ParamStore`] under
/// `prefix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionBackbone {
    pub config: VitConfig,
    pub prefix: String,
}

fn xavier<F: Real, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<F> {
    Tensor::randn(&[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

impl VisionBackbone {
    pub fn new(config: VitConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(VisionBackbone {
            config,
            prefix: prefix.into(),
        })
    }

    fn name(&self, rest: &str) -> String {
        format!("{}{}", self.prefix, rest)
    }

    /// Adds freshly initialized backbone parameters to `store`.
    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, trainable: bool, rng: &mut R) {
        let c = &self.config;
        let d = c.dim;
        store.insert(self.name("patch.w"), xavier(c.patch_dim(), d, rng), trainable);
        store.insert(self.name("pos"), Tensor::randn(&[c.num_patches(), d], 0.02, rng), trainable);
        store.insert(self.name("cls"), Tensor::randn(&[1, d], 0.02, rng), trainable);
        for i in 0..c.depth {
            init_block(store, &self.name(&format!("blocks.{i}.")), d, c.mlp_hidden, trainable, rng);
        }
        store.insert(self.name("ln_f.g"), Tensor::full(&[d], F::one()), trainable);
        store.insert(self.name("ln_f.b"), Tensor::zeros(&[d]), trainable);
    }

    /// Flattens each image into its `m` raster-ordered patches:
    /// `[batch * m, p * p * c]`, patch rows ordered `(py, px, channel)`.
    pub fn patchify<F: Real>(&self, images: &[Image]) -> Result<Tensor<F>> {
        let c = &self.config;
        let p = c.patch;
        let mut out = Vec::with_capacity(images.len() * c.num_patches() * c.patch_dim());
        for im in images {
            if im.height % p != 0 || im.width % p != 0 {
                return Err(FateError::Shape(format!(
                    "{}x{} image is not divisible into {p}x{p} patches",
                    im.height, im.width
                )));
            }
            if im.height != c.image_size || im.width != c.image_size || im.channels != c.channels {
                return Err(FateError::Shape(format!(
                    "expected {s}x{s}x{ch} images, got {}x{}x{}",
                    im.height,
                    im.width,
                    im.channels,
                    s = c.image_size,
                    ch = c.channels
                )));
            }
            let grid = im.width / p;
            for gy in 0..im.height / p {
                for gx in 0..grid {
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..im.channels {
                                out.push(F::lit(im.get(gy * p + py, gx * p + px, ch) as f64));
                            }
                        }
                    }
                }
            }
        }
        if images.is_empty() {
            return Err(FateError::Invalid("empty image batch".into()));
        }
        Tensor::new(vec![images.len() * c.num_patches(), c.patch_dim()], out)
    }

    /// Patch embeddings `E = patches @ W + pos`, `[batch * m, d]`.
    pub fn embed_patches<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, images: &[Image]) -> Result<Var> {
        let patches = tape.constant(self.patchify(images)?);
        let w = tape.param(store, &self.name("patch.w"))?;
        let pos = tape.param(store, &self.name("pos"))?;
        let e = tape.matmul(patches, w);
        Ok(tape.add_tiled(e, pos))
    }

    /// Runs the transformer over `[x_cls; prompts...; E]` for every image.
    ///
    /// Each prompt set is shared by all images of the batch.
    pub fn forward_tokens<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        prompts: &[&PromptSet],
        images: &[Image],
    ) -> Result<TokenOutput> {
        let e = self.embed_patches(tape, store, images)?;
        self.forward_embedded(tape, store, prompts, e, images.len())
    }

    /// [`forward_tokens`](Self::forward_tokens) for precomputed patch
    /// embeddings `e` of shape `[batch * m, d]`.
    pub fn forward_embedded<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        prompts: &[&PromptSet],
        e: Var,
        batch: usize,
    ) -> Result<TokenOutput> {
        let c = &self.config;
        let d = c.dim;
        if tape.value(e).cols() != d || tape.value(e).rows() != batch * c.num_patches() {
            return Err(FateError::Shape(format!(
                "patch embeddings {:?} do not match batch {batch} x {} x {d}",
                tape.value(e).shape(),
                c.num_patches()
            )));
        }
        let cls = tape.param(store, &self.name("cls"))?;
        let mut parts = vec![Part::Shared(cls)];
        let mut layout = Vec::with_capacity(prompts.len());
        let mut pos = 1;
        for p in prompts {
            if p.dim != d {
                return Err(FateError::Shape(format!("prompt `{}` has width {}, backbone {d}", p.name, p.dim)));
            }
            p.tokens(store)?;
            let v = tape.param(store, &p.name)?;
            parts.push(Part::Shared(v));
            layout.push((p.name.clone(), pos, p.len));
            pos += p.len;
        }
        parts.push(Part::PerSample(e));
        let seq = pos + c.num_patches();
        let mut x = tape.assemble(batch, &parts);
        for i in 0..c.depth {
            x = block_forward(tape, store, &self.name(&format!("blocks.{i}.")), x, batch, seq, c.heads, None)?;
        }
        let g = tape.param(store, &self.name("ln_f.g"))?;
        let b = tape.param(store, &self.name("ln_f.b"))?;
        let tokens = tape.layer_norm(x, g, b);
        Ok(TokenOutput {
            tokens,
            batch,
            layout: TokenLayout {
                seq,
                prompts: layout,
                patches: (pos, c.num_patches()),
            },
        })
    }

    /// Output class tokens, `[batch, d]`.
    pub fn cls_tokens<F: Real>(&self, tape: &mut Tape<F>, out: &TokenOutput) -> Var {
        let rows: Vec<usize> = (0..out.batch).map(|b| b * out.layout.seq).collect();
        tape.gather_rows(out.tokens, &rows)
    }

    /// Mean of the output tokens at the positions of prompt set `name`, `[batch, d]`.
    pub fn prompt_mean<F: Real>(&self, tape: &mut Tape<F>, out: &TokenOutput, name: &str) -> Result<Var> {
        let range = out
            .layout
            .range_of(name)
            .ok_or_else(|| FateError::Missing(format!("prompt `{name}` is not in this forward pass")))?;
        Ok(tape.pool_tokens(out.tokens, out.layout.seq, &vec![range; out.batch]))
    }

    /// Names of every backbone tensor.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut v = vec![self.name("patch.w"), self.name("pos"), self.name("cls")];
        for i in 0..self.config.depth {
            for leaf in BLOCK_LEAVES {
                v.push(self.name(&format!("blocks.{i}.{leaf}")));
            }
        }
        v.push(self.name("ln_f.g"));
        v.push(self.name("ln_f.b"));
        v
    }
}

const BLOCK_LEAVES: [&str; 12] = [
    "ln1.g",
    "ln1.b",
    "attn.qkv.w",
    "attn.qkv.b",
    "attn.proj.w",
    "attn.proj.b",
    "ln2.g",
    "ln2.b",
    "mlp.fc1.w",
    "mlp.fc1.b",
    "mlp.fc2.w",
    "mlp.fc2.b",
];

/// Adds one pre-norm transformer block's parameters under `prefix`.
pub(crate) fn init_block<F: Real, R: Rng>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
    hidden: usize,
    trainable: bool,
    rng: &mut R,
) {
    let n = |s: &str| format!("{prefix}{s}");
    store.insert(n("ln1.g"), Tensor::full(&[d], F::one()), trainable);
    store.insert(n("ln1.b"), Tensor::zeros(&[d]), trainable);
    store.insert(n("attn.qkv.w"), xavier(d, 3 * d, rng), trainable);
    store.insert(n("attn.qkv.b"), Tensor::zeros(&[3 * d]), trainable);
    store.insert(n("attn.proj.w"), xavier(d, d, rng), trainable);
    store.insert(n("attn.proj.b"), Tensor::zeros(&[d]), trainable);
    store.insert(n("ln2.g"), Tensor::full(&[d], F::one()), trainable);
    store.insert(n("ln2.b"), Tensor::zeros(&[d]), trainable);
    store.insert(n("mlp.fc1.w"), xavier(d, hidden, rng), trainable);
    store.insert(n("mlp.fc1.b"), Tensor::zeros(&[hidden]), trainable);
    store.insert(n("mlp.fc2.w"), xavier(hidden, d, rng), trainable);
    store.insert(n("mlp.fc2.b"), Tensor::zeros(&[d]), trainable);
}

/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    valid: Option<&[usize]>,
) -> Result<Var> {
    let mut p = |s: &str| tape_param(tape, store, prefix, s);
    let (g1, b1) = (p("ln1.g")?, p("ln1.b")?);
    let (wqkv, bqkv) = (p("attn.qkv.w")?, p("attn.qkv.b")?);
    let (wo, bo) = (p("attn.proj.w")?, p("attn.proj.b")?);
    let (g2, b2) = (p("ln2.g")?, p("ln2.b")?);
    let (w1, bb1) = (p("mlp.fc1.w")?, p("mlp.fc1.b")?);
    let (w2, bb2) = (p("mlp.fc2.w")?, p("mlp.fc2.b")?);

    let h = tape.layer_norm(x, g1, b1);
    let qkv = tape.linear(h, wqkv, bqkv);
    let a = tape.attention(qkv, batch, seq, heads, valid);
    let a = tape.linear(a, wo, bo);
    let x = tape.add(x, a);
    let h = tape.layer_norm(x, g2, b2);
    let h = tape.linear(h, w1, bb1);
    let h = tape.gelu(h);
    let h = tape.linear(h, w2, bb2);
    Ok(tape.add(x, h))
}

fn tape_param<F: Real>(tape: &mut Tape<F>, store: &ParamStore<F>, prefix: &str, leaf: &str) -> Result<Var> {
    tape.param(store, &format!("{prefix}{leaf}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone(image: usize, patch: usize) -> (VisionBackbone, ParamStore<f64>) {
        let cfg = VitConfig {
            image_size: image,
            patch,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_hidden: 32,
            channels: 1,
        };
        let vb = VisionBackbone::new(cfg, "vit.").unwrap();
        let mut store = ParamStore::new();
        vb.init(&mut store, false, &mut ChaCha8Rng::seed_from_u64(0));
        (vb, store)
    }

    fn image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(side, side, 1, (0..side * side).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let (vb, store) = backbone(32, 4);
        let mut tape = Tape::new();
        let e = vb.embed_patches(&mut tape, &store, &[image(32, 0)]).unwrap();
        assert_eq!(tape.value(e).shape(), &[64, 16]);
        let (vb, store) = backbone(28, 7);
        let mut tape = Tape::new();
        let e = vb.embed_patches(&mut tape, &store, &[image(28, 0)]).unwrap();
        assert_eq!(tape.value(e).shape(), &[16, 16]);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        assert!(VitConfig {
            image_size: 30,
            patch: 4,
            ..VitConfig::default()
        }
        .validate()
        .is_err());
        let (vb, _) = backbone(32, 4);
        assert!(vb.patchify::<f32>(&[image(30, 0)]).is_err());
    }

    #[test]
    fn zero_image_and_zero_positions_embed_to_zero() {
        let (vb, mut store) = backbone(32, 4);
        store.insert("vit.pos", Tensor::zeros(&[64, 16]), false);
        let mut tape = Tape::new();
        let e = vb
            .embed_patches(&mut tape, &store, &[Image::filled(32, 32, 1, 0.0)])
            .unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_lengths() {
        let (vb, mut store) = backbone(28, 7);
        let mut tape = Tape::new();
        let out = vb.forward_tokens(&mut tape, &store, &[], &[image(28, 1)]).unwrap();
        assert_eq!(out.layout.seq, 17);

        let (vb, _) = backbone(32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dp = PromptSet::new("dp", PromptRole::Dp, 12, 16).unwrap();
        let cp = PromptSet::new("cp", PromptRole::Cp, 12, 16).unwrap();
        store = ParamStore::new();
        vb.init(&mut store, false, &mut rng);
        dp.init(&mut store, true, &mut rng);
        cp.init(&mut store, true, &mut rng);
        let mut tape = Tape::new();
        let out = vb.forward_tokens(&mut tape, &store, &[&dp, &cp], &[image(32, 1)]).unwrap();
        assert_eq!(out.layout.seq, 89);
        assert_eq!(tape.value(out.tokens).rows(), 89);
        assert_eq!(out.layout.range_of("dp"), Some((1, 12)));
        assert_eq!(out.layout.range_of("cp"), Some((13, 12)));
    }

    #[test]
    fn wrong_prompt_width_is_rejected() {
        let (vb, mut store) = backbone(28, 7);
        let p = PromptSet::new("dp", PromptRole::Dp, 2, 8).unwrap();
        p.init(&mut store, true, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        assert!(vb.forward_tokens(&mut tape, &store, &[&p], &[image(28, 0)]).is_err());
    }

    #[test]
    fn stage_sets() {
        let (vb, mut store) = backbone(28, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (name, role) in [("dp", PromptRole::Dp), ("cp", PromptRole::Cp)] {
            PromptSet::new(name, role, 2, 16).unwrap().init(&mut store, false, &mut rng);
        }
        for n in ["proj.fc1.w", "proj.fc2.w", "head.w", "head.b", "ctx", "text.tok"] {
            store.insert(n, Tensor::<f64>::zeros(&[1]), false);
        }
        let set = |s| trainable_parameters(&store, s).into_iter().collect::<Vec<_>>();
        assert_eq!(set(Stage::VisionAdapt), ["dp", "proj.fc1.w", "proj.fc2.w"]);
        assert_eq!(set(Stage::VisionClassify), ["cp", "head.b", "head.w"]);
        assert_eq!(set(Stage::VlAdapt), ["dp"]);
        assert_eq!(set(Stage::VlClassify), ["ctx"]);
        let backbone: BTreeSet<String> = vb.parameter_names().into_iter().collect();
        for s in [Stage::VisionAdapt, Stage::VisionClassify, Stage::VlAdapt, Stage::VlClassify] {
            assert!(trainable_parameters(&store, s).is_disjoint(&backbone));
            set_stage(&mut store, s);
            assert_eq!(store.trainable_names().into_iter().collect::<BTreeSet<_>>(), trainable_parameters(&store, s));
        }
        assert_eq!(backbone.len(), 3 + 2 * 12 + 2);
        assert!(backbone.iter().all(|n| store.contains(n)));
    }
}
