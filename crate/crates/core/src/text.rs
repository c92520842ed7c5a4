//! Word-level text encoder for class-name prompts.
//!
//! A prompt is `[context; class-name tokens; padding]` of fixed length. The
//! default context is the embedding of "a photo of a"; a learnable
//! [`ContextPrompt`] replaces those rows. Features are the mean of the final
//! hidden states over non-padding positions, projected and unit-normalized.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FateError, Result};
use crate::tensor::{ParamStore, Part, Real, Tape, Tensor, Var};
use crate::vit::{block_forward, init_block};

pub const PAD: &str = "<pad>";
pub const TEMPLATE: [&str; 4] = ["a", "photo", "of", "a"];
/// Prompt length `l` used by the toy encoder.
pub const DEFAULT_CONTEXT_LEN: usize = 32;

/// Closed word vocabulary; id 0 is padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenTable {
    pub vocab: Vec<String>,
    pub context_len: usize,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl TokenTable {
    /// Template words plus every word of `class_names`, sorted after padding.
    pub fn from_class_names(class_names: &[String], context_len: usize) -> Self {
        let mut words: Vec<String> = TEMPLATE.iter().map(|w| w.to_string()).collect();
        for name in class_names {
            words.extend(name.split_whitespace().map(str::to_lowercase));
        }
        words.sort();
        words.dedup();
        let mut vocab = vec![PAD.to_string()];
        vocab.extend(words);
        Self::with_vocab(vocab, context_len)
    }

    pub fn with_vocab(vocab: Vec<String>, context_len: usize) -> Self {
        let ids = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        TokenTable {
            vocab,
            context_len,
            ids,
        }
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn reindex(self) -> Self {
        Self::with_vocab(self.vocab, self.context_len)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                match self.ids.get(&w) {
                    Some(&i) if i != 0 => Ok(i),
                    _ => Err(FateError::OutOfVocabulary(w)),
                }
            })
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(FateError::OutOfVocabulary(text.to_string()));
        }
        Ok(ids)
    }

    pub fn template_ids(&self) -> Result<Vec<usize>> {
        self.tokenize(&TEMPLATE.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Width of the shared image-text space.
    pub out_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_hidden: 128,
            out_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub prefix: String,
}

/// Learnable context rows shared by every class prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPrompt {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextInit {
    /// Copies of the "a photo of a" embeddings; needs `len == 4`.
    Template,
    /// `N(0, 0.02^2)` entries.
    Random,
}

impl TextEncoder {
    pub fn new(config: TextConfig, prefix: impl Into<String>) -> Result<Self> {
        if config.dim % config.heads != 0 || config.depth == 0 {
            return Err(FateError::Config("text width must be a multiple of its head count".into()));
        }
        Ok(TextEncoder {
            config,
            prefix: prefix.into(),
        })
    }

    fn name(&self, rest: &str) -> String {
        format!("{}{}", self.prefix, rest)
    }

    pub fn token_name(&self) -> String {
        self.name("tok")
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, table: &TokenTable, trainable: bool, rng: &mut R) {
        let c = &self.config;
        store.insert(self.name("tok"), Tensor::randn(&[table.len(), c.dim], 0.1, rng), trainable);
        store.insert(self.name("pos"), Tensor::randn(&[table.context_len, c.dim], 0.02, rng), trainable);
        for i in 0..c.depth {
            init_block(store, &self.name(&format!("blocks.{i}.")), c.dim, c.mlp_hidden, trainable, rng);
        }
        store.insert(self.name("ln_f.g"), Tensor::full(&[c.dim], F::one()), trainable);
        store.insert(self.name("ln_f.b"), Tensor::zeros(&[c.dim]), trainable);
        let std = (1.0 / c.dim as f64).sqrt();
        store.insert(self.name("proj.w"), Tensor::randn(&[c.dim, c.out_dim], std, rng), trainable);
    }

    /// Adds the context prompt `ctx` to `store`.
    pub fn init_context<F: Real, R: Rng>(
        &self,
        store: &mut ParamStore<F>,
        table: &TokenTable,
        ctx: &ContextPrompt,
        init: ContextInit,
        trainable: bool,
        rng: &mut R,
    ) -> Result<()> {
        let t = match init {
            ContextInit::Template => {
                if ctx.len != TEMPLATE.len() {
                    return Err(FateError::Config(format!(
                        "template initialization needs {} context tokens, got {}",
                        TEMPLATE.len(),
                        ctx.len
                    )));
                }
                let tok = store.tensor(&self.token_name())?;
                let mut rows = Vec::with_capacity(ctx.len * self.config.dim);
                for id in table.template_ids()? {
                    rows.extend_from_slice(tok.row(id));
                }
                Tensor::new(vec![ctx.len, self.config.dim], rows)?
            }
            ContextInit::Random => Tensor::randn(&[ctx.len, self.config.dim], 0.02, rng),
        };
        store.insert(ctx.name.clone(), t, trainable);
        Ok(())
    }

    /// Fixed "a photo of a" context rows, `[4, d_text]`, with no gradient.
    pub fn template_context<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, table: &TokenTable) -> Result<Var> {
        let tok = tape.param(store, &self.token_name())?;
        Ok(tape.gather_rows(tok, &table.template_ids()?))
    }

    /// Unit-norm features `[Y, out_dim]` of `[ctx; name_i; padding]` for each class.
    pub fn encode_with_context<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        table: &TokenTable,
        ctx: Var,
        class_ids: &[Vec<usize>],
    ) -> Result<Var> {
        let n_c = tape.value(ctx).rows();
        let l = table.context_len;
        let longest = class_ids.iter().map(Vec::len).max().unwrap_or(0);
        if class_ids.is_empty() || longest == 0 {
            return Err(FateError::Invalid("no class prompts to encode".into()));
        }
        if n_c + longest > l {
            return Err(FateError::Invalid(format!(
                "context of {n_c} tokens plus a {longest}-token class name exceeds length {l}"
            )));
        }
        if tape.value(ctx).cols() != self.config.dim {
            return Err(FateError::Shape(format!(
                "context width {} differs from text width {}",
                tape.value(ctx).cols(),
                self.config.dim
            )));
        }
        let tail = l - n_c;
        let mut flat = Vec::with_capacity(class_ids.len() * tail);
        let mut lengths = Vec::with_capacity(class_ids.len());
        for ids in class_ids {
            flat.extend_from_slice(ids);
            flat.extend(std::iter::repeat(0).take(tail - ids.len()));
            lengths.push(n_c + ids.len());
        }
        let tok = tape.param(store, &self.token_name())?;
        let suffix = tape.gather_rows(tok, &flat);
        let seqs = tape.assemble(class_ids.len(), &[Part::Shared(ctx), Part::PerSample(suffix)]);
        self.encode_sequences(tape, store, seqs, &lengths)
    }

    /// Encodes embedded sequences `[Y * l, d_text]` whose first `lengths[i]`
    /// positions are real tokens.
    pub fn encode_sequences<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        seqs: Var,
        lengths: &[usize],
    ) -> Result<Var> {
        let c = &self.config;
        let y = lengths.len();
        let l = tape.value(seqs).rows() / y.max(1);
        let pos = tape.param(store, &self.name("pos"))?;
        let mut x = tape.add_tiled(seqs, pos);
        for i in 0..c.depth {
            x = block_forward(tape, store, &self.name(&format!("blocks.{i}.")), x, y, l, c.heads, Some(lengths))?;
        }
        let g = tape.param(store, &self.name("ln_f.g"))?;
        let b = tape.param(store, &self.name("ln_f.b"))?;
        let x = tape.layer_norm(x, g, b);
        let ranges: Vec<(usize, usize)> = lengths.iter().map(|&n| (0, n)).collect();
        let pooled = tape.pool_tokens(x, l, &ranges);
        let w = tape.param(store, &self.name("proj.w"))?;
        let f = tape.matmul(pooled, w);
        tape.l2_normalize(f)
    }

    pub fn class_ids(&self, table: &TokenTable, class_names: &[String]) -> Result<Vec<Vec<usize>>> {
        class_names.iter().map(|n| table.tokenize(n)).collect()
    }

    /// Class text features `f` under the fixed template, `[Y, out_dim]`.
    pub fn encode_class_prompts<F: Real>(
        &self,
        store: &ParamStore<F>,
        table: &TokenTable,
        class_names: &[String],
    ) -> Result<Tensor<F>> {
        if class_names.len() < 2 {
            return Err(FateError::Invalid("need at least two classes".into()));
        }
        let ids = self.class_ids(table, class_names)?;
        let mut tape = Tape::new();
        let ctx = self.template_context(&mut tape, store, table)?;
        let f = self.encode_with_context(&mut tape, store, table, ctx, &ids)?;
        Ok(tape.value(f).clone())
    }

    /// Prompt sequences `S'` (`[Y * l, d_text]`) with `ctx` in front, and
    /// their features `f'`, both recorded on `tape`.
    pub fn build_context_prompts<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        table: &TokenTable,
        ctx: &ContextPrompt,
        class_names: &[String],
    ) -> Result<Var> {
        let ids = self.class_ids(table, class_names)?;
        let c = tape.param(store, &ctx.name)?;
        self.encode_with_context(tape, store, table, c, &ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names() -> Vec<String> {
        ["outline circle", "filled square", "outline triangle", "filled diamond", "outline cross"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn setup() -> (TextEncoder, TokenTable, ParamStore<f64>) {
        let table = TokenTable::from_class_names(&names(), 32);
        let enc = TextEncoder::new(
            TextConfig {
                dim: 16,
                heads: 2,
                mlp_hidden: 32,
                out_dim: 8,
                depth: 2,
            },
            "text.",
        )
        .unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &table, false, &mut ChaCha8Rng::seed_from_u64(1));
        (enc, table, store)
    }

    #[test]
    fn vocabulary() {
        let table = TokenTable::from_class_names(&names(), 32);
        assert_eq!(table.vocab[0], PAD);
        assert_eq!(table.tokenize("Outline circle").unwrap().len(), 2);
        assert!(matches!(table.tokenize("hexagon"), Err(FateError::OutOfVocabulary(w)) if w == "hexagon"));
        assert!(table.tokenize(PAD).is_err());
        let json = serde_json::to_string(&table).unwrap();
        let back: TokenTable = serde_json::from_str::<TokenTable>(&json).unwrap().reindex();
        assert_eq!(back.tokenize("filled cross").unwrap(), table.tokenize("filled cross").unwrap());
    }

    #[test]
    fn class_features_are_unit_and_deterministic() {
        let (enc, table, store) = setup();
        let f = enc.encode_class_prompts(&store, &table, &names()).unwrap();
        assert_eq!(f.shape(), &[5, 8]);
        for i in 0..5 {
            let n: f64 = f.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(f, enc.encode_class_prompts(&store, &table, &names()).unwrap());
        let mut rev = names();
        rev.reverse();
        let g = enc.encode_class_prompts(&store, &table, &rev).unwrap();
        for i in 0..5 {
            assert_eq!(f.row(i), g.row(4 - i));
        }
    }

    #[test]
    fn template_context_reproduces_fixed_features() {
        let (enc, table, mut store) = setup();
        let ctx = ContextPrompt { name: "ctx".into(), len: 4 };
        enc.init_context(&mut store, &table, &ctx, ContextInit::Template, true, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let f = enc.encode_class_prompts(&store, &table, &names()).unwrap();
        let mut tape = Tape::new();
        let fp = enc.build_context_prompts(&mut tape, &store, &table, &ctx, &names()).unwrap();
        assert_eq!(tape.value(fp), &f);
    }

    #[test]
    fn gradient_reaches_only_the_context() {
        let (enc, table, mut store) = setup();
        let ctx = ContextPrompt { name: "ctx".into(), len: 16 };
        enc.init_context(&mut store, &table, &ctx, ContextInit::Random, true, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut tape = Tape::new();
        let fp = enc.build_context_prompts(&mut tape, &store, &table, &ctx, &names()).unwrap();
        let loss = tape.sum(fp);
        let grads = tape.backprop(loss).unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), ["ctx"]);
    }

    #[test]
    fn context_too_long() {
        let (enc, table, mut store) = setup();
        let ctx = ContextPrompt { name: "ctx".into(), len: 31 };
        enc.init_context(&mut store, &table, &ctx, ContextInit::Random, true, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut tape = Tape::new();
        assert!(enc.build_context_prompts(&mut tape, &store, &table, &ctx, &names()).is_err());
        assert!(enc
            .init_context(&mut store, &table, &ctx, ContextInit::Template, true, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }
}
