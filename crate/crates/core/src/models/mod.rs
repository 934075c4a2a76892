//! Personalized explanation generators with a disentangled attribute token.
//!
//! Two architectures share the same embedding layout and losses:
//!
//! * [`Architecture::Transformer`]: special `attr`, `user`, `item` tokens
//!   precede the words; the special tokens see each other and words see the
//!   specials plus their own past. The user-token output drives the rating
//!   head and the item-token output drives the context head.
//! * [`Architecture::Recurrent`]: a gated recurrent cell whose initial state
//!   is `tanh(W [r_a, r_u, r_i] + b)`; the same concatenation feeds the
//!   rating perceptron and the initial state feeds the context head.
//!
//! Without the attribute token (`use_attribute_token = false`) the models
//! fall back to holistic user embeddings.

mod checkpoint;
mod decode;
mod losses;
mod recurrent;
mod train;
mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{sample, sample_with_log_prob, top_k_pick, Sampled};
pub use losses::{batch_losses, nll_from_log_probs, rating_mse, BatchLoss, LossBreakdown, LossWeights};
pub use train::{evaluate_losses, pretrain, EpochRecord, PretrainOptions, PretrainReport};
pub(crate) use losses::sum_scalars;
pub(crate) use train::fit;
pub use transformer::{prefix_mask, AttentionMask};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{AttributeSpace, IdIndex, Record, Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::numerics::{uniform, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Transformer,
    Recurrent,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Transformer => "transformer",
            Architecture::Recurrent => "recurrent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "transformer" => Ok(Architecture::Transformer),
            "recurrent" | "rnn" => Ok(Architecture::Recurrent),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub use_attribute_token: bool,
    /// Token/user/item embedding width (the transformer model width).
    pub emb_dim: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Recurrent hidden state width.
    pub hidden_dim: usize,
    /// Recurrent attribute embedding width. The transformer uses `emb_dim`.
    pub attr_dim: usize,
    pub dropout: f64,
    /// Maximum number of explanation words.
    pub max_len: usize,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn full_transformer() -> Self {
        Self {
            architecture: Architecture::Transformer,
            use_attribute_token: true,
            emb_dim: 512,
            ffn_dim: 2048,
            layers: 2,
            heads: 2,
            hidden_dim: 512,
            attr_dim: 512,
            dropout: 0.2,
            max_len: 128,
            init_scale: 0.1,
        }
    }

    pub fn full_recurrent() -> Self {
        Self {
            architecture: Architecture::Recurrent,
            use_attribute_token: true,
            emb_dim: 300,
            ffn_dim: 400,
            layers: 1,
            heads: 1,
            hidden_dim: 400,
            attr_dim: 100,
            dropout: 0.1,
            max_len: 128,
            init_scale: 0.1,
        }
    }

    pub fn desk_transformer() -> Self {
        Self {
            emb_dim: 64,
            ffn_dim: 128,
            hidden_dim: 64,
            attr_dim: 64,
            ..Self::full_transformer()
        }
    }

    pub fn desk_recurrent() -> Self {
        Self {
            emb_dim: 64,
            ffn_dim: 64,
            hidden_dim: 64,
            attr_dim: 16,
            ..Self::full_recurrent()
        }
    }

    pub fn desk(architecture: Architecture) -> Self {
        match architecture {
            Architecture::Transformer => Self::desk_transformer(),
            Architecture::Recurrent => Self::desk_recurrent(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("emb_dim", self.emb_dim),
            ("ffn_dim", self.ffn_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden_dim", self.hidden_dim),
            ("attr_dim", self.attr_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.architecture == Architecture::Transformer && !self.emb_dim.is_multiple_of(self.heads) {
            return Err(Error::Config("emb_dim must be divisible by heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Width of the user preference embedding `r_u`.
    pub fn user_dim(&self) -> usize {
        self.emb_dim
    }

    fn canonical(&self) -> String {
        format!(
            "arch={};attr_token={};emb={};ffn={};layers={};heads={};hidden={};attr_dim={};dropout={};max_len={};init={}",
            self.architecture.tag(),
            self.use_attribute_token,
            self.emb_dim,
            self.ffn_dim,
            self.layers,
            self.heads,
            self.hidden_dim,
            self.attr_dim,
            self.dropout,
            self.max_len,
            self.init_scale
        )
    }
}

/// User, item and attribute-value indices of one generation request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Context {
    pub user: usize,
    pub item: usize,
    pub attribute: usize,
}

impl Context {
    pub fn with_attribute(self, attribute: usize) -> Self {
        Self { attribute, ..self }
    }
}

/// One encoded record.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub context: Context,
    pub rating: f64,
    /// Explanation word ids, no markers.
    pub words: Vec<usize>,
}

impl Example {
    pub fn encode(record: &Record, vocab: &Vocabulary, ids: &IdIndex, space: &AttributeSpace, max_len: usize) -> Result<Self> {
        let attribute = space
            .index_of(&record.attribute)
            .ok_or_else(|| Error::Domain(format!("attribute {:?}", record.attribute)))?;
        let mut words = vocab.encode(&record.explanation);
        words.truncate(max_len);
        Ok(Self {
            context: Context {
                user: ids.user(&record.user)?,
                item: ids.item(&record.item)?,
                attribute,
            },
            rating: record.rating,
            words,
        })
    }

    /// Decoder input: `<bos>` followed by the words.
    pub fn input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.words.len() + 1);
        v.push(BOS_ID);
        v.extend_from_slice(&self.words);
        v
    }

    /// Next-token targets: the words followed by `<eos>`.
    pub fn targets(&self) -> Vec<usize> {
        let mut v = self.words.clone();
        v.push(EOS_ID);
        v
    }
}

/// Per-example forward results.
pub struct Outputs<'t> {
    /// `T × V` next-token log-probabilities for the word positions.
    pub log_probs: Var<'t>,
    /// `T × V` raw logits.
    pub logits: Var<'t>,
    /// `1 × V` order-free context distribution (log-probabilities).
    pub context_log_probs: Var<'t>,
    /// `1 × 1` predicted rating.
    pub rating: Var<'t>,
    /// `1 × user_dim` input user preference embedding `r_u`.
    pub user_embedding: Var<'t>,
}

#[derive(Clone, Debug)]
pub(crate) struct Embeddings {
    pub user: ParamId,
    pub item: ParamId,
    pub attr: Option<ParamId>,
    pub word: ParamId,
}

#[derive(Clone, Debug)]
enum Body {
    Transformer(transformer::TransformerWeights),
    Recurrent(recurrent::RecurrentWeights),
}

/// Generator parameters θ and the metadata needed to run them.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) emb: Embeddings,
    body: Body,
    pub vocab_size: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_attributes: usize,
    /// Inference-only: disable attention to the attribute token.
    pub(crate) mask_attribute: bool,
}

impl GeneratorModel {
    pub fn build(
        config: &ModelConfig,
        vocab: &Vocabulary,
        space: &AttributeSpace,
        n_users: usize,
        n_items: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build_sized(config, vocab.len(), space.len(), n_users, n_items, seed)
    }

    pub fn build_sized(
        config: &ModelConfig,
        vocab_size: usize,
        n_attributes: usize,
        n_users: usize,
        n_items: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || n_users == 0 || n_items == 0 || n_attributes == 0 {
            return Err(Error::Config("vocabulary, users, items and attributes must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.init_scale;
        let mut params = ParamStore::new();
        let d = config.emb_dim;
        let attr_dim = match config.architecture {
            Architecture::Transformer => d,
            Architecture::Recurrent => config.attr_dim,
        };
        let emb = Embeddings {
            user: params.insert("emb.user", uniform(n_users, d, s, &mut rng)),
            item: params.insert("emb.item", uniform(n_items, d, s, &mut rng)),
            attr: config
                .use_attribute_token
                .then(|| params.insert("emb.attr", uniform(n_attributes, attr_dim, s, &mut rng))),
            word: params.insert("emb.word", uniform(vocab_size, d, s, &mut rng)),
        };
        let body = match config.architecture {
            Architecture::Transformer => Body::Transformer(transformer::TransformerWeights::build(
                config, vocab_size, &mut params, &mut rng,
            )),
            Architecture::Recurrent => Body::Recurrent(recurrent::RecurrentWeights::build(
                config, vocab_size, &mut params, &mut rng,
            )),
        };
        Ok(Self {
            config: config.clone(),
            params,
            emb,
            body,
            vocab_size,
            n_users,
            n_items,
            n_attributes,
            mask_attribute: false,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn has_attribute_token(&self) -> bool {
        self.emb.attr.is_some()
    }

    pub fn attribute_table(&self) -> Option<ParamId> {
        self.emb.attr
    }

    pub fn user_table(&self) -> ParamId {
        self.emb.user
    }

    pub fn embedding_tables(&self) -> Vec<ParamId> {
        let mut v = vec![self.emb.user, self.emb.item];
        v.extend(self.emb.attr);
        v
    }

    pub fn check_context(&self, ctx: Context) -> Result<()> {
        if ctx.user >= self.n_users || ctx.item >= self.n_items {
            return Err(Error::Index(format!("user {} / item {} out of range", ctx.user, ctx.item)));
        }
        if ctx.attribute >= self.n_attributes {
            return Err(Error::Domain(format!(
                "attribute index {} not in a space of {}",
                ctx.attribute, self.n_attributes
            )));
        }
        Ok(())
    }

    /// Teacher-forced forward pass over `input` (`<bos>` then words).
    /// `dropout` supplies the noise stream in training mode.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ctx: Context,
        input: &[usize],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Outputs<'t>> {
        self.check_context(ctx)?;
        if input.is_empty() || input.len() > self.config.max_len + 1 {
            return Err(Error::Contract(format!(
                "input length {} outside 1..={}",
                input.len(),
                self.config.max_len + 1
            )));
        }
        if let Some(&bad) = input.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Index(format!("token id {bad} >= vocabulary {}", self.vocab_size)));
        }
        match &self.body {
            Body::Transformer(w) => transformer::forward(self, w, tape, ctx, input, dropout),
            Body::Recurrent(w) => recurrent::forward(self, w, tape, ctx, input, dropout),
        }
    }

    /// The same forward with only the attribute-row lookup changed to `a'`.
    pub fn counterfactual_forward<'t>(
        &self,
        tape: &'t Tape,
        ctx: Context,
        counterfactual: usize,
        input: &[usize],
    ) -> Result<Outputs<'t>> {
        if counterfactual >= self.n_attributes {
            return Err(Error::Domain(format!(
                "counterfactual attribute {counterfactual} not in a space of {}",
                self.n_attributes
            )));
        }
        self.forward(tape, ctx.with_attribute(counterfactual), input, None)
    }

    pub(crate) fn decoder(&self, ctx: Context) -> Result<decode::Decoder<'_>> {
        self.check_context(ctx)?;
        Ok(match &self.body {
            Body::Transformer(w) => decode::Decoder::Transformer(transformer::Incremental::new(self, w, ctx)?),
            Body::Recurrent(w) => decode::Decoder::Recurrent(recurrent::Incremental::new(self, w, ctx)?),
        })
    }

    /// SHA-256 of the architecture settings and table sizes.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.canonical().as_bytes());
        h.update(
            format!(
                ";vocab={};users={};items={};attrs={}",
                self.vocab_size, self.n_users, self.n_items, self.n_attributes
            )
            .as_bytes(),
        );
        crate::corpus::hex_digest(&h.finalize())
    }

    /// Freezes or unfreezes the user, item and attribute tables.
    pub fn set_embeddings_frozen(&mut self, frozen: bool) {
        for id in self.embedding_tables() {
            self.params.set_frozen(id, frozen);
        }
    }

    pub fn embeddings_frozen(&self) -> bool {
        self.embedding_tables().iter().all(|&id| self.params.is_frozen(id))
    }

    pub(crate) fn attribute_masked(&self) -> bool {
        self.mask_attribute
    }

    /// Attention mask over specials plus `n_words` inputs; `None` for the recurrent body.
    pub fn attention_mask(&self, n_words: usize) -> Option<AttentionMask> {
        match self.config.architecture {
            Architecture::Transformer => Some(transformer::mask_for(self, n_words)),
            Architecture::Recurrent => None,
        }
    }
}

/// Embedding rows for the special tokens of `ctx`: `(attr, user, item)`.
pub(crate) fn special_rows<'t>(
    model: &GeneratorModel,
    tape: &'t Tape,
    ctx: Context,
) -> Result<(Option<Var<'t>>, Var<'t>, Var<'t>)> {
    let user = tape.gather(tape.param(&model.params, model.emb.user), &[ctx.user])?;
    let item = tape.gather(tape.param(&model.params, model.emb.item), &[ctx.item])?;
    let attr = match model.emb.attr {
        Some(id) => Some(tape.gather(tape.param(&model.params, id), &[ctx.attribute])?),
        None => None,
    };
    Ok((attr, user, item))
}

#[cfg(test)]
mod tests;
