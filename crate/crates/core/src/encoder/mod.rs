//! BERT-style transformer encoder with a `[CLS]` classification head.
//!
//! Post-layer-norm sublayers (`norm(x + sublayer(x))`), learned positions,
//! a single segment id, GELU feed-forward blocks and one affine head on the
//! final `[CLS]` state.

mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Float, Graph, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::tokenizer::TokenSequence;

pub use train::{fine_tune, EpochRecord, TrainingConfig, TrainingHistory};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid transformer config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    VocabMismatch { id: u32, vocab: usize },
    #[error("sequence length {found} does not match model max_len {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("sequence {0} does not start with an unmasked [CLS]")]
    BadMask(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("cannot fine-tune on an empty training set")]
    EmptyTrainSet,
    #[error("label {0} outside the model's classes")]
    BadLabel(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// Desk-scale default: 4 layers, width 128, 4 heads.
    pub fn mini(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 4,
            hidden: 128,
            num_heads: 4,
            ff_size: 512,
            max_len: 128,
            vocab_size,
            num_classes,
            dropout: 0.1,
        }
    }

    pub fn base(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            num_heads: 12,
            ff_size: 3072,
            max_len: 512,
            vocab_size,
            num_classes,
            dropout: 0.1,
        }
    }

    pub fn large(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 24,
            hidden: 1024,
            num_heads: 16,
            ff_size: 4096,
            max_len: 512,
            vocab_size,
            num_classes,
            dropout: 0.1,
        }
    }

    pub fn preset(name: &str, vocab_size: usize, num_classes: usize) -> Option<Self> {
        match name {
            "mini" => Some(Self::mini(vocab_size, num_classes)),
            "base" => Some(Self::base(vocab_size, num_classes)),
            "large" => Some(Self::large(vocab_size, num_classes)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.num_heads == 0 || self.hidden == 0 || self.hidden % self.num_heads != 0 {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.num_heads
            ));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} below 2", self.max_len));
        }
        if self.ff_size == 0 || self.vocab_size == 0 || self.num_classes == 0 {
            return bad("feed-forward size, vocabulary and class count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }
}

/// One encoder block's parameters; `P` is a tensor for storage or a graph
/// handle during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<P> {
    pub query_w: P,
    pub query_b: P,
    pub key_w: P,
    pub key_b: P,
    pub value_w: P,
    pub value_b: P,
    pub out_w: P,
    pub out_b: P,
    pub attn_norm_gamma: P,
    pub attn_norm_beta: P,
    pub ff_in_w: P,
    pub ff_in_b: P,
    pub ff_out_w: P,
    pub ff_out_b: P,
    pub ff_norm_gamma: P,
    pub ff_norm_beta: P,
}

const LAYER_FIELDS: [&str; 16] = [
    "attention.query.weight",
    "attention.query.bias",
    "attention.key.weight",
    "attention.key.bias",
    "attention.value.weight",
    "attention.value.bias",
    "attention.output.weight",
    "attention.output.bias",
    "attention.norm.gamma",
    "attention.norm.beta",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "ffn.norm.gamma",
    "ffn.norm.beta",
];

impl<P> LayerParams<P> {
    fn fields(&self) -> [&P; 16] {
        [
            &self.query_w,
            &self.query_b,
            &self.key_w,
            &self.key_b,
            &self.value_w,
            &self.value_b,
            &self.out_w,
            &self.out_b,
            &self.attn_norm_gamma,
            &self.attn_norm_beta,
            &self.ff_in_w,
            &self.ff_in_b,
            &self.ff_out_w,
            &self.ff_out_b,
            &self.ff_norm_gamma,
            &self.ff_norm_beta,
        ]
    }

    fn fields_mut(&mut self) -> [&mut P; 16] {
        [
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.key_b,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.out_w,
            &mut self.out_b,
            &mut self.attn_norm_gamma,
            &mut self.attn_norm_beta,
            &mut self.ff_in_w,
            &mut self.ff_in_b,
            &mut self.ff_out_w,
            &mut self.ff_out_b,
            &mut self.ff_norm_gamma,
            &mut self.ff_norm_beta,
        ]
    }

    fn from_fields(f: [P; 16]) -> Self {
        let [query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b, attn_norm_gamma, attn_norm_beta, ff_in_w, ff_in_b, ff_out_w, ff_out_b, ff_norm_gamma, ff_norm_beta] =
            f;
        Self {
            query_w,
            query_b,
            key_w,
            key_b,
            value_w,
            value_b,
            out_w,
            out_b,
            attn_norm_gamma,
            attn_norm_beta,
            ff_in_w,
            ff_in_b,
            ff_out_w,
            ff_out_b,
            ff_norm_gamma,
            ff_norm_beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<P> {
    pub token_embedding: P,
    pub position_embedding: P,
    pub segment_embedding: P,
    pub embedding_norm_gamma: P,
    pub embedding_norm_beta: P,
    pub layers: Vec<LayerParams<P>>,
    pub head_w: P,
    pub head_b: P,
}

impl<P> EncoderParams<P> {
    /// Every parameter with its canonical name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embedding),
            ("embeddings.position".to_string(), &self.position_embedding),
            ("embeddings.segment".to_string(), &self.segment_embedding),
            ("embeddings.norm.gamma".to_string(), &self.embedding_norm_gamma),
            ("embeddings.norm.beta".to_string(), &self.embedding_norm_beta),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layer.{i}.{name}"), p));
            }
        }
        out.push(("head.weight".to_string(), &self.head_w));
        out.push(("head.bias".to_string(), &self.head_b));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.segment_embedding,
            &mut self.embedding_norm_gamma,
            &mut self.embedding_norm_beta,
        ];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Applies `f` to every parameter in [`EncoderParams::named`] order.
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&str, &P) -> std::result::Result<Q, E>) -> std::result::Result<EncoderParams<Q>, E> {
        let token_embedding = f("embeddings.token", &self.token_embedding)?;
        let position_embedding = f("embeddings.position", &self.position_embedding)?;
        let segment_embedding = f("embeddings.segment", &self.segment_embedding)?;
        let embedding_norm_gamma = f("embeddings.norm.gamma", &self.embedding_norm_gamma)?;
        let embedding_norm_beta = f("embeddings.norm.beta", &self.embedding_norm_beta)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut mapped = Vec::with_capacity(16);
            for (name, p) in LAYER_FIELDS.iter().zip(layer.fields()) {
                mapped.push(f(&format!("layer.{i}.{name}"), p)?);
            }
            let arr: [Q; 16] = mapped.try_into().ok().expect("16 layer fields");
            layers.push(LayerParams::from_fields(arr));
        }
        Ok(EncoderParams {
            token_embedding,
            position_embedding,
            segment_embedding,
            embedding_norm_gamma,
            embedding_norm_beta,
            layers,
            head_w: f("head.weight", &self.head_w)?,
            head_b: f("head.bias", &self.head_b)?,
        })
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> EncoderParams<Q> {
        self.try_map::<Q, std::convert::Infallible>(&mut |n, p| Ok(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }
}

/// Shape of every parameter implied by a config.
pub fn parameter_shapes(c: &TransformerConfig) -> EncoderParams<Vec<usize>> {
    let (h, f) = (c.hidden, c.ff_size);
    let layer = LayerParams {
        query_w: vec![h, h],
        query_b: vec![h],
        key_w: vec![h, h],
        key_b: vec![h],
        value_w: vec![h, h],
        value_b: vec![h],
        out_w: vec![h, h],
        out_b: vec![h],
        attn_norm_gamma: vec![h],
        attn_norm_beta: vec![h],
        ff_in_w: vec![h, f],
        ff_in_b: vec![f],
        ff_out_w: vec![f, h],
        ff_out_b: vec![h],
        ff_norm_gamma: vec![h],
        ff_norm_beta: vec![h],
    };
    EncoderParams {
        token_embedding: vec![c.vocab_size, h],
        position_embedding: vec![c.max_len, h],
        segment_embedding: vec![2, h],
        embedding_norm_gamma: vec![h],
        embedding_norm_beta: vec![h],
        layers: vec![layer; c.num_layers],
        head_w: vec![h, c.num_classes],
        head_b: vec![c.num_classes],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub config: TransformerConfig,
    pub params: EncoderParams<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded with `seed`.
    Train { seed: u64 },
}

/// `Normal(0, 0.02^2)` weights and embeddings, unit gammas, zero biases
/// and betas.
pub fn init_model<T: Float>(config: &TransformerConfig, seed: u64) -> Result<EncoderModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let params = parameter_shapes(config).map(&mut |name, shape| {
        if name.ends_with(".gamma") {
            Tensor::full(shape, T::one())
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            Tensor::zeros(shape)
        } else {
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect();
            Tensor::new(shape, data).unwrap()
        }
    });
    Ok(EncoderModel {
        config: *config,
        params,
    })
}

pub fn parameter_count(config: &TransformerConfig) -> usize {
    parameter_shapes(config)
        .named()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Token ids, key mask and trimmed length for a batch. Columns past the
/// longest unmasked prefix are dropped: they are padding everywhere.
pub(crate) struct PackedBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub key_mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

pub(crate) fn pack_batch(config: &TransformerConfig, batch: &[&TokenSequence]) -> Result<PackedBatch> {
    if batch.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let mut seq = 1;
    for (b, s) in batch.iter().enumerate() {
        if s.ids.len() != config.max_len || s.mask.len() != config.max_len {
            return Err(EncoderError::LengthMismatch {
                expected: config.max_len,
                found: s.ids.len(),
            });
        }
        if s.mask[0] != 1 {
            return Err(EncoderError::BadMask(b));
        }
        if let Some(&id) = s.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(EncoderError::VocabMismatch {
                id,
                vocab: config.vocab_size,
            });
        }
        let used = s.mask.iter().rposition(|&m| m == 1).unwrap() + 1;
        seq = seq.max(used);
    }
    let mut packed = PackedBatch {
        ids: Vec::with_capacity(batch.len() * seq),
        positions: Vec::with_capacity(batch.len() * seq),
        key_mask: Vec::with_capacity(batch.len() * seq),
        batch: batch.len(),
        seq,
    };
    for s in batch {
        for t in 0..seq {
            packed.ids.push(s.ids[t] as usize);
            packed.positions.push(t);
            packed.key_mask.push(s.mask[t] == 1);
        }
    }
    Ok(packed)
}

/// Output of [`forward_graph`]: the logits and `[CLS]` nodes plus the
/// attention nodes of every layer.
pub(crate) struct GraphOutput {
    pub logits: Var,
    pub cls: Var,
    pub attention: Vec<Var>,
}

fn affine<T: Float>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn maybe_dropout<T: Float>(g: &mut Graph<T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if p > 0.0 => g.dropout(x, p, r),
        _ => x,
    }
}

pub(crate) fn layer_forward<T: Float>(
    g: &mut Graph<T>,
    layer: &LayerParams<Var>,
    x: Var,
    packed: &PackedBatch,
    config: &TransformerConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let p = config.dropout;
    let q = affine(g, x, layer.query_w, layer.query_b);
    let k = affine(g, x, layer.key_w, layer.key_b);
    let v = affine(g, x, layer.value_w, layer.value_b);
    let att = g.attention(q, k, v, &packed.key_mask, packed.batch, packed.seq, config.num_heads)?;
    let proj = affine(g, att, layer.out_w, layer.out_b);
    let proj = maybe_dropout(g, proj, p, rng.as_deref_mut());
    let res = g.add(x, proj);
    let x = g.layer_norm(res, layer.attn_norm_gamma, layer.attn_norm_beta, LAYER_NORM_EPS);
    let hid = affine(g, x, layer.ff_in_w, layer.ff_in_b);
    let hid = g.gelu(hid);
    let ff = affine(g, hid, layer.ff_out_w, layer.ff_out_b);
    let ff = maybe_dropout(g, ff, p, rng.as_deref_mut());
    let res = g.add(x, ff);
    let out = g.layer_norm(res, layer.ff_norm_gamma, layer.ff_norm_beta, LAYER_NORM_EPS);
    Ok((out, att))
}

pub(crate) fn forward_graph<T: Float>(
    g: &mut Graph<T>,
    config: &TransformerConfig,
    p: &EncoderParams<Var>,
    packed: &PackedBatch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<GraphOutput> {
    let tok = g.gather_rows(p.token_embedding, &packed.ids);
    let pos = g.gather_rows(p.position_embedding, &packed.positions);
    let seg = g.gather_rows(p.segment_embedding, &vec![0; packed.ids.len()]);
    let x = g.add(tok, pos);
    let x = g.add(x, seg);
    let x = g.layer_norm(x, p.embedding_norm_gamma, p.embedding_norm_beta, LAYER_NORM_EPS);
    let mut x = maybe_dropout(g, x, config.dropout, rng.as_deref_mut());
    let mut attention = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (y, att) = layer_forward(g, layer, x, packed, config, rng.as_deref_mut())?;
        x = y;
        attention.push(att);
    }
    let cls_rows: Vec<usize> = (0..packed.batch).map(|b| b * packed.seq).collect();
    let cls = g.gather_rows(x, &cls_rows);
    let logits = affine(g, cls, p.head_w, p.head_b);
    Ok(GraphOutput {
        logits,
        cls,
        attention,
    })
}

/// Rebuilds the parameter structure from handles listed in the order of
/// [`EncoderParams::named`].
pub fn params_from_vars(config: &TransformerConfig, vars: &[Var]) -> EncoderParams<Var> {
    let mut it = vars.iter();
    parameter_shapes(config).map(&mut |_, _| *it.next().expect("one handle per parameter"))
}

/// Mean cross-entropy of the classification head over one batch, built
/// in eval mode (no dropout).
pub fn classification_loss_graph<T: Float>(
    g: &mut Graph<T>,
    config: &TransformerConfig,
    params: &EncoderParams<Var>,
    batch: &[&TokenSequence],
    labels: &[usize],
) -> Result<Var> {
    if labels.len() != batch.len() {
        return Err(EncoderError::LengthMismatch {
            expected: batch.len(),
            found: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= config.num_classes) {
        return Err(EncoderError::BadLabel(bad));
    }
    let packed = pack_batch(config, batch)?;
    let out = forward_graph(g, config, params, &packed, None)?;
    let targets: Vec<Option<usize>> = labels.iter().map(|&c| Some(c)).collect();
    Ok(g.cross_entropy(out.logits, &targets)?)
}

impl<T: Float> EncoderModel<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Loads every parameter into `g` as a trainable leaf.
    pub(crate) fn bind(&self, g: &mut Graph<T>, trainable: bool) -> EncoderParams<Var> {
        self.params.map(&mut |_, t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
    }

    /// Returns `(logits [B, K], cls [B, H])`.
    pub fn forward(&self, batch: &[&TokenSequence], mode: ForwardMode) -> Result<(Tensor<T>, Tensor<T>)> {
        let packed = pack_batch(&self.config, batch)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let mut rng = match mode {
            ForwardMode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            ForwardMode::Eval => None,
        };
        let out = forward_graph(&mut g, &self.config, &vars, &packed, rng.as_mut())?;
        Ok((g.value(out.logits).clone(), g.value(out.cls).clone()))
    }

    /// Eval-mode attention probabilities of every layer, each
    /// `[B, heads, T', T']` where `T'` is the trimmed batch length.
    pub fn attention_maps(&self, batch: &[&TokenSequence]) -> Result<Vec<Tensor<T>>> {
        let packed = pack_batch(&self.config, batch)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = forward_graph(&mut g, &self.config, &vars, &packed, None)?;
        let shape = [packed.batch, self.config.num_heads, packed.seq, packed.seq];
        out.attention
            .iter()
            .map(|&a| Ok(Tensor::new(&shape, g.attention_probs(a).expect("attention node").to_vec())?))
            .collect()
    }

    /// Eval-mode class predictions (argmax, earliest class on ties).
    pub fn predict(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let (logits, _) = self.forward(&refs, ForwardMode::Eval)?;
            for r in 0..chunk.len() {
                out.push(argmax(logits.row(r)));
            }
        }
        Ok(out)
    }

    /// Mean eval-mode cross-entropy over labelled sequences.
    pub fn loss(&self, seqs: &[TokenSequence], labels: &[usize], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        for (chunk, gold) in seqs.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let packed = pack_batch(&self.config, &refs)?;
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let out = forward_graph(&mut g, &self.config, &vars, &packed, None)?;
            let targets: Vec<Option<usize>> = gold.iter().map(|&c| Some(c)).collect();
            let l = g.cross_entropy(out.logits, &targets)?;
            total += g.value(l).data()[0].to_f64().unwrap() * chunk.len() as f64;
        }
        Ok(total / seqs.len().max(1) as f64)
    }

    pub fn cast<U: Float>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config,
            params: self.params.map(&mut |_, t| t.cast()),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::default();
        ck.push_meta("kind", "encoder");
        ck.push_meta("num_layers", c.num_layers);
        ck.push_meta("hidden", c.hidden);
        ck.push_meta("num_heads", c.num_heads);
        ck.push_meta("ff_size", c.ff_size);
        ck.push_meta("max_len", c.max_len);
        ck.push_meta("vocab_size", c.vocab_size);
        ck.push_meta("num_classes", c.num_classes);
        ck.push_meta("dropout", c.dropout);
        for (name, t) in self.params.named() {
            let data = t.data().iter().map(|v| v.to_f32().unwrap()).collect();
            ck.push_tensor(&name, t.shape(), data);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("encoder") {
            return Err(CheckpointError::Format("not an encoder checkpoint".into()).into());
        }
        let config = TransformerConfig {
            num_layers: ck.meta_parse("num_layers")?,
            hidden: ck.meta_parse("hidden")?,
            num_heads: ck.meta_parse("num_heads")?,
            ff_size: ck.meta_parse("ff_size")?,
            max_len: ck.meta_parse("max_len")?,
            vocab_size: ck.meta_parse("vocab_size")?,
            num_classes: ck.meta_parse("num_classes")?,
            dropout: ck.meta_parse("dropout")?,
        };
        config.validate()?;
        let params = parameter_shapes(&config).try_map(&mut |name, shape| -> Result<Tensor<T>> {
            let t = ck.tensor(name, shape)?;
            Ok(Tensor::new(shape, t.data.iter().map(|&v| T::lit(v as f64)).collect())?)
        })?;
        if ck.tensors.len() != parameter_shapes(&config).named().len() {
            return Err(CheckpointError::Format("unexpected extra tensors".into()).into());
        }
        Ok(Self { config, params })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One attention sublayer on its own: projections, masked multi-head
/// attention and the output projection, without residual or norm.
/// `x` is `[batch, seq, hidden]` and `mask` is `batch * seq` 0/1 flags.
/// Returns the projected output and the `[batch, heads, seq, seq]`
/// attention probabilities.
pub fn self_attention<T: Float>(
    layer: &LayerParams<Tensor<T>>,
    x: &Tensor<T>,
    mask: &[u8],
    num_heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = x.shape();
    if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
        return Err(EncoderError::Config(format!(
            "self_attention expects [batch, seq, hidden] input with batch*seq mask, got {shape:?} / {}",
            mask.len()
        )));
    }
    let (batch, seq, hidden) = (shape[0], shape[1], shape[2]);
    if num_heads == 0 || hidden % num_heads != 0 {
        return Err(EncoderError::Config(format!("hidden {hidden} not divisible by {num_heads} heads")));
    }
    let mut g = Graph::new();
    let l = layer.map(&mut |t: &Tensor<T>| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let q = affine(&mut g, xv, l.query_w, l.query_b);
    let k = affine(&mut g, xv, l.key_w, l.key_b);
    let v = affine(&mut g, xv, l.value_w, l.value_b);
    let key_mask: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
    let att = g.attention(q, k, v, &key_mask, batch, seq, num_heads)?;
    let out = affine(&mut g, att, l.out_w, l.out_b);
    let probs = Tensor::new(&[batch, num_heads, seq, seq], g.attention_probs(att).unwrap().to_vec())?;
    Ok((g.value(out).clone(), probs))
}

impl<P> LayerParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LayerParams<Q> {
        let mapped: Vec<Q> = self.fields().into_iter().map(|p| f(p)).collect();
        LayerParams::from_fields(mapped.try_into().ok().expect("16 layer fields"))
    }
}

/// Random layer in `[-scale, scale]`, used by tests and oracles.
pub fn random_layer<T: Float, R: Rng>(hidden: usize, ff: usize, scale: f64, rng: &mut R) -> LayerParams<Tensor<T>> {
    let c = TransformerConfig {
        num_layers: 1,
        hidden,
        num_heads: 1,
        ff_size: ff,
        max_len: 2,
        vocab_size: 1,
        num_classes: 1,
        dropout: 0.0,
    };
    let shapes = parameter_shapes(&c).layers.remove(0);
    shapes.map(&mut |s: &Vec<usize>| {
        let n = s.iter().product();
        Tensor::new(s, (0..n).map(|_| T::lit(rng.random_range(-scale..scale))).collect()).unwrap()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, PAD, SEP};

    #[test]
    fn map_visits_in_named_order() {
        let shapes = parameter_shapes(&tiny());
        let mut seen = Vec::new();
        shapes.map(&mut |name, _| seen.push(name.to_string()));
        let named: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(seen, named);
    }

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            num_layers: 2,
            hidden: 8,
            num_heads: 2,
            ff_size: 16,
            max_len: 6,
            vocab_size: 12,
            num_classes: 2,
            dropout: 0.1,
        }
    }

    fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
        let mut v = vec![CLS];
        v.extend_from_slice(ids);
        v.push(SEP);
        let mut mask = vec![1u8; v.len()];
        v.resize(max_len, PAD);
        mask.resize(max_len, 0);
        TokenSequence { ids: v, mask }
    }

    #[test]
    fn presets() {
        let b = TransformerConfig::base(100, 2);
        assert_eq!((b.num_layers, b.hidden, b.num_heads), (12, 768, 12));
        let l = TransformerConfig::large(100, 2);
        assert_eq!((l.num_layers, l.hidden, l.num_heads), (24, 1024, 16));
        let m = TransformerConfig::mini(100, 2);
        assert_eq!((m.num_layers, m.hidden, m.num_heads, m.ff_size, m.max_len), (4, 128, 4, 512, 128));
    }

    #[test]
    fn divisibility_enforced() {
        let mut c = TransformerConfig::mini(50, 2);
        c.hidden = 130;
        assert!(matches!(init_model::<f32>(&c, 1), Err(EncoderError::Config(_))));
    }

    #[test]
    fn parameter_count_closed_form() {
        let c = TransformerConfig::mini(300, 2);
        let (v, h, f, l, k, t) = (300, 128, 512, 4, 2, 128);
        let per_layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
        let expected = v * h + t * h + 2 * h + 2 * h + l * per_layer + h * k + k;
        assert_eq!(parameter_count(&c), expected);
        assert_eq!(init_model::<f32>(&c, 3).unwrap().parameter_count(), expected);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model::<f32>(&tiny(), 9).unwrap();
        let b = init_model::<f32>(&tiny(), 9).unwrap();
        assert_eq!(a, b);
        let c = init_model::<f32>(&tiny(), 10).unwrap();
        assert_ne!(a, c);
        assert!(a.params.layers[0].attn_norm_gamma.data().iter().all(|&v| v == 1.0));
        assert!(a.params.head_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = init_model::<f32>(&tiny(), 1).unwrap();
        let seqs = [seq(&[5, 6], 6), seq(&[7], 6), seq(&[8, 9, 10, 11], 6)];
        let refs: Vec<_> = seqs.iter().collect();
        let (logits, cls) = m.forward(&refs, ForwardMode::Eval).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);
        assert_eq!(cls.shape(), &[3, 8]);
        let (again, _) = m.forward(&refs, ForwardMode::Eval).unwrap();
        assert_eq!(logits, again);
        let (noisy, _) = m.forward(&refs, ForwardMode::Train { seed: 4 }).unwrap();
        assert_ne!(logits, noisy);
    }

    #[test]
    fn batch_permutation_and_padding_invariance() {
        let m = init_model::<f64>(&tiny(), 2).unwrap();
        let (a, b) = (seq(&[5, 6], 6), seq(&[7], 6));
        let (l1, _) = m.forward(&[&a, &b], ForwardMode::Eval).unwrap();
        let (l2, _) = m.forward(&[&b, &a], ForwardMode::Eval).unwrap();
        assert!((l1.row(0)[0] - l2.row(1)[0]).abs() < 1e-12);
        assert!((l1.row(1)[1] - l2.row(0)[1]).abs() < 1e-12);
        // garbage in padded slots does not matter
        let mut junk = b.clone();
        junk.ids[4] = 9;
        junk.ids[5] = 11;
        let (l3, _) = m.forward(&[&a, &junk], ForwardMode::Eval).unwrap();
        assert_eq!(l1.row(1), l3.row(1));
        let (alone, _) = m.forward(&[&b], ForwardMode::Eval).unwrap();
        assert!((alone.row(0)[0] - l1.row(1)[0]).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_mismatches() {
        let m = init_model::<f32>(&tiny(), 1).unwrap();
        let long = seq(&[5], 8);
        assert!(matches!(m.forward(&[&long], ForwardMode::Eval), Err(EncoderError::LengthMismatch { .. })));
        let oov = seq(&[50], 6);
        assert!(matches!(m.forward(&[&oov], ForwardMode::Eval), Err(EncoderError::VocabMismatch { id: 50, .. })));
        assert!(matches!(m.forward(&[], ForwardMode::Eval), Err(EncoderError::EmptyBatch)));
    }

    #[test]
    fn single_token_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = random_layer::<f64, _>(4, 8, 1.0, &mut rng);
        let x = Tensor::new(&[1, 1, 4], vec![0.5, -0.1, 0.3, 2.0]).unwrap();
        let (_, probs) = self_attention(&layer, &x, &[1], 2).unwrap();
        assert_eq!(probs.data(), &[1.0, 1.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model::<f32>(&tiny(), 5).unwrap();
        let ck = m.to_checkpoint();
        let back = EncoderModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut bad = ck.clone();
        bad.meta.retain(|(k, _)| k != "hidden");
        bad.push_meta("hidden", 16);
        bad.meta.retain(|(k, _)| k != "num_heads");
        bad.push_meta("num_heads", 2);
        assert!(matches!(
            EncoderModel::<f32>::from_checkpoint(&bad),
            Err(EncoderError::Checkpoint(CheckpointError::ShapeDisagreement { .. }))
        ));
    }
}
