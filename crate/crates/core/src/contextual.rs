//! Contextual subword embeddings from a bidirectional LSTM language model.
//!
//! A forward LSTM predicts token `t+1` from its state at `t`, a backward
//! LSTM predicts token `t-1`. After training, the concatenated states are
//! frozen and mean-pooled into one sentence vector for the linear SVM.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, AutodiffError, Float, Graph, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::tokenizer::{TokenSequence, SEP};

#[derive(Debug, Error)]
pub enum ContextualError {
    #[error("invalid bi-LSTM config: {0}")]
    Config(String),
    #[error("language-model corpus has no sequence with two or more tokens")]
    EmptyCorpus,
    #[error("token id {id} outside vocabulary of {vocab}")]
    VocabMismatch { id: u32, vocab: usize },
    #[error("mean pooling over an all-masked sequence")]
    AllMasked,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ContextualError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiLstmConfig {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl BiLstmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            embedding_size: 64,
            hidden_size: 128,
            vocab_size,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_size == 0 || self.hidden_size == 0 || self.vocab_size == 0 {
            return Err(ContextualError::Config("sizes must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ContextualError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ContextualError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Gate weights map the concatenation `[x; h]` (width `E + Hc`) to `Hc`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<P> {
    pub input_w: P,
    pub input_b: P,
    pub forget_w: P,
    pub forget_b: P,
    pub cell_w: P,
    pub cell_b: P,
    pub output_w: P,
    pub output_b: P,
}

const CELL_FIELDS: [&str; 8] = [
    "input.weight",
    "input.bias",
    "forget.weight",
    "forget.bias",
    "cell.weight",
    "cell.bias",
    "output.weight",
    "output.bias",
];

impl<P> LstmCell<P> {
    fn fields(&self) -> [&P; 8] {
        [
            &self.input_w,
            &self.input_b,
            &self.forget_w,
            &self.forget_b,
            &self.cell_w,
            &self.cell_b,
            &self.output_w,
            &self.output_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut P; 8] {
        [
            &mut self.input_w,
            &mut self.input_b,
            &mut self.forget_w,
            &mut self.forget_b,
            &mut self.cell_w,
            &mut self.cell_b,
            &mut self.output_w,
            &mut self.output_b,
        ]
    }

    fn from_fields(f: [P; 8]) -> Self {
        let [input_w, input_b, forget_w, forget_b, cell_w, cell_b, output_w, output_b] = f;
        Self {
            input_w,
            input_b,
            forget_w,
            forget_b,
            cell_w,
            cell_b,
            output_w,
            output_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams<P> {
    pub embedding: P,
    pub forward: LstmCell<P>,
    pub backward: LstmCell<P>,
    pub forward_lm_w: P,
    pub forward_lm_b: P,
    pub backward_lm_w: P,
    pub backward_lm_b: P,
}

impl<P> BiLstmParams<P> {
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (dir, cell) in [("forward", &self.forward), ("backward", &self.backward)] {
            for (name, p) in CELL_FIELDS.iter().zip(cell.fields()) {
                out.push((format!("{dir}.{name}"), p));
            }
        }
        out.push(("forward_lm.weight".into(), &self.forward_lm_w));
        out.push(("forward_lm.bias".into(), &self.forward_lm_b));
        out.push(("backward_lm.weight".into(), &self.backward_lm_w));
        out.push(("backward_lm.bias".into(), &self.backward_lm_b));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.forward.fields_mut());
        out.extend(self.backward.fields_mut());
        out.extend([
            &mut self.forward_lm_w,
            &mut self.forward_lm_b,
            &mut self.backward_lm_w,
            &mut self.backward_lm_b,
        ]);
        out
    }

    /// Applies `f` to every parameter in [`BiLstmParams::named`] order.
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&str, &P) -> std::result::Result<Q, E>) -> std::result::Result<BiLstmParams<Q>, E> {
        fn cell<P, Q, E>(
            f: &mut impl FnMut(&str, &P) -> std::result::Result<Q, E>,
            dir: &str,
            c: &LstmCell<P>,
        ) -> std::result::Result<LstmCell<Q>, E> {
            let mut mapped = Vec::with_capacity(8);
            for (name, p) in CELL_FIELDS.iter().zip(c.fields()) {
                mapped.push(f(&format!("{dir}.{name}"), p)?);
            }
            Ok(LstmCell::from_fields(mapped.try_into().ok().expect("8 cell fields")))
        }
        let embedding = f("embedding", &self.embedding)?;
        let forward = cell(f, "forward", &self.forward)?;
        let backward = cell(f, "backward", &self.backward)?;
        Ok(BiLstmParams {
            embedding,
            forward,
            backward,
            forward_lm_w: f("forward_lm.weight", &self.forward_lm_w)?,
            forward_lm_b: f("forward_lm.bias", &self.forward_lm_b)?,
            backward_lm_w: f("backward_lm.weight", &self.backward_lm_w)?,
            backward_lm_b: f("backward_lm.bias", &self.backward_lm_b)?,
        })
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> BiLstmParams<Q> {
        self.try_map::<Q, std::convert::Infallible>(&mut |n, p| Ok(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }
}

pub fn parameter_shapes(c: &BiLstmConfig) -> BiLstmParams<Vec<usize>> {
    let (e, h, v) = (c.embedding_size, c.hidden_size, c.vocab_size);
    let cell = LstmCell {
        input_w: vec![e + h, h],
        input_b: vec![h],
        forget_w: vec![e + h, h],
        forget_b: vec![h],
        cell_w: vec![e + h, h],
        cell_b: vec![h],
        output_w: vec![e + h, h],
        output_b: vec![h],
    };
    BiLstmParams {
        embedding: vec![v, e],
        forward: cell.clone(),
        backward: cell,
        forward_lm_w: vec![h, v],
        forward_lm_b: vec![v],
        backward_lm_w: vec![h, v],
        backward_lm_b: vec![v],
    }
}

/// Rebuilds the parameter structure from handles listed in canonical order.
pub fn params_from_vars(c: &BiLstmConfig, vars: &[Var]) -> BiLstmParams<Var> {
    let mut it = vars.iter();
    parameter_shapes(c).map(&mut |_, _| *it.next().expect("one handle per parameter"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmWeights<T> {
    pub config: BiLstmConfig,
    pub params: BiLstmParams<Tensor<T>>,
}

/// Uniform `[-1/sqrt(Hc), 1/sqrt(Hc)]` weights, zero biases except the
/// forget gate at 1.0.
pub fn init_bilstm<T: Float>(config: &BiLstmConfig, seed: u64) -> Result<BiLstmWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 1.0 / (config.hidden_size as f64).sqrt();
    let params = parameter_shapes(config).map(&mut |name, shape| {
        if name.ends_with("forget.bias") {
            Tensor::full(shape, T::one())
        } else if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| T::lit(rng.random_range(-k..k))).collect()).unwrap()
        }
    });
    Ok(BiLstmWeights {
        config: *config,
        params,
    })
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// One LSTM recurrence on plain vectors.
pub fn lstm_step<T: Float>(cell: &LstmCell<Tensor<T>>, h: &[T], c: &[T], x: &[T]) -> (Vec<T>, Vec<T>) {
    let hc = h.len();
    let z: Vec<T> = x.iter().chain(h).copied().collect();
    let gate = |w: &Tensor<T>, b: &Tensor<T>| -> Vec<T> {
        let (wd, bd) = (w.data(), b.data());
        (0..hc)
            .map(|j| {
                let mut acc = bd[j];
                for (i, &zi) in z.iter().enumerate() {
                    acc += zi * wd[i * hc + j];
                }
                acc
            })
            .collect()
    };
    let i = gate(&cell.input_w, &cell.input_b);
    let f = gate(&cell.forget_w, &cell.forget_b);
    let g = gate(&cell.cell_w, &cell.cell_b);
    let o = gate(&cell.output_w, &cell.output_b);
    let mut h2 = Vec::with_capacity(hc);
    let mut c2 = Vec::with_capacity(hc);
    for j in 0..hc {
        let cj = sigmoid(f[j]) * c[j] + sigmoid(i[j]) * g[j].tanh();
        h2.push(sigmoid(o[j]) * cj.tanh());
        c2.push(cj);
    }
    (h2, c2)
}

fn step_graph<T: Float>(g: &mut Graph<T>, cell: &LstmCell<Var>, x: Var, h: Var, c: Var) -> (Var, Var) {
    let z = g.concat_cols(&[x, h]);
    let mut gate = |w: Var, b: Var| {
        let y = g.matmul(z, w);
        g.add_row(y, b)
    };
    let (i, f, cand, o) = (
        gate(cell.input_w, cell.input_b),
        gate(cell.forget_w, cell.forget_b),
        gate(cell.cell_w, cell.cell_b),
        gate(cell.output_w, cell.output_b),
    );
    let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
    let cand = g.tanh(cand);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c2 = g.add(keep, write);
    let squashed = g.tanh(c2);
    let h2 = g.mul(o, squashed);
    (h2, c2)
}

/// Mean next-token cross-entropy of one direction over left-aligned
/// sequences (each at least two tokens long).
fn direction_loss<T: Float>(
    g: &mut Graph<T>,
    embedding: Var,
    cell: &LstmCell<Var>,
    lm_w: Var,
    lm_b: Var,
    seqs: &[Vec<u32>],
    hidden: usize,
) -> Result<Var> {
    let batch = seqs.len();
    let steps = seqs.iter().map(Vec::len).max().unwrap_or(0) - 1;
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut states = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps * batch);
    for t in 0..steps {
        let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).map_or(0, |&id| id as usize)).collect();
        let x = g.gather_rows(embedding, &ids);
        (h, c) = step_graph(g, cell, x, h, c);
        states.push(h);
        targets.extend(seqs.iter().map(|s| s.get(t + 1).map(|&id| id as usize)));
    }
    let stacked = g.concat_rows(&states);
    let logits = g.matmul(stacked, lm_w);
    let logits = g.add_row(logits, lm_b);
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Bidirectional LM loss: mean of the forward and backward cross-entropies.
/// Sequences are unpadded id lists of length at least two.
pub fn lm_loss_graph<T: Float>(
    g: &mut Graph<T>,
    config: &BiLstmConfig,
    p: &BiLstmParams<Var>,
    seqs: &[Vec<u32>],
) -> Result<Var> {
    if seqs.is_empty() || seqs.iter().any(|s| s.len() < 2) {
        return Err(ContextualError::EmptyCorpus);
    }
    if let Some(&id) = seqs.iter().flatten().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ContextualError::VocabMismatch {
            id,
            vocab: config.vocab_size,
        });
    }
    let reversed: Vec<Vec<u32>> = seqs.iter().map(|s| s.iter().rev().copied().collect()).collect();
    let hc = config.hidden_size;
    let fwd = direction_loss(g, p.embedding, &p.forward, p.forward_lm_w, p.forward_lm_b, seqs, hc)?;
    let bwd = direction_loss(g, p.embedding, &p.backward, p.backward_lm_w, p.backward_lm_b, &reversed, hc)?;
    let both = g.add(fwd, bwd);
    Ok(g.scale(both, T::lit(0.5)))
}

fn lm_units(seq: &TokenSequence) -> Vec<u32> {
    seq.ids.iter().zip(&seq.mask).filter(|&(_, &m)| m == 1).map(|(&id, _)| id).collect()
}

impl<T: Float> BiLstmWeights<T> {
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BiLstmParams<Var> {
        self.params.map(&mut |_, t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
    }

    /// Mean bidirectional LM loss over every sequence with two or more
    /// unmasked tokens.
    pub fn lm_loss(&self, corpus: &[TokenSequence]) -> Result<f64> {
        let seqs: Vec<Vec<u32>> = corpus.iter().map(lm_units).filter(|s| s.len() >= 2).collect();
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let loss = lm_loss_graph(&mut g, &self.config, &p, &seqs)?;
        Ok(g.value(loss).data()[0].to_f64().unwrap())
    }

    pub fn perplexity(&self, corpus: &[TokenSequence]) -> Result<f64> {
        Ok(self.lm_loss(corpus)?.exp())
    }

    fn run(&self, cell: &LstmCell<Tensor<T>>, ids: impl Iterator<Item = u32>) -> Vec<Vec<T>> {
        let hc = self.config.hidden_size;
        let (mut h, mut c) = (vec![T::zero(); hc], vec![T::zero(); hc]);
        ids.map(|id| {
            (h, c) = lstm_step(cell, &h, &c, self.params.embedding.row(id as usize));
            h.clone()
        })
        .collect()
    }

    /// Forward-LM next-token distribution after each unmasked position.
    pub fn next_token_probs(&self, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        let ids = self.checked_units(tokens)?;
        let states = self.run(&self.params.forward, ids.iter().copied());
        let (w, b) = (&self.params.forward_lm_w, &self.params.forward_lm_b);
        let v = self.config.vocab_size;
        Ok(states
            .iter()
            .map(|h| {
                let logits: Vec<f64> = (0..v)
                    .map(|j| {
                        let mut acc = b.data()[j].to_f64().unwrap();
                        for (i, &hi) in h.iter().enumerate() {
                            acc += hi.to_f64().unwrap() * w.data()[i * v + j].to_f64().unwrap();
                        }
                        acc
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                logits.iter().map(|l| (l - m).exp() / z).collect()
            })
            .collect())
    }

    fn checked_units(&self, tokens: &TokenSequence) -> Result<Vec<u32>> {
        let ids = lm_units(tokens);
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ContextualError::VocabMismatch {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(ids)
    }

    /// `[n, 2 Hc]` states for the `n` unmasked positions: forward state
    /// then backward state.
    pub fn embed_sequence(&self, tokens: &TokenSequence) -> Result<Tensor<T>> {
        let ids = self.checked_units(tokens)?;
        let fwd = self.run(&self.params.forward, ids.iter().copied());
        let mut bwd = self.run(&self.params.backward, ids.iter().rev().copied());
        bwd.reverse();
        let n = ids.len();
        let mut data = Vec::with_capacity(n * 2 * self.config.hidden_size);
        for (f, b) in fwd.iter().zip(&bwd) {
            data.extend_from_slice(f);
            data.extend_from_slice(b);
        }
        Ok(Tensor::new(&[n, 2 * self.config.hidden_size], data)?)
    }

    /// Mean of the contextual vectors of content tokens (specials and
    /// padding excluded; falls back to every unmasked position when the
    /// sequence has no content token).
    pub fn sentence_vector(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let vectors = self.embed_sequence(tokens)?;
        let ids = lm_units(tokens);
        let mut mask: Vec<bool> = ids.iter().map(|&id| id > SEP).collect();
        if !mask.contains(&true) {
            mask.fill(true);
        }
        Ok(mean_pool(&vectors, &mask)?.iter().map(|v| v.to_f64().unwrap()).collect())
    }

    pub fn cast<U: Float>(&self) -> BiLstmWeights<U> {
        BiLstmWeights {
            config: self.config,
            params: self.params.map(&mut |_, t| t.cast()),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::default();
        ck.push_meta("kind", "bilstm");
        ck.push_meta("embedding_size", c.embedding_size);
        ck.push_meta("hidden_size", c.hidden_size);
        ck.push_meta("vocab_size", c.vocab_size);
        ck.push_meta("epochs", c.epochs);
        ck.push_meta("learning_rate", c.learning_rate);
        ck.push_meta("batch_size", c.batch_size);
        for (name, t) in self.params.named() {
            ck.push_tensor(&name, t.shape(), t.data().iter().map(|v| v.to_f32().unwrap()).collect());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("bilstm") {
            return Err(CheckpointError::Format("not a bi-LSTM checkpoint".into()).into());
        }
        let config = BiLstmConfig {
            embedding_size: ck.meta_parse("embedding_size")?,
            hidden_size: ck.meta_parse("hidden_size")?,
            vocab_size: ck.meta_parse("vocab_size")?,
            epochs: ck.meta_parse("epochs")?,
            learning_rate: ck.meta_parse("learning_rate")?,
            batch_size: ck.meta_parse("batch_size")?,
        };
        config.validate()?;
        let params = parameter_shapes(&config).try_map(&mut |name, shape| -> Result<Tensor<T>> {
            let t = ck.tensor(name, shape)?;
            Ok(Tensor::new(shape, t.data.iter().map(|&v| T::lit(v as f64)).collect())?)
        })?;
        Ok(Self { config, params })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Arithmetic mean of the rows whose mask flag is set.
pub fn mean_pool<T: Float>(vectors: &Tensor<T>, mask: &[bool]) -> Result<Vec<T>> {
    let (rows, cols) = vectors.rows_cols();
    if mask.len() != rows {
        return Err(AutodiffError::ShapeMismatch(format!("{} mask flags for {rows} rows", mask.len())).into());
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(ContextualError::AllMasked);
    }
    let mut out = vec![T::zero(); cols];
    for r in (0..rows).filter(|&r| mask[r]) {
        for (o, &v) in out.iter_mut().zip(vectors.row(r)) {
            *o += v;
        }
    }
    let nf = T::lit(n as f64);
    Ok(out.into_iter().map(|v| v / nf).collect())
}

/// Trains the bidirectional LM with Adam; returns the weights and the mean
/// training loss of each epoch.
pub fn train_bilm_with_history(
    corpus: &[TokenSequence],
    config: &BiLstmConfig,
    seed: u64,
) -> Result<(BiLstmWeights<f32>, Vec<f64>)> {
    config.validate()?;
    let seqs: Vec<Vec<u32>> = corpus.iter().map(lm_units).filter(|s| s.len() >= 2).collect();
    if seqs.is_empty() {
        return Err(ContextualError::EmptyCorpus);
    }
    let mut weights = init_bilstm::<f32>(config, seed)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let mut g = Graph::new();
            let p = weights.bind(&mut g, true);
            let loss = lm_loss_graph(&mut g, config, &p, &batch)?;
            total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
            g.backward(loss);
            let grads: Vec<Vec<f32>> = p
                .named()
                .iter()
                .zip(weights.params.named())
                .map(|((_, &v), (_, t))| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
                .collect();
            let refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            adam.update(&mut weights.params.values_mut(), &refs)?;
        }
        losses.push(total / seqs.len() as f64);
    }
    Ok((weights, losses))
}

pub fn train_bilm(corpus: &[TokenSequence], config: &BiLstmConfig, seed: u64) -> Result<BiLstmWeights<f32>> {
    train_bilm_with_history(corpus, config, seed).map(|(w, _)| w)
}
