use std::path::Path;

use super::{DataFile, ExperimentConfig, ExperimentError, ModelKind, Result};
use crate::contextual::{train_bilm_with_history, BiLstmWeights};
use crate::corpus::{load_tsv, normalize_text_with, stratified_split, LabelSchema, LabeledPost, NormalizeOptions, Split, Task};
use crate::encoder::{fine_tune, init_model, EncoderModel};
use crate::features::{fit_tfidf, TfIdfModel};
use crate::metrics::{self, EvalReport};
use crate::svm::{train_svm, LinearModel, SvmParams};
use crate::tokenizer::{train_bpe, SubwordVocab, TokenSequence};

pub fn load_posts(files: &[DataFile], split: Split) -> Result<Vec<LabeledPost>> {
    let mut posts = Vec::new();
    for f in files {
        if !f.path.is_file() {
            return Err(ExperimentError::MissingPath(f.path.clone()));
        }
        posts.extend(load_tsv(&f.path, f.language, split)?);
    }
    Ok(posts)
}

/// BPE vocabulary over the normalized training text.
pub fn train_vocab(posts: &[LabeledPost], config: &ExperimentConfig) -> Result<SubwordVocab> {
    let texts: Vec<String> = posts.iter().map(|p| normalize_text_with(&p.text, &config.normalize)).collect();
    Ok(train_bpe(&texts, config.vocab_size)?)
}

pub fn encode_posts(vocab: &SubwordVocab, posts: &[LabeledPost], opts: &NormalizeOptions, max_len: usize) -> Vec<TokenSequence> {
    posts
        .iter()
        .map(|p| vocab.encode(&normalize_text_with(&p.text, opts), max_len))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    SvmTfidf { tfidf: TfIdfModel, svm: LinearModel },
    BilstmSvm { bilstm: BiLstmWeights<f32>, svm: LinearModel },
    Transformer { encoder: EncoderModel<f32> },
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Per-epoch TSV log for the models that have epochs.
    pub history: Option<String>,
}

fn schema_for(k: usize) -> LabelSchema {
    if k == LabelSchema::TASK_A.len() {
        LabelSchema::TASK_A
    } else {
        LabelSchema::TASK_B
    }
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::SvmTfidf { .. } => ModelKind::SvmTfidf,
            TrainedModel::BilstmSvm { .. } => ModelKind::BilstmSvm,
            TrainedModel::Transformer { .. } => ModelKind::Transformer,
        }
    }

    pub fn schema(&self) -> LabelSchema {
        match self {
            TrainedModel::SvmTfidf { svm, .. } | TrainedModel::BilstmSvm { svm, .. } => svm.schema,
            TrainedModel::Transformer { encoder } => schema_for(encoder.config.num_classes),
        }
    }

    /// Vocabulary size the model was built for.
    pub fn vocab_size(&self) -> usize {
        match self {
            TrainedModel::SvmTfidf { tfidf, .. } => tfidf.dim,
            TrainedModel::BilstmSvm { bilstm, .. } => bilstm.config.vocab_size,
            TrainedModel::Transformer { encoder } => encoder.config.vocab_size,
        }
    }

    pub fn check_vocab(&self, vocab: &SubwordVocab) -> Result<()> {
        if self.vocab_size() != vocab.len() {
            return Err(ExperimentError::VocabMismatch {
                model: self.vocab_size(),
                vocab: vocab.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, seqs: &[TokenSequence]) -> Result<Vec<usize>> {
        match self {
            TrainedModel::SvmTfidf { tfidf, svm } => seqs
                .iter()
                .map(|s| Ok(svm.predict(&tfidf.transform(s))?))
                .collect(),
            TrainedModel::BilstmSvm { bilstm, svm } => seqs
                .iter()
                .map(|s| Ok(svm.predict(&bilstm.sentence_vector(s)?)?))
                .collect(),
            TrainedModel::Transformer { encoder } => Ok(encoder.predict(seqs, 64)?),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = |name: &str| dir.join(name);
        match self {
            TrainedModel::SvmTfidf { tfidf, svm } => {
                tfidf.save(path("tfidf.tsv"))?;
                svm.save(path("svm.tsv"))?;
            }
            TrainedModel::BilstmSvm { bilstm, svm } => {
                bilstm.save_checkpoint(path("bilstm.ckpt"))?;
                svm.save(path("svm.tsv"))?;
            }
            TrainedModel::Transformer { encoder } => encoder.save_checkpoint(path("encoder.ckpt"))?,
        }
        Ok(())
    }

    pub fn load(dir: &Path, kind: ModelKind) -> Result<Self> {
        let path = |name: &str| {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(ExperimentError::MissingPath(p))
            }
        };
        Ok(match kind {
            ModelKind::SvmTfidf => TrainedModel::SvmTfidf {
                tfidf: TfIdfModel::load(path("tfidf.tsv")?)?,
                svm: LinearModel::load(path("svm.tsv")?)?,
            },
            ModelKind::BilstmSvm => TrainedModel::BilstmSvm {
                bilstm: BiLstmWeights::load_checkpoint(path("bilstm.ckpt")?)?,
                svm: LinearModel::load(path("svm.tsv")?)?,
            },
            ModelKind::Transformer => TrainedModel::Transformer {
                encoder: EncoderModel::load_checkpoint(path("encoder.ckpt")?)?,
            },
        })
    }
}

/// Trains the bidirectional LM on the training text; returns the weights
/// and a per-epoch loss log.
pub fn train_lm(config: &ExperimentConfig, vocab: &SubwordVocab, posts: &[LabeledPost]) -> Result<(BiLstmWeights<f32>, String)> {
    let seqs = encode_posts(vocab, posts, &config.normalize, config.max_len);
    let (weights, losses) = train_bilm_with_history(&seqs, &config.bilstm_config(vocab.len()), config.seed)?;
    let mut log = String::from("epoch\tlm_loss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    Ok((weights, log))
}

/// Trains one model kind on `train` for `task`. A pre-trained LM may be
/// passed for the contextual model so it is shared across tasks.
pub fn train_model(
    kind: ModelKind,
    task: Task,
    config: &ExperimentConfig,
    vocab: &SubwordVocab,
    train: &[LabeledPost],
    lm: Option<&BiLstmWeights<f32>>,
) -> Result<TrainOutcome> {
    let schema = task.schema();
    let labels: Vec<usize> = train.iter().map(|p| p.label(task)).collect();
    match kind {
        ModelKind::SvmTfidf => {
            let seqs = encode_posts(vocab, train, &config.normalize, config.max_len);
            let mut tfidf = fit_tfidf(&seqs, vocab.len())?;
            tfidf.sublinear_tf = config.sublinear_tf;
            let x: Vec<_> = seqs.iter().map(|s| tfidf.transform(s)).collect();
            let svm = train_svm(&x, &labels, schema, tfidf.dim, &config.svm_params())?;
            Ok(TrainOutcome {
                model: TrainedModel::SvmTfidf { tfidf, svm },
                history: None,
            })
        }
        ModelKind::BilstmSvm => {
            let (bilstm, history) = match lm {
                Some(w) => (w.clone(), None),
                None => {
                    let (w, log) = train_lm(config, vocab, train)?;
                    (w, Some(log))
                }
            };
            let seqs = encode_posts(vocab, train, &config.normalize, config.max_len);
            let x = seqs.iter().map(|s| bilstm.sentence_vector(s)).collect::<std::result::Result<Vec<_>, _>>()?;
            let dim = 2 * bilstm.config.hidden_size;
            let svm = train_standardized_svm(&x, &labels, schema, dim, &config.svm_params())?;
            Ok(TrainOutcome {
                model: TrainedModel::BilstmSvm { bilstm, svm },
                history,
            })
        }
        ModelKind::Transformer => {
            let model_config = config.transformer_config(vocab.len(), schema.len())?;
            let init = init_model::<f32>(&model_config, config.seed)?;
            let (fit_posts, val_posts) = if config.validation_fraction > 0.0 {
                match stratified_split(train, 1.0 - config.validation_fraction, task, config.seed) {
                    Ok(parts) => parts,
                    Err(e) => {
                        eprintln!("warning: no validation split ({e}); selecting the final epoch");
                        (train.to_vec(), Vec::new())
                    }
                }
            } else {
                (train.to_vec(), Vec::new())
            };
            let pair = |posts: &[LabeledPost]| -> Vec<(TokenSequence, usize)> {
                encode_posts(vocab, posts, &config.normalize, config.max_len)
                    .into_iter()
                    .zip(posts.iter().map(|p| p.label(task)))
                    .collect()
            };
            let (encoder, history) = fine_tune(&init, &pair(&fit_posts), &pair(&val_posts), schema, &config.training_config())?;
            Ok(TrainOutcome {
                model: TrainedModel::Transformer { encoder },
                history: Some(history.to_tsv()),
            })
        }
    }
}

/// Trains on per-dimension standardized vectors, then folds the scaling
/// back into the weights so the model applies to raw vectors. Pooled LSTM
/// states share a large common component; without this the hinge updates
/// on the bias dominate the small class differences.
fn train_standardized_svm(
    x: &[Vec<f64>],
    labels: &[usize],
    schema: LabelSchema,
    dim: usize,
    params: &SvmParams,
) -> Result<LinearModel> {
    let n = x.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for v in x {
        mean.iter_mut().zip(v).for_each(|(m, a)| *m += a / n);
    }
    let mut std = vec![0.0; dim];
    for v in x {
        std.iter_mut().zip(v).zip(&mean).for_each(|((s, a), m)| *s += (a - m).powi(2) / n);
    }
    std.iter_mut().for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|v| v.iter().zip(&mean).zip(&std).map(|((a, m), s)| (a - m) / s).collect())
        .collect();
    let mut model = train_svm(&z, labels, schema, dim, params)?;
    for (w, b) in model.weights.iter_mut().zip(model.bias.iter_mut()) {
        for ((wi, m), s) in w.iter_mut().zip(&mean).zip(&std) {
            *wi /= s;
            *b -= *wi * m;
        }
    }
    Ok(model)
}

pub fn evaluate_model(
    model: &TrainedModel,
    vocab: &SubwordVocab,
    config: &ExperimentConfig,
    posts: &[LabeledPost],
    task: Task,
) -> Result<EvalReport> {
    if model.schema() != task.schema() {
        return Err(ExperimentError::SchemaMismatch {
            trained: model.schema().task.to_string(),
            requested: task.to_string(),
        });
    }
    model.check_vocab(vocab)?;
    let seqs = encode_posts(vocab, posts, &config.normalize, config.max_len);
    let pred = model.predict(&seqs)?;
    let gold: Vec<usize> = posts.iter().map(|p| p.label(task)).collect();
    let cm = metrics::confusion(&gold, &pred, task.schema())?;
    Ok(metrics::evaluate(&cm)?)
}
