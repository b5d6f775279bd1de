use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, forward_graph, pack_batch, EncoderError, EncoderModel, Result};
use crate::autodiff::{AdamConfig, AdamState, Graph, Tensor};
use crate::corpus::LabelSchema;
use crate::metrics;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Total epochs run.
    pub epochs: usize,
    /// First epoch (1-based) eligible for validation-based selection.
    pub select_from: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            select_from: 5,
            learning_rate: 2e-5,
            dropout: 0.1,
            seed: 13,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EncoderError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EncoderError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the dropout-perturbed training predictions.
    pub train_accuracy: f64,
    pub val_macro_f1: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned; `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
}

impl TrainingHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\ttrain_accuracy\tval_macro_f1\tval_accuracy\tselected\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        for r in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                opt(r.val_macro_f1),
                opt(r.val_accuracy),
                u8::from(self.selected_epoch == Some(r.epoch))
            ));
        }
        out
    }
}

/// Adam fine-tuning on cross-entropy of the head logits.
///
/// With a validation set, the returned weights are those of the epoch with
/// the best validation macro F1 among epochs `select_from..=epochs` (the
/// earliest wins ties; all epochs are eligible if fewer than `select_from`
/// ran). Without one, the final weights are returned.
pub fn fine_tune(
    model: &EncoderModel<f32>,
    train: &[(TokenSequence, usize)],
    validation: &[(TokenSequence, usize)],
    schema: LabelSchema,
    config: &TrainingConfig,
) -> Result<(EncoderModel<f32>, TrainingHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(EncoderError::EmptyTrainSet);
    }
    let k = model.config.num_classes;
    if let Some(&(_, bad)) = train.iter().chain(validation).find(|(_, y)| *y >= k || *y >= schema.len()) {
        return Err(EncoderError::BadLabel(bad));
    }
    let mut current = model.clone();
    current.config.dropout = config.dropout;
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, EncoderModel<f32>)> = None;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let val_seqs: Vec<TokenSequence> = validation.iter().map(|(s, _)| s.clone()).collect();
    let val_gold: Vec<usize> = validation.iter().map(|&(_, y)| y).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&TokenSequence> = chunk.iter().map(|&i| &train[i].0).collect();
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(train[i].1)).collect();
            let packed = pack_batch(&current.config, &refs)?;
            let mut g = Graph::new();
            let vars = current.bind(&mut g, true);
            let out = forward_graph(&mut g, &current.config, &vars, &packed, Some(&mut rng))?;
            let loss = g.cross_entropy(out.logits, &targets)?;
            loss_sum += g.value(loss).data()[0] as f64 * chunk.len() as f64;
            let logits = g.value(out.logits);
            correct += chunk
                .iter()
                .enumerate()
                .filter(|&(r, &i)| argmax(logits.row(r)) == train[i].1)
                .count();
            g.backward(loss);
            let grads: Vec<Vec<f32>> = vars
                .named()
                .iter()
                .zip(current.params.named())
                .map(|((_, &v), (_, t))| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut Tensor<f32>> = current.params.values_mut();
            adam.update(&mut params, &grad_refs)?;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_macro_f1: None,
            val_accuracy: None,
        };
        if !validation.is_empty() {
            let pred = current.predict(&val_seqs, config.batch_size)?;
            let cm = metrics::confusion(&val_gold, &pred, schema).expect("labels checked above");
            let report = metrics::evaluate(&cm).expect("non-empty validation set");
            record.val_macro_f1 = Some(report.macro_f1);
            record.val_accuracy = Some(report.accuracy);
            let eligible = epoch >= config.select_from || config.epochs < config.select_from;
            if eligible && best.as_ref().is_none_or(|(f1, _, _)| report.macro_f1 > *f1) {
                best = Some((report.macro_f1, epoch, current.clone()));
            }
        }
        history.epochs.push(record);
    }

    let mut chosen = match best {
        Some((_, epoch, m)) => {
            history.selected_epoch = Some(epoch);
            m
        }
        None => {
            history.selected_epoch = (config.epochs > 0).then_some(config.epochs);
            current
        }
    };
    chosen.config.dropout = model.config.dropout;
    Ok((chosen, history))
}
