//! End-to-end runs: configuration, training of the three model kinds,
//! evaluation, prediction and the comparison table.

mod commands;
mod config;
mod pipeline;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{
    compare_models, run_compare, run_eval, run_predict, run_synth, run_tokenizer_train, run_train, ComparisonRow, ComparisonTable,
    SynthKind,
};
pub use config::{parse_override, parse_pairs, DataFile, ExperimentConfig, ModelKind, DATA_ENV, DEFAULT_SEED};
pub use pipeline::{encode_posts, evaluate_model, load_posts, train_lm, train_model, train_vocab, TrainOutcome, TrainedModel};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Usage(String),
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("path not found: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("model was trained for task {trained}, cannot evaluate task {requested}")]
    SchemaMismatch { trained: String, requested: String },
    #[error("vocabulary has {vocab} tokens but the model expects {model}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Features(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Svm(#[from] crate::svm::SvmError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Contextual(#[from] crate::contextual::ContextualError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<ExperimentError>,
    },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn context(self, context: impl Into<String>) -> Self {
        ExperimentError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Usage(_)
            | ExperimentError::ConfigSyntax { .. }
            | ExperimentError::MissingPath(_)
            | ExperimentError::SchemaMismatch { .. }
            | ExperimentError::VocabMismatch { .. } => 2,
            ExperimentError::Corpus(crate::corpus::CorpusError::MissingFile(_)) => 2,
            ExperimentError::Context { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
