//! Flat `key = value` experiment configuration.
//!
//! Values are applied in order onto the defaults: config file lines first,
//! then command-line overrides, so a flag always wins over the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{ExperimentError, Result};
use crate::contextual::BiLstmConfig;
use crate::corpus::{Language, NormalizeOptions, Task};
use crate::encoder::{TrainingConfig, TransformerConfig};
use crate::svm::SvmParams;

pub const DATA_ENV: &str = "TEXTGUARD_DATA";
pub const DEFAULT_SEED: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    SvmTfidf,
    BilstmSvm,
    Transformer,
}

impl ModelKind {
    /// Baseline, contextual, transformer: the comparison table's row order.
    pub const ALL: [ModelKind; 3] = [ModelKind::SvmTfidf, ModelKind::BilstmSvm, ModelKind::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SvmTfidf => "svm-tfidf",
            ModelKind::BilstmSvm => "bilstm-svm",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::SvmTfidf => "SVM",
            ModelKind::BilstmSvm => "biLSTM+SVM",
            ModelKind::Transformer => "Transformer",
        }
    }
}

impl FromStr for ModelKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| ExperimentError::Usage(format!("unknown model `{s}` (expected svm-tfidf, bilstm-svm or transformer)")))
    }
}

/// One dataset file and the language it is declared as.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFile {
    pub language: Language,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub task: Task,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub language: Language,
    /// Raw `[lang:]path` entries; resolved against `data_dir`.
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub normalize: NormalizeOptions,
    pub vocab_size: usize,
    pub max_len: usize,
    pub sublinear_tf: bool,
    pub svm: SvmParams,
    pub bilstm: BiLstmConfig,
    pub preset: String,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub ff_size: Option<usize>,
    pub training: TrainingConfig,
    pub validation_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::SvmTfidf,
            task: Task::A,
            seed: DEFAULT_SEED,
            out: None,
            data_dir: None,
            language: Language::English,
            train: Vec::new(),
            test: Vec::new(),
            normalize: NormalizeOptions::default(),
            vocab_size: 8000,
            max_len: 128,
            sublinear_tf: false,
            svm: SvmParams::default(),
            bilstm: BiLstmConfig::new(0),
            preset: "mini".into(),
            layers: None,
            hidden: None,
            heads: None,
            ff_size: None,
            training: TrainingConfig::default(),
            validation_fraction: 0.1,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| ExperimentError::Usage(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ExperimentError::Usage(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::ConfigSyntax {
            line: i + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| ExperimentError::Usage(format!("override `{arg}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_file(path)?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(ExperimentError::MissingPath(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        self.apply_all(&parse_pairs(&text)?)
    }

    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "model" => self.model = v.parse()?,
            "task" => self.task = v.parse().map_err(|_| ExperimentError::Usage(format!("unknown task `{v}` (expected A or B)")))?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "data" => self.data_dir = Some(PathBuf::from(v)),
            "language" => {
                self.language = v.parse().map_err(|_| ExperimentError::Usage(format!("unknown language `{v}`")))?
            }
            "train" => self.train = list(v),
            "test" => self.test = list(v),
            "lowercase" => self.normalize.lowercase = parse_bool(key, v)?,
            "replace_urls" => self.normalize.replace_urls = parse_bool(key, v)?,
            "replace_mentions" => self.normalize.replace_mentions = parse_bool(key, v)?,
            "strip_hashtags" => self.normalize.strip_hashtags = parse_bool(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "tfidf.sublinear_tf" => self.sublinear_tf = parse_bool(key, v)?,
            "svm.lambda" => self.svm.lambda = parse(key, v)?,
            "svm.epochs" => self.svm.epochs = parse(key, v)?,
            "bilstm.embedding_size" => self.bilstm.embedding_size = parse(key, v)?,
            "bilstm.hidden_size" => self.bilstm.hidden_size = parse(key, v)?,
            "bilstm.epochs" => self.bilstm.epochs = parse(key, v)?,
            "bilstm.learning_rate" => self.bilstm.learning_rate = parse(key, v)?,
            "bilstm.batch_size" => self.bilstm.batch_size = parse(key, v)?,
            "transformer.preset" => self.preset = v.to_string(),
            "transformer.layers" => self.layers = Some(parse(key, v)?),
            "transformer.hidden" => self.hidden = Some(parse(key, v)?),
            "transformer.heads" => self.heads = Some(parse(key, v)?),
            "transformer.ff_size" => self.ff_size = Some(parse(key, v)?),
            "transformer.batch_size" => self.training.batch_size = parse(key, v)?,
            "transformer.epochs" => self.training.epochs = parse(key, v)?,
            "transformer.select_from" => self.training.select_from = parse(key, v)?,
            "transformer.learning_rate" => self.training.learning_rate = parse(key, v)?,
            "transformer.dropout" => self.training.dropout = parse(key, v)?,
            "transformer.validation_fraction" => self.validation_fraction = parse(key, v)?,
            _ => return Err(ExperimentError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Fills the data directory from the environment when unset.
    pub fn with_env_data(mut self) -> Self {
        if self.data_dir.is_none() {
            self.data_dir = std::env::var_os(DATA_ENV).map(PathBuf::from);
        }
        self
    }

    fn resolve_entry(&self, entry: &str) -> Result<DataFile> {
        let (language, raw) = match entry.split_once(':') {
            Some((tag, rest)) if tag.parse::<Language>().is_ok() => (tag.parse().unwrap(), rest),
            _ => (self.language, entry),
        };
        let p = PathBuf::from(raw);
        let path = match &self.data_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p,
        };
        Ok(DataFile { language, path })
    }

    fn files(&self, entries: &[String], default: &str) -> Result<Vec<DataFile>> {
        if entries.is_empty() {
            return match &self.data_dir {
                Some(_) => Ok(vec![self.resolve_entry(default)?]),
                None => Err(ExperimentError::Usage(format!(
                    "no {} data: set `{}` in the config, pass --data, or set {DATA_ENV}",
                    default.trim_end_matches(".tsv"),
                    default.trim_end_matches(".tsv")
                ))),
            };
        }
        entries.iter().map(|e| self.resolve_entry(e)).collect()
    }

    pub fn train_files(&self) -> Result<Vec<DataFile>> {
        self.files(&self.train, "train.tsv")
    }

    /// Test files; empty when neither configured nor present as
    /// `test.tsv` in the data directory.
    pub fn test_files(&self) -> Result<Vec<DataFile>> {
        if self.test.is_empty() {
            return Ok(match &self.data_dir {
                Some(d) if d.join("test.tsv").is_file() => vec![self.resolve_entry("test.tsv")?],
                _ => Vec::new(),
            });
        }
        self.files(&self.test, "test.tsv")
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| ExperimentError::Usage("no output directory: pass --out or set `out`".into()))
    }

    pub fn transformer_config(&self, vocab_size: usize, num_classes: usize) -> Result<TransformerConfig> {
        let mut c = TransformerConfig::preset(&self.preset, vocab_size, num_classes)
            .ok_or_else(|| ExperimentError::Usage(format!("unknown transformer preset `{}` (mini, base, large)", self.preset)))?;
        c.num_layers = self.layers.unwrap_or(c.num_layers);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.num_heads = self.heads.unwrap_or(c.num_heads);
        c.ff_size = self.ff_size.unwrap_or(c.ff_size);
        c.max_len = self.max_len;
        c.dropout = self.training.dropout;
        Ok(c)
    }

    pub fn svm_params(&self) -> SvmParams {
        SvmParams {
            seed: self.seed,
            ..self.svm
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.training
        }
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Usage(m));
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.vocab_size < 8 {
            return bad(format!("vocab_size {} is too small", self.vocab_size));
        }
        if !(self.svm.lambda > 0.0) {
            return bad(format!("svm.lambda must be positive, got {}", self.svm.lambda));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("transformer.validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        self.bilstm_config(1).validate().map_err(|e| ExperimentError::Usage(e.to_string()))?;
        self.training_config().validate().map_err(|e| ExperimentError::Usage(e.to_string()))?;
        self.transformer_config(16, self.task.schema().len())?
            .validate()
            .map_err(|e| ExperimentError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn bilstm_config(&self, vocab_size: usize) -> BiLstmConfig {
        BiLstmConfig {
            vocab_size,
            ..self.bilstm
        }
    }

    /// Resolved configuration as re-parseable `key = value` text.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("model", self.model.name().into());
        kv("task", self.task.to_string());
        kv("seed", self.seed.to_string());
        if let Some(d) = &self.data_dir {
            kv("data", d.display().to_string());
        }
        kv("language", self.language.code().into());
        let files = |entries: &[String]| entries.join(",");
        if !self.train.is_empty() {
            kv("train", files(&self.train));
        }
        if !self.test.is_empty() {
            kv("test", files(&self.test));
        }
        kv("lowercase", self.normalize.lowercase.to_string());
        kv("replace_urls", self.normalize.replace_urls.to_string());
        kv("replace_mentions", self.normalize.replace_mentions.to_string());
        kv("strip_hashtags", self.normalize.strip_hashtags.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("max_len", self.max_len.to_string());
        kv("tfidf.sublinear_tf", self.sublinear_tf.to_string());
        kv("svm.lambda", self.svm.lambda.to_string());
        kv("svm.epochs", self.svm.epochs.to_string());
        kv("bilstm.embedding_size", self.bilstm.embedding_size.to_string());
        kv("bilstm.hidden_size", self.bilstm.hidden_size.to_string());
        kv("bilstm.epochs", self.bilstm.epochs.to_string());
        kv("bilstm.learning_rate", self.bilstm.learning_rate.to_string());
        kv("bilstm.batch_size", self.bilstm.batch_size.to_string());
        kv("transformer.preset", self.preset.clone());
        for (k, v) in [
            ("transformer.layers", self.layers),
            ("transformer.hidden", self.hidden),
            ("transformer.heads", self.heads),
            ("transformer.ff_size", self.ff_size),
        ] {
            if let Some(v) = v {
                kv(k, v.to_string());
            }
        }
        kv("transformer.batch_size", self.training.batch_size.to_string());
        kv("transformer.epochs", self.training.epochs.to_string());
        kv("transformer.select_from", self.training.select_from.to_string());
        kv("transformer.learning_rate", self.training.learning_rate.to_string());
        kv("transformer.dropout", self.training.dropout.to_string());
        kv("transformer.validation_fraction", self.validation_fraction.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_values_win() {
        let mut c = ExperimentConfig::default();
        let file = parse_pairs("# comment\nmodel = transformer\nseed = 5\n\ntask=B\n").unwrap();
        c.apply_all(&file).unwrap();
        c.apply_all(&[parse_override("seed=9").unwrap()]).unwrap();
        assert_eq!((c.model, c.task, c.seed), (ModelKind::Transformer, Task::B, 9));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.apply_all(&parse_pairs("train = de:a.tsv, b.tsv\ntransformer.layers = 2\nlowercase = yes").unwrap())
            .unwrap();
        let mut d = ExperimentConfig::default();
        d.apply_all(&parse_pairs(&c.echo()).unwrap()).unwrap();
        assert_eq!(c, d);
        assert!(c.echo().contains("seed = 13\n"));
    }

    #[test]
    fn syntax_and_key_errors() {
        assert!(matches!(parse_pairs("a = 1\noops"), Err(ExperimentError::ConfigSyntax { line: 2, .. })));
        let mut c = ExperimentConfig::default();
        assert!(matches!(c.apply("bogus", "1"), Err(ExperimentError::Usage(_))));
        assert!(matches!(c.apply("model", "bert"), Err(ExperimentError::Usage(_))));
        assert!(matches!(c.apply("seed", "x"), Err(ExperimentError::Usage(_))));
    }

    #[test]
    fn entries_resolve_against_data_dir() {
        let mut c = ExperimentConfig::default();
        c.apply_all(&parse_pairs("data = /d\ntrain = hi:x.tsv,/abs/y.tsv").unwrap()).unwrap();
        let files = c.train_files().unwrap();
        assert_eq!(files[0], DataFile { language: Language::Hindi, path: "/d/x.tsv".into() });
        assert_eq!(files[1], DataFile { language: Language::English, path: "/abs/y.tsv".into() });
        let bare = ExperimentConfig::default();
        assert!(matches!(bare.train_files(), Err(ExperimentError::Usage(_))));
    }

    #[test]
    fn validation_catches_bad_transformer_shape() {
        let mut c = ExperimentConfig::default();
        c.model = ModelKind::Transformer;
        c.hidden = Some(130);
        assert!(matches!(c.validate(), Err(ExperimentError::Usage(_))));
        assert!(ExperimentConfig::default().validate().is_ok());
    }
}
