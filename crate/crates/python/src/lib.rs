//! Python bindings: tokenizer, TF-IDF + SVM, transformer encoder, metrics
//! and the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use textguard_core::corpus::{normalize_text, LabelSchema, Task};
use textguard_core::encoder::{init_model, EncoderModel, ForwardMode, TransformerConfig};
use textguard_core::experiment::{self, ExperimentConfig, ExperimentError};
use textguard_core::features::{fit_tfidf, TfIdfModel};
use textguard_core::metrics::{confusion, evaluate as evaluate_report, EvalReport};
use textguard_core::svm::{train_svm, LinearModel, SvmParams};
use textguard_core::tokenizer::{train_bpe, SubwordVocab, TokenSequence};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    match e {
        ExperimentError::Io { .. } | ExperimentError::MissingPath(_) => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn parse_task(task: &str) -> PyResult<Task> {
    task.parse().map_err(value_err)
}

fn schema(task: &str) -> PyResult<LabelSchema> {
    Ok(parse_task(task)?.schema())
}

fn sequence(ids: Vec<u32>, mask: Vec<u8>) -> TokenSequence {
    TokenSequence { ids, mask }
}

/// BPE subword vocabulary.
#[pyclass(module = "textguard", name = "Vocab")]
struct PyVocab {
    inner: SubwordVocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    fn train(texts: Vec<String>, size: usize) -> PyResult<Self> {
        Ok(Self { inner: train_bpe(&texts, size).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: SubwordVocab::load(&path).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    /// Returns `(ids, mask)`, both of length `max_len`.
    fn encode(&self, text: &str, max_len: usize) -> PyResult<(Vec<u32>, Vec<u8>)> {
        if max_len < 2 {
            return Err(PyValueError::new_err("max_len must be at least 2"));
        }
        let s = self.inner.encode(text, max_len);
        Ok((s.ids, s.mask))
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(value_err)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn merges(&self) -> Vec<(String, String)> {
        self.inner.merges().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// TF-IDF vectorizer over token ids.
#[pyclass(module = "textguard", name = "TfIdf")]
struct PyTfIdf {
    inner: TfIdfModel,
}

#[pymethods]
impl PyTfIdf {
    /// `docs` is a list of `(ids, mask)` pairs as returned by `Vocab.encode`.
    #[staticmethod]
    fn fit(docs: Vec<(Vec<u32>, Vec<u8>)>, vocab_size: usize) -> PyResult<Self> {
        let seqs: Vec<TokenSequence> = docs.into_iter().map(|(i, m)| sequence(i, m)).collect();
        Ok(Self { inner: fit_tfidf(&seqs, vocab_size).map_err(value_err)? })
    }

    /// Dense transformed vector.
    fn transform(&self, ids: Vec<u32>, mask: Vec<u8>) -> Vec<f64> {
        self.inner.transform(&sequence(ids, mask)).to_dense()
    }

    #[getter]
    fn idf(&self) -> Vec<f64> {
        self.inner.idf.clone()
    }
}

/// One-vs-rest linear SVM.
#[pyclass(module = "textguard", name = "LinearSvm")]
struct PyLinearSvm {
    inner: LinearModel,
}

#[pymethods]
impl PyLinearSvm {
    #[staticmethod]
    #[pyo3(signature = (features, labels, task, lam = 1e-4, epochs = 20, seed = 13))]
    fn train(features: Vec<Vec<f64>>, labels: Vec<usize>, task: &str, lam: f64, epochs: usize, seed: u64) -> PyResult<Self> {
        let dim = features.first().map_or(0, Vec::len);
        let params = SvmParams { lambda: lam, epochs, seed };
        Ok(Self { inner: train_svm(&features, &labels, schema(task)?, dim, &params).map_err(value_err)? })
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&x).map_err(value_err)
    }

    fn scores(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.scores(&x).map_err(value_err)
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        self.inner.weights.clone()
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.inner.bias.clone()
    }
}

/// Transformer encoder with a classification head.
#[pyclass(module = "textguard", name = "Encoder")]
struct PyEncoder {
    inner: EncoderModel<f32>,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (vocab_size, num_classes, preset = "mini", max_len = None, seed = 13))]
    fn new(vocab_size: usize, num_classes: usize, preset: &str, max_len: Option<usize>, seed: u64) -> PyResult<Self> {
        let mut config = TransformerConfig::preset(preset, vocab_size, num_classes)
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset `{preset}`")))?;
        if let Some(m) = max_len {
            config.max_len = m;
        }
        Ok(Self { inner: init_model(&config, seed).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: EncoderModel::load_checkpoint(&path).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(value_err)
    }

    /// Eval-mode logits, one row per `(ids, mask)` input.
    fn logits(&self, batch: Vec<(Vec<u32>, Vec<u8>)>) -> PyResult<Vec<Vec<f32>>> {
        let seqs: Vec<TokenSequence> = batch.into_iter().map(|(i, m)| sequence(i, m)).collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let (logits, _) = self.inner.forward(&refs, ForwardMode::Eval).map_err(value_err)?;
        let k = self.inner.config.num_classes;
        Ok(logits.data().chunks(k).map(<[f32]>::to_vec).collect())
    }

    fn predict(&self, batch: Vec<(Vec<u32>, Vec<u8>)>) -> PyResult<Vec<usize>> {
        let seqs: Vec<TokenSequence> = batch.into_iter().map(|(i, m)| sequence(i, m)).collect();
        self.inner.predict(&seqs, 64).map_err(value_err)
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.config.num_layers
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.config.max_len
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("macro_f1", r.macro_f1)?;
    d.set_item("accuracy", r.accuracy)?;
    let per_class = PyDict::new(py);
    for (c, s) in r.per_class.iter().enumerate() {
        per_class.set_item(r.confusion.schema.name(c), (s.precision, s.recall, s.f1))?;
    }
    d.set_item("per_class", per_class)?;
    d.set_item("confusion", r.confusion.counts.clone())?;
    Ok(d)
}

/// Macro F1, accuracy, per-class `(precision, recall, f1)` and the
/// confusion matrix for class-index lists.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, gold: Vec<usize>, predicted: Vec<usize>, task: &str) -> PyResult<Bound<'py, PyDict>> {
    let cm = confusion(&gold, &predicted, schema(task)?).map_err(value_err)?;
    report_dict(py, &evaluate_report(&cm).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(name = "normalize_text")]
fn py_normalize_text(text: &str) -> String {
    normalize_text(text)
}

fn config_from(settings: Option<&Bound<'_, PyDict>>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(d) = settings {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            cfg.apply(&key, &value).map_err(experiment_err)?;
        }
    }
    Ok(cfg.with_env_data())
}

/// Trains one model from `key = value` settings (same keys as the config
/// file) and returns the evaluation report.
#[pyfunction]
#[pyo3(signature = (settings = None))]
fn train<'py>(py: Python<'py>, settings: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from(settings)?;
    let report = experiment::run_train(&cfg).map_err(experiment_err)?;
    report_dict(py, &report)
}

/// Class names predicted by a trained run directory.
#[pyfunction]
fn predict(run_dir: PathBuf, texts: Vec<String>) -> PyResult<Vec<&'static str>> {
    experiment::run_predict(&run_dir, &texts).map_err(experiment_err)
}

/// Runs the three-model comparison; returns the CSV table text.
#[pyfunction]
#[pyo3(signature = (settings = None))]
fn compare(settings: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let cfg = config_from(settings)?;
    Ok(experiment::run_compare(&cfg).map_err(experiment_err)?.to_csv())
}

/// Writes a generated corpus (`overfit`, `separable` or `negation`).
#[pyfunction]
#[pyo3(signature = (kind, out, seed = 13, size = 600))]
fn synth(kind: &str, out: PathBuf, seed: u64, size: usize) -> PyResult<Vec<PathBuf>> {
    let kind = match kind {
        "overfit" => experiment::SynthKind::Overfit,
        "separable" => experiment::SynthKind::Separable,
        "negation" => experiment::SynthKind::Negation { size },
        other => return Err(PyValueError::new_err(format!("unknown corpus `{other}`"))),
    };
    experiment::run_synth(kind, seed, &out).map_err(experiment_err)
}

#[pymodule]
fn textguard(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyTfIdf>()?;
    m.add_class::<PyLinearSvm>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(py_normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
