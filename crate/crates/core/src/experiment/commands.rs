use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    evaluate_model, load_posts, parse_pairs, train_lm, train_model, train_vocab, ExperimentConfig,
    ExperimentError, ModelKind, Result, TrainedModel,
};
use crate::corpus::{normalize_text_with, write_tsv, LabeledPost, Split, Task};
use crate::metrics::{percent, render, render_confusion_csv, EvalReport, ReportFormat};
use crate::synthetic;
use crate::tokenizer::SubwordVocab;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| ExperimentError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| ExperimentError::io(path, e))
}

fn write_reports(dir: &Path, prefix: &str, report: &EvalReport) -> Result<()> {
    write(&dir.join(format!("{prefix}report.csv")), render(report, ReportFormat::Csv))?;
    write(&dir.join(format!("{prefix}report.txt")), render(report, ReportFormat::Plain))?;
    write(&dir.join(format!("{prefix}confusion.csv")), render_confusion_csv(&report.confusion))
}

/// Loads the training and test posts named by the config. Everything is
/// validated before any output is written.
fn load_data(config: &ExperimentConfig) -> Result<(Vec<LabeledPost>, Vec<LabeledPost>)> {
    config.validate()?;
    let train_files = config.train_files()?;
    let test_files = config.test_files()?;
    for f in train_files.iter().chain(&test_files) {
        if !f.path.is_file() {
            return Err(ExperimentError::MissingPath(f.path.clone()));
        }
    }
    config.out_dir()?;
    Ok((load_posts(&train_files, Split::Train)?, load_posts(&test_files, Split::Test)?))
}

/// Trains a vocabulary on the training split and writes `vocab`.
pub fn run_tokenizer_train(config: &ExperimentConfig) -> Result<PathBuf> {
    let (train, _) = load_data(config)?;
    let out = config.out_dir()?;
    let vocab = train_vocab(&train, config)?;
    create_dir(out)?;
    let path = out.join("vocab");
    vocab.save(&path)?;
    write(&out.join("config.txt"), config.echo())?;
    Ok(path)
}

/// Trains `config.model` for `config.task`, saves every artifact and
/// evaluates on the test split (or on the training split without one).
pub fn run_train(config: &ExperimentConfig) -> Result<EvalReport> {
    let (train, test) = load_data(config)?;
    let out = config.out_dir()?;
    create_dir(out)?;
    write(&out.join("config.txt"), config.echo())?;
    let vocab = train_vocab(&train, config)?;
    vocab.save(out.join("vocab"))?;
    let outcome = train_model(config.model, config.task, config, &vocab, &train, None)?;
    outcome.model.save(out)?;
    if let Some(h) = &outcome.history {
        let name = match config.model {
            ModelKind::BilstmSvm => "lm_history.tsv",
            _ => "history.tsv",
        };
        write(&out.join(name), h)?;
    }
    let eval_posts = if test.is_empty() { &train } else { &test };
    let report = evaluate_model(&outcome.model, &vocab, config, eval_posts, config.task)?;
    write_reports(out, "", &report)?;
    Ok(report)
}

fn load_run(run_dir: &Path, overrides: &[(String, String)]) -> Result<(ExperimentConfig, SubwordVocab, TrainedModel)> {
    let cfg_path = run_dir.join("config.txt");
    if !cfg_path.is_file() {
        return Err(ExperimentError::MissingPath(cfg_path));
    }
    let text = fs::read_to_string(&cfg_path).map_err(|e| ExperimentError::io(&cfg_path, e))?;
    let mut config = ExperimentConfig::default();
    config.apply_all(&parse_pairs(&text)?)?;
    config.apply_all(overrides)?;
    let vocab_path = run_dir.join("vocab");
    if !vocab_path.is_file() {
        return Err(ExperimentError::MissingPath(vocab_path));
    }
    let vocab = SubwordVocab::load(&vocab_path)?;
    let model = TrainedModel::load(run_dir, config.model)?;
    model.check_vocab(&vocab)?;
    Ok((config, vocab, model))
}

/// Evaluates a trained run on test data. `test` entries (`[lang:]path`,
/// relative to the working directory) override the run's test files; reports go to `out` (default: the run directory) as
/// `eval_report.csv`, `eval_report.txt` and `eval_confusion.csv`.
pub fn run_eval(run_dir: &Path, test: &[String], task: Option<Task>, out: Option<&Path>) -> Result<EvalReport> {
    let (config, vocab, model) = load_run(run_dir, &[])?;
    let task = task.unwrap_or(config.task);
    if model.schema() != task.schema() {
        return Err(ExperimentError::SchemaMismatch {
            trained: model.schema().task.to_string(),
            requested: task.to_string(),
        });
    }
    let files = if test.is_empty() {
        config.test_files()?
    } else {
        let mut c = config.clone();
        c.data_dir = None;
        c.test = test.to_vec();
        c.test_files()?
    };
    if files.is_empty() {
        return Err(ExperimentError::Usage("no test data: pass --test or configure `test`".into()));
    }
    let posts = load_posts(&files, Split::Test)?;
    let report = evaluate_model(&model, &vocab, &config, &posts, task)?;
    let out = out.unwrap_or(run_dir);
    create_dir(out)?;
    write_reports(out, "eval_", &report)?;
    Ok(report)
}

/// Class names predicted for raw texts.
pub fn run_predict(run_dir: &Path, texts: &[String]) -> Result<Vec<&'static str>> {
    let (config, vocab, model) = load_run(run_dir, &[])?;
    let seqs: Vec<_> = texts
        .iter()
        .map(|t| vocab.encode(&normalize_text_with(t, &config.normalize), config.max_len))
        .collect();
    let schema = model.schema();
    Ok(model.predict(&seqs)?.into_iter().map(|c| schema.name(c)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: ModelKind,
    /// `(task, macro F1, accuracy)` per evaluated task.
    pub scores: Vec<(Task, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for t in &self.tasks {
            let t = t.to_string().to_lowercase();
            write!(s, ",task_{t}_macro_f1,task_{t}_accuracy").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(r.model.label());
            for (_, f1, acc) in &r.scores {
                write!(s, ",{},{}", percent(*f1), percent(*acc)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_plain(&self) -> String {
        let mut s = format!("seed {}\n\n{:<12}", self.seed, "model");
        for t in &self.tasks {
            write!(s, "  {:>10}  {:>10}", format!("{t} macro F1"), format!("{t} accuracy")).unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{:<12}", r.model.label()).unwrap();
            for (_, f1, acc) in &r.scores {
                write!(s, "  {:>10}  {:>10}", format!("{}%", percent(*f1)), format!("{}%", percent(*acc))).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn macro_f1(&self, model: ModelKind, task: Task) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model)?
            .scores
            .iter()
            .find(|(t, _, _)| *t == task)
            .map(|&(_, f1, _)| f1)
    }
}

/// Trains all three model kinds for each task on `train` and evaluates on
/// `test`. The vocabulary and the bi-LSTM language model are trained once
/// and shared.
pub fn compare_models(
    config: &ExperimentConfig,
    tasks: &[Task],
    train: &[LabeledPost],
    test: &[LabeledPost],
) -> Result<(ComparisonTable, Vec<(ModelKind, Task, EvalReport)>)> {
    let vocab = train_vocab(train, config)?;
    let (lm, _) = train_lm(config, &vocab, train).map_err(|e| e.context("biLSTM language model"))?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for kind in ModelKind::ALL {
        let mut scores = Vec::new();
        for &task in tasks {
            let ctx = || format!("{} on task {task}", kind.name());
            let outcome = train_model(kind, task, config, &vocab, train, Some(&lm)).map_err(|e| e.context(ctx()))?;
            let report = evaluate_model(&outcome.model, &vocab, config, test, task).map_err(|e| e.context(ctx()))?;
            scores.push((task, report.macro_f1, report.accuracy));
            reports.push((kind, task, report));
        }
        rows.push(ComparisonRow { model: kind, scores });
    }
    let table = ComparisonTable {
        seed: config.seed,
        tasks: tasks.to_vec(),
        rows,
    };
    Ok((table, reports))
}

/// Runs the three-model comparison on both tasks and writes
/// `comparison.csv`, `comparison.txt` and per-run reports.
pub fn run_compare(config: &ExperimentConfig) -> Result<ComparisonTable> {
    let (train, test) = load_data(config)?;
    if test.is_empty() {
        return Err(ExperimentError::Usage("compare needs test data: configure `test` or provide test.tsv".into()));
    }
    let out = config.out_dir()?;
    create_dir(out)?;
    write(&out.join("config.txt"), config.echo())?;
    let (table, reports) = compare_models(config, &[Task::A, Task::B], &train, &test)?;
    let dir = out.join("reports");
    create_dir(&dir)?;
    for (kind, task, report) in &reports {
        write_reports(&dir, &format!("{}_task{task}_", kind.name()), report)?;
    }
    write(&out.join("comparison.csv"), table.to_csv())?;
    write(&out.join("comparison.txt"), table.to_plain())?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// 32 separable training posts.
    Overfit,
    /// 100 train / 40 test posts over two disjoint vocabularies.
    Separable,
    /// Context-dependent labels, 80/20 train/test.
    Negation { size: usize },
}

/// Writes a generated corpus as `train.tsv` (and `test.tsv` when the
/// corpus has a test part) under `out`.
pub fn run_synth(kind: SynthKind, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let (train, test) = match kind {
        SynthKind::Overfit => (synthetic::overfit_fixture(), Vec::new()),
        SynthKind::Separable => synthetic::separable_corpus(seed),
        SynthKind::Negation { size } => {
            let all = synthetic::negation_corpus(seed, size);
            all.into_iter().partition(|p| p.split == Split::Train)
        }
    };
    create_dir(out)?;
    let mut written = Vec::new();
    for (name, posts) in [("train.tsv", &train), ("test.tsv", &test)] {
        if posts.is_empty() {
            continue;
        }
        let path = out.join(name);
        write_tsv(&path, posts)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparison_layout() {
        let t = ComparisonTable {
            seed: 13,
            tasks: vec![Task::A, Task::B],
            rows: ModelKind::ALL
                .iter()
                .map(|&m| ComparisonRow {
                    model: m,
                    scores: vec![(Task::A, 0.8833, 0.8833), (Task::B, 0.5, 0.75)],
                })
                .collect(),
        };
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,task_a_macro_f1,task_a_accuracy,task_b_macro_f1,task_b_accuracy");
        assert_eq!(lines[1], "SVM,88.33,88.33,50.00,75.00");
        assert!(lines[2].starts_with("biLSTM+SVM,") && lines[3].starts_with("Transformer,"));
        assert!(t.to_plain().contains("88.33%"));
        assert_eq!(t.macro_f1(ModelKind::BilstmSvm, Task::B), Some(0.5));
    }
}
