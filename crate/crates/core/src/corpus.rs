//! HASOC-style datasets: label schemas, TSV ingestion, text cleanup,
//! stratified splitting and dataset statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const TSV_HEADER: &str = "text_id\ttext\ttask_1\ttask_2";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("dataset file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad header in {path}: expected `{expected}`, found `{found}`")]
    BadHeader {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("expected 4 columns at row {row}, found {found}")]
    ColumnCount { row: usize, found: usize },
    #[error("unknown label `{value}` at row {row}")]
    UnknownLabel { row: usize, value: String },
    #[error("inconsistent labels at row {row}: task_1=NOT requires task_2=NONE")]
    InconsistentLabels { row: usize },
    #[error("duplicate id `{id}` at row {row}")]
    DuplicateId { row: usize, id: String },
    #[error("empty text after normalization at row {row}")]
    EmptyText { row: usize },
    #[error("text of post `{0}` contains a tab or newline")]
    IllegalText(String),
    #[error("class {class} has {count} member(s); stratified split needs at least 2")]
    SmallClass { class: &'static str, count: usize },
    #[error("split fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("unknown {kind} `{value}`")]
    UnknownTag { kind: &'static str, value: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Which of the two shared-task label sets is in play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Coarse NOT / HOF.
    A,
    /// Fine-grained NONE / HATE / OFFN / PRFN.
    B,
}

impl Task {
    pub fn schema(self) -> LabelSchema {
        match self {
            Task::A => LabelSchema::TASK_A,
            Task::B => LabelSchema::TASK_B,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::A => "A",
            Task::B => "B",
        })
    }
}

impl FromStr for Task {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "TASK_A" | "TASKA" => Ok(Task::A),
            "B" | "TASK_B" | "TASKB" => Ok(Task::B),
            _ => Err(CorpusError::UnknownTag {
                kind: "task",
                value: s.to_string(),
            }),
        }
    }
}

/// Ordered class list for a task. Class indices are positions in `classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSchema {
    pub task: Task,
    pub classes: &'static [&'static str],
}

impl LabelSchema {
    pub const TASK_A: LabelSchema = LabelSchema {
        task: Task::A,
        classes: &["NOT", "HOF"],
    };
    pub const TASK_B: LabelSchema = LabelSchema {
        task: Task::B,
        classes: &["NONE", "HATE", "OFFN", "PRFN"],
    };

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, index: usize) -> &'static str {
        self.classes[index]
    }

    /// Case-insensitive lookup. `PROF` is accepted as a spelling of `PRFN`.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let upper = label.trim().to_ascii_uppercase();
        let canonical = if upper == "PROF" { "PRFN" } else { upper.as_str() };
        self.classes.iter().position(|c| *c == canonical)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Language {
    English,
    German,
    Hindi,
}

impl Language {
    pub const ALL: [Language; 3] = [Language::English, Language::German, Language::Hindi];

    pub fn code(self) -> &'static str {
        match self {
            Language::English => "en",
            Language::German => "de",
            Language::Hindi => "hi",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::English => "English",
            Language::German => "German",
            Language::Hindi => "Hindi",
        })
    }
}

impl FromStr for Language {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" | "english" => Ok(Language::English),
            "de" | "german" => Ok(Language::German),
            "hi" | "hindi" => Ok(Language::Hindi),
            _ => Err(CorpusError::UnknownTag {
                kind: "language",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(CorpusError::UnknownTag {
                kind: "split",
                value: s.to_string(),
            }),
        }
    }
}

/// One annotated post. Labels are class indices into the task schemas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPost {
    pub id: String,
    pub text: String,
    pub task_a: usize,
    pub task_b: usize,
    pub language: Language,
    pub split: Split,
}

impl LabeledPost {
    /// Builds a post, enforcing that a NOT post carries NONE.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        task_a: &str,
        task_b: &str,
        language: Language,
        split: Split,
    ) -> Result<Self> {
        let a = LabelSchema::TASK_A
            .index_of(task_a)
            .ok_or_else(|| CorpusError::UnknownLabel {
                row: 0,
                value: task_a.to_string(),
            })?;
        let b = LabelSchema::TASK_B
            .index_of(task_b)
            .ok_or_else(|| CorpusError::UnknownLabel {
                row: 0,
                value: task_b.to_string(),
            })?;
        if a == 0 && b != 0 {
            return Err(CorpusError::InconsistentLabels { row: 0 });
        }
        Ok(Self {
            id: id.into(),
            text: text.into(),
            task_a: a,
            task_b: b,
            language,
            split,
        })
    }

    pub fn label(&self, task: Task) -> usize {
        match task {
            Task::A => self.task_a,
            Task::B => self.task_b,
        }
    }
}

/// Toggles for [`normalize_text_with`]. The defaults are the usual tweet cleanup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizeOptions {
    pub replace_urls: bool,
    pub replace_mentions: bool,
    pub strip_hashtags: bool,
    pub lowercase: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            replace_urls: true,
            replace_mentions: true,
            strip_hashtags: true,
            lowercase: false,
        }
    }
}

static URL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").unwrap());
static MENTION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"@\w+").unwrap());
static HASHTAG_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"#(\w+)").unwrap());

pub fn normalize_text(raw: &str) -> String {
    normalize_text_with(raw, &NormalizeOptions::default())
}

pub fn normalize_text_with(raw: &str, opts: &NormalizeOptions) -> String {
    let mut text: String = raw.nfc().collect();
    if opts.replace_urls {
        text = URL_RE.replace_all(&text, " <url> ").into_owned();
    }
    if opts.replace_mentions {
        text = MENTION_RE.replace_all(&text, " <user> ").into_owned();
    }
    if opts.strip_hashtags {
        text = HASHTAG_RE.replace_all(&text, "$1").into_owned();
    }
    if opts.lowercase {
        text = text.to_lowercase();
    }
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads a four-column TSV with the fixed header. Every row is validated;
/// the first offending row aborts the load.
pub fn load_tsv(path: impl AsRef<Path>, language: Language, split: Split) -> Result<Vec<LabeledPost>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_tsv(&content, language, split).map_err(|e| match e {
        CorpusError::BadHeader { expected, found, .. } => CorpusError::BadHeader {
            path: path.to_path_buf(),
            expected,
            found,
        },
        other => other,
    })
}

pub fn parse_tsv(content: &str, language: Language, split: Split) -> Result<Vec<LabeledPost>> {
    let mut lines = content.lines();
    let header = lines.next().unwrap_or("").trim_end_matches('\r');
    if header != TSV_HEADER {
        return Err(CorpusError::BadHeader {
            path: PathBuf::new(),
            expected: TSV_HEADER,
            found: header.to_string(),
        });
    }
    let mut seen = HashSet::new();
    let mut posts = Vec::new();
    for (offset, line) in lines.enumerate() {
        let row = offset + 2;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(CorpusError::ColumnCount {
                row,
                found: cols.len(),
            });
        }
        let task_a = LabelSchema::TASK_A
            .index_of(cols[2])
            .ok_or_else(|| CorpusError::UnknownLabel {
                row,
                value: cols[2].to_string(),
            })?;
        let task_b = LabelSchema::TASK_B
            .index_of(cols[3])
            .ok_or_else(|| CorpusError::UnknownLabel {
                row,
                value: cols[3].to_string(),
            })?;
        if task_a == 0 && task_b != 0 {
            return Err(CorpusError::InconsistentLabels { row });
        }
        if normalize_text(cols[1]).is_empty() {
            return Err(CorpusError::EmptyText { row });
        }
        if !seen.insert(cols[0].to_string()) {
            return Err(CorpusError::DuplicateId {
                row,
                id: cols[0].to_string(),
            });
        }
        posts.push(LabeledPost {
            id: cols[0].to_string(),
            text: cols[1].to_string(),
            task_a,
            task_b,
            language,
            split,
        });
    }
    Ok(posts)
}

pub fn write_tsv(path: impl AsRef<Path>, posts: &[LabeledPost]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    writeln!(out, "{TSV_HEADER}").map_err(io_err)?;
    for p in posts {
        if p.text.contains(['\t', '\n', '\r']) {
            return Err(CorpusError::IllegalText(p.id.clone()));
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            p.id,
            p.text,
            LabelSchema::TASK_A.name(p.task_a),
            LabelSchema::TASK_B.name(p.task_b)
        )
        .map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)
}

/// Splits per class so that each class contributes `floor(fraction * n_c)`
/// members to the first part, clamped so both parts get at least one.
/// Posts keep their original relative order inside each part.
pub fn stratified_split(
    dataset: &[LabeledPost],
    fraction: f64,
    task: Task,
    seed: u64,
) -> Result<(Vec<LabeledPost>, Vec<LabeledPost>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let schema = task.schema();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); schema.len()];
    for (i, post) in dataset.iter().enumerate() {
        members[post.label(task)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = vec![false; dataset.len()];
    for (class, idx) in members.iter_mut().enumerate() {
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            return Err(CorpusError::SmallClass {
                class: schema.name(class),
                count: n,
            });
        }
        idx.shuffle(&mut rng);
        let take = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
        for &i in &idx[..take] {
            first[i] = true;
        }
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, post) in dataset.iter().enumerate() {
        if first[i] {
            a.push(post.clone());
        } else {
            b.push(post.clone());
        }
    }
    Ok((a, b))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub total: usize,
    pub sentences: BTreeMap<(Language, Split), usize>,
    pub task_a: BTreeMap<&'static str, usize>,
    pub task_b: BTreeMap<&'static str, usize>,
}

impl CorpusStats {
    pub fn count(&self, language: Language, split: Split) -> usize {
        self.sentences.get(&(language, split)).copied().unwrap_or(0)
    }
}

pub fn corpus_stats(dataset: &[LabeledPost]) -> CorpusStats {
    let mut stats = CorpusStats {
        total: dataset.len(),
        ..Default::default()
    };
    for class in LabelSchema::TASK_A.classes {
        stats.task_a.insert(class, 0);
    }
    for class in LabelSchema::TASK_B.classes {
        stats.task_b.insert(class, 0);
    }
    for p in dataset {
        *stats.sentences.entry((p.language, p.split)).or_default() += 1;
        *stats.task_a.entry(LabelSchema::TASK_A.name(p.task_a)).or_default() += 1;
        *stats.task_b.entry(LabelSchema::TASK_B.name(p.task_b)).or_default() += 1;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(rows: &[&str]) -> Result<Vec<LabeledPost>> {
        let mut s = String::from(TSV_HEADER);
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        parse_tsv(&s, Language::English, Split::Train)
    }

    fn post(id: usize, a: &str) -> LabeledPost {
        let b = if a == "NOT" { "NONE" } else { "OFFN" };
        LabeledPost::new(format!("p{id}"), "x", a, b, Language::English, Split::Train).unwrap()
    }

    #[test]
    fn schemas_are_fixed() {
        assert_eq!(LabelSchema::TASK_A.classes, &["NOT", "HOF"]);
        assert_eq!(LabelSchema::TASK_B.classes, &["NONE", "HATE", "OFFN", "PRFN"]);
        assert_eq!(LabelSchema::TASK_B.index_of("prof"), Some(3));
        assert_eq!(LabelSchema::TASK_A.index_of("hof"), Some(1));
    }

    #[test]
    fn well_formed_row() {
        let posts = parse(&["t1\tyou are lovely\tNOT\tNONE"]).unwrap();
        assert_eq!(posts.len(), 1);
        assert_eq!(posts[0].task_a, 0);
        assert_eq!(posts[0].task_b, 0);
        assert_eq!(posts[0].text, "you are lovely");
    }

    #[test]
    fn lowercase_labels_accepted() {
        let posts = parse(&["t1\tugh\thof\tprof"]).unwrap();
        assert_eq!((posts[0].task_a, posts[0].task_b), (1, 3));
    }

    #[test]
    fn inconsistent_labels_rejected() {
        let err = parse(&["t1\tok\tNOT\tNONE", "t2\tbad\tNOT\tHATE"]).unwrap_err();
        assert!(matches!(err, CorpusError::InconsistentLabels { row: 3 }));
        assert!(err.to_string().contains("inconsistent labels at row 3"));
    }

    #[test]
    fn column_count_checked() {
        let err = parse(&["t1\tok\tNOT"]).unwrap_err();
        assert!(err.to_string().contains("expected 4 columns"));
        assert!(parse(&["t1\tok\tNOT\tNONE\textra"]).is_err());
    }

    #[test]
    fn unknown_label_and_duplicates() {
        assert!(matches!(
            parse(&["t1\tok\tMAYBE\tNONE"]).unwrap_err(),
            CorpusError::UnknownLabel { row: 2, .. }
        ));
        assert!(matches!(
            parse(&["t1\tok\tNOT\tNONE", "t1\tok\tNOT\tNONE"]).unwrap_err(),
            CorpusError::DuplicateId { row: 3, .. }
        ));
    }

    #[test]
    fn header_required() {
        let err = parse_tsv("id\ttext\ta\tb\n", Language::English, Split::Train).unwrap_err();
        assert!(matches!(err, CorpusError::BadHeader { .. }));
    }

    #[test]
    fn missing_file() {
        let err = load_tsv("/definitely/not/here.tsv", Language::English, Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::MissingFile(_)));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_text("@abc you   rock"), "<user> you rock");
        assert_eq!(normalize_text("see https://x.y/z now"), "see <url> now");
        assert_eq!(normalize_text("#GoodDay"), "GoodDay");
        assert_eq!(normalize_text("  Keep CASE  "), "Keep CASE");
        assert_eq!(normalize_text(""), "");
        // NFC: e + combining acute becomes a single code point
        assert_eq!(normalize_text("cafe\u{301}"), "caf\u{e9}");
        let lower = NormalizeOptions {
            lowercase: true,
            ..Default::default()
        };
        assert_eq!(normalize_text_with("Hi #There", &lower), "hi there");
    }

    #[test]
    fn stratified_half_split() {
        let data: Vec<_> = (0..10).map(|i| post(i, if i < 6 { "NOT" } else { "HOF" })).collect();
        let (a, b) = stratified_split(&data, 0.5, Task::A, 13).unwrap();
        assert_eq!(a.iter().filter(|p| p.task_a == 0).count(), 3);
        assert_eq!(a.iter().filter(|p| p.task_a == 1).count(), 2);
        assert_eq!(a.len() + b.len(), 10);
        let again = stratified_split(&data, 0.5, Task::A, 13).unwrap();
        assert_eq!(again.0, a);
    }

    #[test]
    fn stratified_extreme_fraction_keeps_both_sides() {
        let data: Vec<_> = (0..10).map(|i| post(i, if i < 6 { "NOT" } else { "HOF" })).collect();
        let (_, b) = stratified_split(&data, 0.999, Task::A, 1).unwrap();
        assert_eq!(b.iter().filter(|p| p.task_a == 0).count(), 1);
        assert_eq!(b.iter().filter(|p| p.task_a == 1).count(), 1);
    }

    #[test]
    fn stratified_rejects_singletons() {
        let data = vec![post(0, "NOT"), post(1, "NOT"), post(2, "HOF")];
        assert!(matches!(
            stratified_split(&data, 0.5, Task::A, 0).unwrap_err(),
            CorpusError::SmallClass { class: "HOF", count: 1 }
        ));
        assert!(stratified_split(&data, 1.0, Task::A, 0).is_err());
    }

    #[test]
    fn stats_counts() {
        assert_eq!(corpus_stats(&[]).total, 0);
        assert!(corpus_stats(&[]).task_a.values().all(|&c| c == 0));
        let data = vec![post(0, "NOT"), post(1, "NOT"), post(2, "HOF")];
        let s = corpus_stats(&data);
        assert_eq!(s.task_a["NOT"], 2);
        assert_eq!(s.task_a["HOF"], 1);
        assert_eq!(s.task_b["NONE"], 2);
        assert_eq!(s.count(Language::English, Split::Train), 3);
    }
}
