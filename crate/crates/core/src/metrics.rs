//! Confusion matrices, macro F1 / accuracy, and report rendering.

use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::LabelSchema;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{gold} gold labels but {predicted} predictions")]
    LengthMismatch { gold: usize, predicted: usize },
    #[error("label index {0} outside the schema")]
    UnknownLabel(usize),
    #[error("cannot evaluate an empty confusion matrix")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Rows are gold classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub schema: LabelSchema,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
}

pub fn confusion(gold: &[usize], predicted: &[usize], schema: LabelSchema) -> Result<ConfusionMatrix> {
    if gold.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            predicted: predicted.len(),
        });
    }
    let k = schema.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&g, &p) in gold.iter().zip(predicted) {
        if g >= k {
            return Err(MetricsError::UnknownLabel(g));
        }
        if p >= k {
            return Err(MetricsError::UnknownLabel(p));
        }
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix { schema, counts })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class P/R/F1 with zero-division mapped to 0; macro F1 averages over
/// every schema class, absent ones included.
pub fn evaluate(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let k = cm.counts.len();
    let per_class: Vec<ClassScores> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let col: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
            let row: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, col);
            let recall = ratio(tp, row);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores { precision, recall, f1 }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / k as f64;
    Ok(EvalReport {
        macro_f1,
        accuracy: ratio(cm.trace(), total),
        per_class,
        confusion: cm.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Plain,
    Csv,
}

/// `0.8833` -> `88.33`
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

pub fn render(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Plain => render_plain(report),
    }
}

fn render_csv(report: &EvalReport) -> String {
    let mut s = String::from("class,precision,recall,f1\n");
    for (c, sc) in report.per_class.iter().enumerate() {
        writeln!(
            s,
            "{},{},{},{}",
            report.confusion.schema.name(c),
            percent(sc.precision),
            percent(sc.recall),
            percent(sc.f1)
        )
        .unwrap();
    }
    writeln!(s, "macro_f1,,,{}", percent(report.macro_f1)).unwrap();
    writeln!(s, "accuracy,,,{}", percent(report.accuracy)).unwrap();
    s
}

fn render_plain(report: &EvalReport) -> String {
    let names = report.confusion.schema.classes;
    let w = names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
    let mut s = String::new();
    writeln!(s, "macro F1  {}%", percent(report.macro_f1)).unwrap();
    writeln!(s, "accuracy  {}%", percent(report.accuracy)).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "{:<w$}  {:>9}  {:>9}  {:>9}", "class", "precision", "recall", "f1").unwrap();
    for (name, sc) in names.iter().zip(&report.per_class) {
        writeln!(
            s,
            "{:<w$}  {:>9}  {:>9}  {:>9}",
            name,
            format!("{}%", percent(sc.precision)),
            format!("{}%", percent(sc.recall)),
            format!("{}%", percent(sc.f1))
        )
        .unwrap();
    }
    writeln!(s).unwrap();
    s.push_str(&render_confusion_plain(&report.confusion));
    s
}

pub fn render_confusion_plain(cm: &ConfusionMatrix) -> String {
    let names = cm.schema.classes;
    let cell = cm
        .counts
        .iter()
        .flatten()
        .map(|c| c.to_string().len())
        .chain(names.iter().map(|n| n.len()))
        .max()
        .unwrap_or(1)
        .max(9);
    let mut s = format!("{:<cell$}", "gold\\pred");
    for n in names {
        write!(s, "  {n:>cell$}").unwrap();
    }
    s.push('\n');
    for (name, row) in names.iter().zip(&cm.counts) {
        write!(s, "{name:<cell$}").unwrap();
        for c in row {
            write!(s, "  {c:>cell$}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// (K+1) x (K+1) labeled grid.
pub fn render_confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut s = String::from("gold\\pred");
    for n in cm.schema.classes {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for (name, row) in cm.schema.classes.iter().zip(&cm.counts) {
        s.push_str(name);
        for c in row {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        let schema = if counts.len() == 2 {
            LabelSchema::TASK_A
        } else {
            LabelSchema::TASK_B
        };
        ConfusionMatrix { schema, counts }
    }

    #[test]
    fn diagonal_when_perfect() {
        let g = [0, 1, 1, 0, 1];
        let m = confusion(&g, &g, LabelSchema::TASK_A).unwrap();
        assert_eq!(m.counts, vec![vec![2, 0], vec![0, 3]]);
        let r = evaluate(&m).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn single_error_cell() {
        let m = confusion(&[0], &[1], LabelSchema::TASK_A).unwrap();
        assert_eq!(m.counts[0][1], 1);
    }

    #[test]
    fn worked_binary_example() {
        // NOT: P=50/55 R=50/60 F1=0.869565; HOF: P=35/45 R=35/40 F1=0.823529
        let r = evaluate(&cm(vec![vec![50, 10], vec![5, 35]])).unwrap();
        assert!((r.accuracy - 0.85).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 20.0 / 23.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 14.0 / 17.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.846_547_314_578_005_1).abs() < 1e-12);
    }

    #[test]
    fn absent_class_counts_in_macro_mean() {
        let r = evaluate(&cm(vec![
            vec![5, 0, 0, 0],
            vec![0, 5, 0, 0],
            vec![0, 0, 5, 0],
            vec![0, 0, 0, 0],
        ]))
        .unwrap();
        assert_eq!(r.per_class[3].f1, 0.0);
        assert!((r.macro_f1 - 0.75).abs() < 1e-12);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            confusion(&[0, 1], &[0], LabelSchema::TASK_A).unwrap_err(),
            MetricsError::LengthMismatch { gold: 2, predicted: 1 }
        );
        assert_eq!(
            confusion(&[0], &[2], LabelSchema::TASK_A).unwrap_err(),
            MetricsError::UnknownLabel(2)
        );
        assert_eq!(evaluate(&cm(vec![vec![0, 0], vec![0, 0]])).unwrap_err(), MetricsError::Empty);
    }

    #[test]
    fn percentage_rendering() {
        assert_eq!(percent(0.8833), "88.33");
        let r = evaluate(&cm(vec![vec![50, 10], vec![5, 35]])).unwrap();
        let plain = render(&r, ReportFormat::Plain);
        assert!(plain.contains("macro F1  84.65%"));
        assert!(plain.contains("accuracy  85.00%"));
        let csv = render(&r, ReportFormat::Csv);
        assert_eq!(
            csv,
            "class,precision,recall,f1\nNOT,90.91,83.33,86.96\nHOF,77.78,87.50,82.35\nmacro_f1,,,84.65\naccuracy,,,85.00\n"
        );
        assert_eq!(render_confusion_csv(&r.confusion), "gold\\pred,NOT,HOF\nNOT,50,10\nHOF,5,35\n");
    }

    #[test]
    fn csv_reparses_to_same_numbers() {
        let r = evaluate(&cm(vec![vec![3, 1, 0, 2], vec![0, 4, 1, 0], vec![2, 0, 5, 1], vec![0, 0, 1, 6]])).unwrap();
        let csv = render(&r, ReportFormat::Csv);
        for (line, sc) in csv.lines().skip(1).zip(&r.per_class) {
            let cols: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            assert_eq!(cols[2], percent(sc.f1).parse::<f64>().unwrap());
        }
        let macro_line = csv.lines().find(|l| l.starts_with("macro_f1")).unwrap();
        let v: f64 = macro_line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((v / 100.0 - r.macro_f1).abs() < 5e-5);
    }
}
