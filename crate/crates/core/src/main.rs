use std::io::{self, BufRead};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use textguard_core::corpus::Task;
use textguard_core::experiment::{
    parse_override, run_compare, run_eval, run_predict, run_synth, run_tokenizer_train, run_train, ExperimentConfig,
    ExperimentError, SynthKind,
};
use textguard_core::metrics::{percent, EvalReport};

#[derive(Parser)]
#[command(name = "textguard", version, about = "Offensive-content classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// svm-tfidf, bilstm-svm or transformer.
    #[arg(long)]
    model: Option<String>,
    /// A (HOF/NOT) or B (HATE/OFFN/PRFN/NONE).
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding train.tsv / test.tsv; defaults to $TEXTGUARD_DATA.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        let flag = |k: &str, v: Option<String>| v.map(|v| (k.to_string(), v));
        let flags = [
            flag("model", self.model.clone()),
            flag("task", self.task.clone()),
            flag("seed", self.seed.map(|s| s.to_string())),
            flag("out", self.out.as_ref().map(|p| p.display().to_string())),
            flag("data", self.data.as_ref().map(|p| p.display().to_string())),
        ];
        cfg.apply_all(&flags.into_iter().flatten().collect::<Vec<_>>())?;
        for s in &self.set {
            let (k, v) = parse_override(s)?;
            cfg.apply(&k, &v)?;
        }
        Ok(cfg.with_env_data())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a BPE vocabulary on the training split.
    TokenizerTrain(Common),
    /// Train one model and evaluate it.
    Train(Common),
    /// Evaluate a trained run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Test files as `[lang:]path`; defaults to the run's configured test data.
        #[arg(long)]
        test: Vec<String>,
        #[arg(long)]
        task: Option<String>,
        /// Where to write the reports; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify texts given as arguments, or one per line on stdin.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        texts: Vec<String>,
    },
    /// Train all three models on both tasks and print the comparison table.
    Compare(Common),
    /// Write a generated corpus (overfit, separable or negation).
    Synth {
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        /// Post count for the negation corpus.
        #[arg(long, default_value_t = 600)]
        size: usize,
    },
}

fn print_report(report: &EvalReport) {
    println!("macro F1  {}%", percent(report.macro_f1));
    println!("accuracy  {}%", percent(report.accuracy));
}

fn parse_task(s: Option<&String>) -> Result<Option<Task>, ExperimentError> {
    s.map(|t| t.parse::<Task>().map_err(|e| ExperimentError::Usage(e.to_string())))
        .transpose()
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::TokenizerTrain(c) => {
            let path = run_tokenizer_train(&c.resolve()?)?;
            println!("wrote {}", path.display());
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let report = run_train(&cfg)?;
            println!("{} task {} -> {}", cfg.model.name(), cfg.task, cfg.out_dir()?.display());
            print_report(&report);
        }
        Command::Eval { run, test, task, out } => {
            let report = run_eval(&run, &test, parse_task(task.as_ref())?, out.as_deref())?;
            print_report(&report);
        }
        Command::Predict { run, input, mut texts } => {
            if let Some(p) = input {
                let text = std::fs::read_to_string(&p).map_err(|e| match e.kind() {
                    io::ErrorKind::NotFound => ExperimentError::MissingPath(p.clone()),
                    _ => ExperimentError::Usage(format!("{}: {e}", p.display())),
                })?;
                texts.extend(text.lines().map(str::to_string));
            } else if texts.is_empty() {
                for line in io::stdin().lock().lines() {
                    texts.push(line.map_err(|e| ExperimentError::Usage(format!("stdin: {e}")))?);
                }
            }
            for (text, label) in texts.iter().zip(run_predict(&run, &texts)?) {
                println!("{label}\t{text}");
            }
        }
        Command::Compare(c) => {
            let cfg = c.resolve()?;
            let table = run_compare(&cfg)?;
            print!("{}", table.to_plain());
        }
        Command::Synth { kind, out, seed, size } => {
            let kind = match kind.as_str() {
                "overfit" => SynthKind::Overfit,
                "separable" => SynthKind::Separable,
                "negation" => SynthKind::Negation { size },
                other => {
                    return Err(ExperimentError::Usage(format!(
                        "unknown corpus `{other}` (overfit, separable, negation)"
                    )))
                }
            };
            for p in run_synth(kind, seed, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
