//! `refero` command line: corpus generation, training, evaluation, the
//! ablation matrix, gradient checks and annotation-agreement scoring.
//!
//! Exit codes: 0 success, 1 failed check (gradcheck/agreement), 2 config
//! error, 3 data error, 4 numeric failure.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use refero::corpus::{self, ALPHA_RELIABILITY_THRESHOLD};
use refero::datamodel::TaskKind;
use refero::error::{Error, Result};
use refero::fusion::AblationSet;
use refero::harness::{self, GenRunConfig, RunConfig};

#[derive(Parser)]
#[command(name = "refero", version, about = "Referent resolution from dialogue and pose keypoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by train/eval/ablate; each overrides the config file.
#[derive(Args, Debug)]
struct RunOpts {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task: sti | pcr | mpp.
    #[arg(long)]
    task: Option<String>,
    /// Model preset: desk | paper.
    #[arg(long)]
    preset: Option<String>,
    /// Run seed (all randomness derives from it).
    #[arg(long)]
    seed: Option<u64>,
    /// Context utterances on each side of the target.
    #[arg(long, value_name = "N")]
    context_n: Option<usize>,
    /// Keypoint frames per window.
    #[arg(long, value_name = "T")]
    frames: Option<usize>,
    /// Comma list: no-visual,no-gesture,no-gaze,no-permutation,no-correction.
    #[arg(long)]
    ablation: Option<String>,
    /// Corpus directory (session JSON files plus manifest.json).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

impl RunOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut map = match &self.config {
            Some(path) => harness::parse_kv_file(path)?,
            None => BTreeMap::new(),
        };
        if let Some(task) = &self.task {
            map.insert("task".into(), task.clone());
        }
        if let Some(seed) = self.seed {
            map.insert("seed".into(), seed.to_string());
        }
        if let Some(preset) = &self.preset {
            map.insert("preset".into(), preset.clone());
        }
        let mut cfg = RunConfig::from_kv(&map)?;
        if let Some(n) = self.context_n {
            cfg.context_n = n;
        }
        if let Some(t) = self.frames {
            cfg.frames = t;
        }
        if let Some(list) = &self.ablation {
            cfg.ablation = AblationSet::parse(list)?;
        }
        if let Some(dir) = &self.corpus {
            cfg.corpus_dir = dir.clone();
        }
        if let Some(dir) = &self.out {
            cfg.out_dir = dir.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a generator config file.
    Gen {
        /// Flat key=value generator config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of sessions (overrides the config file).
        #[arg(long)]
        sessions: Option<usize>,
        /// Output directory for session JSON files and manifest.json.
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Train a model and write metrics, vocabulary and the best checkpoint.
    Train(RunOpts),
    /// Evaluate a checkpoint on the corpus' held-out split.
    Eval {
        #[command(flatten)]
        opts: RunOpts,
        /// Checkpoint path (default: <out>/checkpoint.rfo).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the ablation matrix and aggregate one comparison table.
    Ablate {
        #[command(flatten)]
        opts: RunOpts,
        /// Comma list of row names (default: the full matrix).
        #[arg(long)]
        rows: Option<String>,
    },
    /// Check every tensor primitive and the composed model against finite
    /// differences.
    Gradcheck,
    /// Krippendorff's alpha over a ratings CSV (items x annotators).
    Agreement {
        /// CSV file: one row per item, one column per annotator, empty cells
        /// for missing ratings, no header.
        ratings: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { config, seed, sessions, out } => {
            let mut map = match &config {
                Some(path) => harness::parse_kv_file(path)?,
                None => BTreeMap::new(),
            };
            if let Some(seed) = seed {
                map.insert("seed".into(), seed.to_string());
            }
            if let Some(sessions) = sessions {
                map.insert("sessions".into(), sessions.to_string());
            }
            let GenRunConfig { gen, sessions } = GenRunConfig::from_kv(&map)?;
            let manifest = corpus::generate_corpus_to_dir(&gen, sessions, &out)?;
            let labels: usize = manifest.sessions.iter().map(|s| s.labels.len()).sum();
            println!(
                "wrote {} sessions ({} gold labels) to {}",
                manifest.sessions.len(),
                labels,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(opts) => {
            let cfg = opts.resolve()?;
            let outcome = harness::train(&cfg)?;
            for record in outcome.test_records() {
                println!(
                    "epoch {:>3}  acc {:.4}  macro-p {:.4}  macro-r {:.4}  loss {:.4}  ({:.1}s)",
                    record.epoch,
                    record.accuracy,
                    record.macro_precision,
                    record.macro_recall,
                    record.loss,
                    record.wall_seconds
                );
            }
            println!(
                "best accuracy {:.4} at epoch {}; checkpoint {}",
                outcome.best_accuracy,
                outcome.best_epoch,
                outcome.checkpoint_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { opts, checkpoint } => {
            let cfg = opts.resolve()?;
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint.rfo"));
            let record = harness::train::evaluate_run(&cfg, &path)?;
            println!(
                "accuracy {:.4}  macro-p {:.4}  macro-r {:.4}  loss {:.4}  over {} instances ({} unknown excluded)",
                record.accuracy,
                record.macro_precision,
                record.macro_recall,
                record.loss,
                record.n_eval,
                record.n_unknown
            );
            if let Some(acc) = record.accuracy_without_everyone {
                println!("accuracy without EVERYONE {acc:.4}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { opts, rows } => {
            let cfg = opts.resolve()?;
            let rows = match rows {
                Some(list) => harness::ablate::rows_by_name(
                    &list.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>(),
                )?,
                None => harness::default_rows(),
            };
            let results = harness::ablate(&cfg, &rows)?;
            let table = cfg.out_dir.join("ablate.csv");
            harness::ablate::write_table(&results, &table)?;
            for (name, rec) in &results {
                println!("{name:<16} acc {:.4}  (epoch {})", rec.accuracy, rec.epoch);
            }
            println!("table written to {}", table.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let report = harness::run_gradcheck()?;
            for r in report.primitives.iter().chain(report.end_to_end.iter()) {
                println!("{r}");
            }
            println!("elapsed {:.2?}", report.elapsed);
            if report.all_pass() {
                println!("gradcheck: all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck: FAILURES above");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Agreement { ratings } => {
            let matrix = corpus::read_ratings_csv(&ratings)?;
            let alpha = corpus::krippendorff_alpha(&matrix)?;
            let pass = alpha > ALPHA_RELIABILITY_THRESHOLD;
            println!(
                "krippendorff alpha = {alpha:.6} over {} items x {} annotators",
                matrix.items(),
                matrix.annotators()
            );
            println!(
                "{} (reliability threshold {ALPHA_RELIABILITY_THRESHOLD})",
                if pass { "PASS" } else { "FAIL" }
            );
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_spec_flags() {
        let cli = Cli::try_parse_from([
            "refero", "train", "--task", "sti", "--preset", "desk", "--seed", "7",
            "--context-n", "3", "--frames", "8", "--ablation", "no-visual", "--out", "runs/x",
        ])
        .unwrap();
        let Command::Train(opts) = cli.command else { panic!("expected train") };
        let cfg = opts.resolve().unwrap();
        assert_eq!(cfg.task, TaskKind::Sti);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.context_n, 3);
        assert!(cfg.ablation.no_visual);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "task = pcr\nseed = 1\nepochs = 2\n").unwrap();
        let cli = Cli::try_parse_from([
            "refero", "train", "--config", path.to_str().unwrap(), "--seed", "99",
        ])
        .unwrap();
        let Command::Train(opts) = cli.command else { panic!("expected train") };
        let cfg = opts.resolve().unwrap();
        assert_eq!(cfg.task, TaskKind::Pcr);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.epochs, 2);
    }

    #[test]
    fn missing_task_is_a_config_error() {
        let cli = Cli::try_parse_from(["refero", "train", "--seed", "1"]).unwrap();
        let Command::Train(opts) = cli.command else { panic!("expected train") };
        let err = opts.resolve().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
