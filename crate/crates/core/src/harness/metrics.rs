//! Confusion-matrix metrics and the append-only metrics CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::datamodel::TaskKind;
use crate::error::{Error, Result};
use crate::presets::MAX_PLAYERS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<usize>>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { counts: vec![vec![0; classes]; classes], classes }
    }

    pub fn record(&mut self, gold: usize, predicted: usize) {
        self.counts[gold][predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gold: usize, predicted: usize) -> usize {
        self.counts[gold][predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|row| row.iter().sum::<usize>()).sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.trace() as f64 / total as f64
    }

    fn gold_support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    fn predicted_count(&self, class: usize) -> usize {
        (0..self.classes).map(|g| self.counts[g][class]).sum()
    }

    /// Macro average over classes with nonzero gold support; a supported
    /// class never predicted contributes precision 0.
    pub fn macro_precision(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..self.classes {
            if self.gold_support(c) == 0 {
                continue;
            }
            let predicted = self.predicted_count(c);
            sum += if predicted == 0 { 0.0 } else { self.counts[c][c] as f64 / predicted as f64 };
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn macro_recall(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..self.classes {
            let support = self.gold_support(c);
            if support == 0 {
                continue;
            }
            sum += self.counts[c][c] as f64 / support as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Accuracy over instances whose gold is not `excluded`.
    pub fn accuracy_excluding(&self, excluded: usize) -> f64 {
        let mut correct = 0;
        let mut total = 0;
        for gold in 0..self.classes {
            if gold == excluded {
                continue;
            }
            correct += self.counts[gold][gold];
            total += self.gold_support(gold);
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// `rows` separated by ';', cells by '|'.
    pub fn to_compact(&self) -> String {
        self.counts
            .iter()
            .map(|row| row.iter().map(usize::to_string).collect::<Vec<_>>().join("|"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn from_compact(s: &str, classes: usize) -> Result<ConfusionMatrix> {
        let mut m = ConfusionMatrix::new(classes);
        for (g, row) in s.split(';').enumerate() {
            for (p, cell) in row.split('|').enumerate() {
                if g >= classes || p >= classes {
                    return Err(Error::Data("confusion matrix larger than class count".into()));
                }
                m.counts[g][p] = cell
                    .parse()
                    .map_err(|_| Error::Data(format!("bad confusion cell '{cell}'")))?;
            }
        }
        Ok(m)
    }
}

/// Metrics for one evaluation (or the train-loss row of one epoch).
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub task: TaskKind,
    pub n_eval: usize,
    pub n_unknown: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// STI only: accuracy over instances whose gold is a player slot.
    pub accuracy_without_everyone: Option<f64>,
    pub confusion: ConfusionMatrix,
    /// In-memory only; never serialized, so identical runs write identical
    /// CSV bytes.
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn from_confusion(
        epoch: usize,
        split: &str,
        task: TaskKind,
        confusion: ConfusionMatrix,
        loss: f64,
        n_unknown: usize,
        wall_seconds: f64,
    ) -> Self {
        let accuracy = confusion.accuracy();
        let macro_precision = confusion.macro_precision();
        let macro_recall = confusion.macro_recall();
        let accuracy_without_everyone = match task {
            TaskKind::Sti => Some(confusion.accuracy_excluding(MAX_PLAYERS)),
            _ => None,
        };
        MetricsRecord {
            epoch,
            split: split.to_string(),
            task,
            n_eval: confusion.total(),
            n_unknown,
            loss,
            accuracy,
            macro_precision,
            macro_recall,
            accuracy_without_everyone,
            confusion,
            wall_seconds,
        }
    }

    pub fn csv_header() -> &'static str {
        "epoch,split,task,n_eval,n_unknown,loss,accuracy,macro_precision,macro_recall,accuracy_wo_everyone,confusion"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.12},{:.12},{:.12},{:.12},{},{}",
            self.epoch,
            self.split,
            self.task,
            self.n_eval,
            self.n_unknown,
            self.loss,
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.accuracy_without_everyone.map(|a| format!("{a:.12}")).unwrap_or_default(),
            self.confusion.to_compact(),
        )
    }
}

/// Append-only CSV writer with a fixed schema.
pub struct MetricsCsv {
    path: PathBuf,
}

impl MetricsCsv {
    pub fn create(path: &Path) -> Result<MetricsCsv> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", MetricsRecord::csv_header()).map_err(|e| Error::io(path, e))?;
        Ok(MetricsCsv { path: path.to_path_buf() })
    }

    pub fn append(&self, record: &MetricsRecord) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", record.to_csv_row()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parse rows written by [`MetricsCsv`]; used by the ablation aggregator.
pub fn read_metrics_csv(path: &Path, classes: usize) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != MetricsRecord::csv_header() {
                return Err(Error::Data(format!("{}: unexpected CSV header", path.display())));
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 11 {
            return Err(Error::Data(format!("{}: bad row '{line}'", path.display())));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Data(format!("bad float '{s}'")))
        };
        let confusion = ConfusionMatrix::from_compact(cells[10], classes)?;
        rows.push(MetricsRecord {
            epoch: cells[0].parse().map_err(|_| Error::Data("bad epoch".into()))?,
            split: cells[1].to_string(),
            task: cells[2].parse()?,
            n_eval: cells[3].parse().map_err(|_| Error::Data("bad n_eval".into()))?,
            n_unknown: cells[4].parse().map_err(|_| Error::Data("bad n_unknown".into()))?,
            loss: parse_f(cells[5])?,
            accuracy: parse_f(cells[6])?,
            macro_precision: parse_f(cells[7])?,
            macro_recall: parse_f(cells[8])?,
            accuracy_without_everyone: if cells[9].is_empty() {
                None
            } else {
                Some(parse_f(cells[9])?)
            },
            confusion,
            wall_seconds: 0.0,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor_scores_one_everywhere() {
        let mut m = ConfusionMatrix::new(5);
        for c in 0..5 {
            for _ in 0..10 {
                m.record(c, c);
            }
        }
        assert_eq!(m.accuracy(), 1.0);
        assert_eq!(m.macro_precision(), 1.0);
        assert_eq!(m.macro_recall(), 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let mut m = ConfusionMatrix::new(5);
        for gold in 0..5 {
            for _ in 0..10 {
                m.record(gold, 0);
            }
        }
        assert!((m.accuracy() - 0.2).abs() < 1e-12);
        assert!((m.macro_recall() - 0.2).abs() < 1e-12);
        // Only class 0 is ever predicted; its precision is 0.2, others 0.
        assert!((m.macro_precision() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn zero_support_classes_are_excluded_from_macros() {
        let mut m = ConfusionMatrix::new(4);
        m.record(0, 0);
        m.record(1, 0);
        // Classes 2 and 3 never appear as gold.
        assert!((m.macro_recall() - 0.5).abs() < 1e-12);
        assert!((m.macro_precision() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn accuracy_equals_trace_over_total() {
        let mut m = ConfusionMatrix::new(3);
        m.record(0, 0);
        m.record(0, 1);
        m.record(1, 1);
        m.record(2, 0);
        assert_eq!(m.trace(), 2);
        assert_eq!(m.total(), 4);
        assert!((m.accuracy() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let csv = MetricsCsv::create(&path).unwrap();
        let mut confusion = ConfusionMatrix::new(7);
        confusion.record(0, 0);
        confusion.record(6, 2);
        let rec = MetricsRecord::from_confusion(3, "test", TaskKind::Sti, confusion, 1.25, 4, 9.0);
        csv.append(&rec).unwrap();
        csv.append(&rec).unwrap();
        let rows = read_metrics_csv(&path, 7).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].epoch, 3);
        assert_eq!(rows[1].n_unknown, 4);
        assert_eq!(rows[1].confusion, rec.confusion);
        assert_eq!(rows[1].accuracy_without_everyone, rec.accuracy_without_everyone);
    }

    #[test]
    fn sti_reports_accuracy_without_everyone() {
        let mut m = ConfusionMatrix::new(7);
        m.record(0, 0);
        m.record(1, 1);
        m.record(6, 0); // EVERYONE missed
        let rec = MetricsRecord::from_confusion(0, "test", TaskKind::Sti, m, 0.0, 0, 0.0);
        assert!((rec.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rec.accuracy_without_everyone, Some(1.0));
    }
}
