//! Ablation matrix: train the same seed across feature, permutation,
//! correction, context-length and window-length rows, and aggregate one
//! comparison table.

use std::io::Write;
use std::path::Path;

use super::config::RunConfig;
use super::metrics::MetricsRecord;
use super::train::train;
use crate::error::{Error, Result};
use crate::fusion::AblationSet;

#[derive(Debug, Clone)]
pub enum RowChange {
    None,
    Ablation(AblationSet),
    ContextN(usize),
    Frames(usize),
}

#[derive(Debug, Clone)]
pub struct AblateRow {
    pub name: String,
    pub change: RowChange,
}

impl AblateRow {
    fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match &self.change {
            RowChange::None => {}
            RowChange::Ablation(set) => cfg.ablation = *set,
            RowChange::ContextN(n) => cfg.context_n = *n,
            RowChange::Frames(t) => cfg.frames = *t,
        }
        cfg.out_dir = base.out_dir.join(&self.name);
        cfg
    }
}

/// The standard matrix: feature ablations, permutation and correction
/// switches, the context-length sweep and the frame-window sweep.
pub fn default_rows() -> Vec<AblateRow> {
    let mut rows = vec![AblateRow { name: "full".into(), change: RowChange::None }];
    for (name, set) in [
        ("no-visual", AblationSet { no_visual: true, ..Default::default() }),
        ("no-gesture", AblationSet { no_gesture: true, ..Default::default() }),
        ("no-gaze", AblationSet { no_gaze: true, ..Default::default() }),
        ("no-permutation", AblationSet { no_permutation: true, ..Default::default() }),
        ("no-correction", AblationSet { no_correction: true, ..Default::default() }),
    ] {
        rows.push(AblateRow { name: name.into(), change: RowChange::Ablation(set) });
    }
    for n in [1usize, 3, 5, 7, 9] {
        rows.push(AblateRow { name: format!("context-n{n}"), change: RowChange::ContextN(n) });
    }
    // 1 s / 3 s / 5 s / 7 s of video at the 0.4 s interval.
    for t in [3usize, 8, 13, 18] {
        rows.push(AblateRow { name: format!("frames-t{t}"), change: RowChange::Frames(t) });
    }
    rows
}

/// Select rows by name from the default matrix.
pub fn rows_by_name(names: &[String]) -> Result<Vec<AblateRow>> {
    let all = default_rows();
    let mut picked = Vec::new();
    for name in names {
        let row = all
            .iter()
            .find(|r| &r.name == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation row '{name}'")))?;
        picked.push(row.clone());
    }
    Ok(picked)
}

/// Train every row with the shared seed; rows are paired comparisons because
/// all randomness flows through named streams keyed by that seed.
pub fn ablate(base: &RunConfig, rows: &[AblateRow]) -> Result<Vec<(String, MetricsRecord)>> {
    let mut results = Vec::new();
    for row in rows {
        let cfg = row.apply(base);
        let outcome = train(&cfg)?;
        let best = outcome
            .test_records()
            .iter()
            .max_by(|a, b| a.accuracy.partial_cmp(&b.accuracy).unwrap())
            .map(|r| (*r).clone())
            .ok_or_else(|| Error::Data("training produced no evaluation records".to_string()))?;
        results.push((row.name.clone(), best));
    }
    Ok(results)
}

/// One table mirroring the comparison layout: row name, accuracy, macro
/// precision/recall, best epoch.
pub fn write_table(results: &[(String, MetricsRecord)], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "row,task,best_epoch,n_eval,accuracy,macro_precision,macro_recall")
        .map_err(|e| Error::io(path, e))?;
    for (name, rec) in results {
        writeln!(
            f,
            "{name},{},{},{},{:.12},{:.12},{:.12}",
            rec.task, rec.epoch, rec.n_eval, rec.accuracy, rec.macro_precision, rec.macro_recall
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
