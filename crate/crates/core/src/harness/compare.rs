//! Side-by-side comparison of finished runs against a baseline run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{read_curves, relative_delta, CurvePoint, Delta, TaskMetrics};

use super::run::{read_report, RunReport, CURVES_FILE};

pub const CONVERGENCE_SPLIT: &str = "val_cs";

/// One metric cell; `value` is `None` when the run has no such task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub delta: Option<Delta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub dir: PathBuf,
    pub cells: BTreeMap<String, Cell>,
    /// First evaluated iteration whose CS validation loss is at or below
    /// the threshold; `None` if never reached.
    pub iterations_to_threshold: Option<u64>,
    pub final_val_cs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    /// `cer` for transducer runs, `perplexity` for language models.
    pub metric: String,
    pub threshold: f64,
    pub tasks: Vec<String>,
    pub rows: Vec<RunRow>,
}

/// Error rate when present, otherwise perplexity.
pub fn headline(m: &TaskMetrics) -> Option<f64> {
    m.cer.or(m.perplexity)
}

fn cell_value(r: &RunReport, task: &str) -> Option<f64> {
    r.eval.tasks.get(task).and_then(headline)
}

/// Loss series of `split` in iteration order.
pub fn val_series(points: &[CurvePoint], split: &str) -> Vec<(u64, f64)> {
    let mut v: Vec<(u64, f64)> = points
        .iter()
        .filter(|p| p.split == split)
        .map(|p| (p.iteration, p.loss))
        .collect();
    v.sort_by_key(|p| p.0);
    v
}

/// First iteration at which the series reaches `threshold`.
pub fn iterations_to_threshold(series: &[(u64, f64)], threshold: f64) -> Option<u64> {
    series.iter().find(|(_, l)| *l <= threshold).map(|(i, _)| *i)
}

/// Loss of the series at `iteration`, or its last point before it.
pub fn loss_at(series: &[(u64, f64)], iteration: u64) -> Option<f64> {
    series.iter().take_while(|(i, _)| *i <= iteration).last().map(|(_, l)| *l)
}

fn check_comparable(base: &RunReport, other: &RunReport, dir: &Path) -> Result<()> {
    for (k, v) in &other.test_checksums {
        if let Some(b) = base.test_checksums.get(k) {
            if b != v {
                return Err(Error::Comparability(format!(
                    "{}: {k} test split differs from the baseline's",
                    dir.display()
                )));
            }
        }
    }
    if base.model != other.model {
        return Err(Error::Comparability(format!(
            "{}: model kind differs from the baseline's",
            dir.display()
        )));
    }
    Ok(())
}

/// Compares `runs` with `baseline`. The convergence threshold defaults to
/// the baseline's final CS validation loss.
pub fn compare_runs(runs: &[PathBuf], baseline: &Path, threshold: Option<f64>) -> Result<Comparison> {
    let base = read_report(baseline)?;
    let base_series = val_series(&read_curves(&baseline.join(CURVES_FILE))?, CONVERGENCE_SPLIT);
    let threshold = match threshold {
        Some(t) => t,
        None => base_series
            .last()
            .map(|p| p.1)
            .ok_or_else(|| Error::Setup(format!("{}: no {CONVERGENCE_SPLIT} curve", baseline.display())))?,
    };
    let mut reports = vec![];
    for dir in runs {
        let r = read_report(dir)?;
        check_comparable(&base, &r, dir)?;
        reports.push((dir.clone(), r));
    }
    let tasks: BTreeSet<String> = std::iter::once(&base)
        .chain(reports.iter().map(|(_, r)| r))
        .flat_map(|r| r.eval.tasks.keys().cloned())
        .collect();
    let mut rows = vec![];
    for (dir, r) in &reports {
        let series = val_series(&read_curves(&dir.join(CURVES_FILE))?, CONVERGENCE_SPLIT);
        let mut cells = BTreeMap::new();
        for t in &tasks {
            let value = cell_value(r, t);
            let delta = match (cell_value(&base, t), value) {
                (Some(b), Some(v)) if b > 0.0 => Some(relative_delta(b, v)?),
                _ => None,
            };
            cells.insert(t.clone(), Cell { value, delta });
        }
        rows.push(RunRow {
            run_id: r.run_id.clone(),
            dir: dir.clone(),
            cells,
            iterations_to_threshold: iterations_to_threshold(&series, threshold),
            final_val_cs: series.last().map(|p| p.1),
        });
    }
    Ok(Comparison {
        baseline: base.run_id.clone(),
        metric: if base.model == crate::models::ModelKind::Lm { "perplexity".into() } else { "cer".into() },
        threshold,
        tasks: tasks.into_iter().collect(),
        rows,
    })
}

impl Comparison {
    /// Plain-text table: one row per run, `value (Δabs / Δrel%)` per task.
    pub fn to_table(&self) -> String {
        let pct = self.metric == "cer";
        let fmt_v = |v: f64| if pct { format!("{:.2}%", 100.0 * v) } else { format!("{v:.2}") };
        let mut s = String::new();
        writeln!(
            s,
            "baseline {}  metric {}  convergence threshold {:.4}",
            self.baseline, self.metric, self.threshold
        )
        .unwrap();
        let mut header = vec!["run".to_string()];
        header.extend(self.tasks.iter().cloned());
        header.push("iters_to_threshold".into());
        let mut lines = vec![header];
        for r in &self.rows {
            let mut line = vec![r.run_id.clone()];
            for t in &self.tasks {
                let c = &r.cells[t];
                line.push(match (c.value, c.delta) {
                    (None, _) => "absent".into(),
                    (Some(v), None) => fmt_v(v),
                    (Some(v), Some(d)) => {
                        let abs = if pct { 100.0 * d.absolute } else { d.absolute };
                        format!("{} ({:+.2} / {:+.1}%)", fmt_v(v), abs, d.relative_pct)
                    }
                });
            }
            line.push(r.iterations_to_threshold.map_or("never".into(), |i| i.to_string()));
            lines.push(line);
        }
        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        for l in &lines {
            let row: Vec<String> = l.iter().zip(&widths).map(|(x, w)| format!("{x:<w$}")).collect();
            writeln!(s, "{}", row.join("  ").trim_end()).unwrap();
        }
        s
    }
}
