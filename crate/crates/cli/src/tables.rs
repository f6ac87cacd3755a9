//! Seed-aggregated comparison tables and `cmd_report`.
//!
//! Columns follow the stage-wise layout of the comparison tables: after
//! stage 1 the ingredient IoU, after stages 2 and 3 the retained ingredient
//! IoU next to recipe BLEU and Rouge-L. Cells show the seed median with the
//! min and max in brackets; IoU is in percent.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use foodcl_core::foodstream::TaskKind;
use foodcl_core::lora::Strategy;
use foodcl_core::metrics::{relative_drop, Metric, MetricsReport};

use crate::config::short;
use crate::error::{CliError, Result};
use crate::pipeline::{rescore_run, CellResult, RunRecord, RUN_FILE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some(Summary { min: v[0], median, max: v[n - 1] })
}

pub fn median(values: &[f64]) -> Option<f64> {
    summarize(values).map(|s| s.median)
}

/// A table column: a metric of a task read after a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Column {
    pub stage: usize,
    pub task: TaskKind,
    pub metric: Metric,
}

impl Column {
    pub fn value(&self, r: &MetricsReport) -> Option<f64> {
        let v = r.cell(self.stage, self.task)?.get(self.metric);
        Some(if self.metric == Metric::Iou { 100.0 * v } else { v })
    }

    fn header(&self) -> String {
        format!("{} {}", self.task.name(), self.metric.name())
    }
}

fn col(stage: usize, task: TaskKind, metric: Metric) -> Column {
    Column { stage, task, metric }
}

/// Earlier-task metrics after `stage`: ingredient IoU, recipe BLEU, recipe Rouge-L.
pub fn retained_columns(stage: usize) -> [Column; 3] {
    [
        col(stage, TaskKind::Ingredient, Metric::Iou),
        col(stage, TaskKind::Recipe, Metric::Bleu),
        col(stage, TaskKind::Recipe, Metric::RougeL),
    ]
}

pub fn comparison_columns() -> Vec<Column> {
    let mut c = vec![col(1, TaskKind::Ingredient, Metric::Iou)];
    c.extend(retained_columns(2));
    c.extend(retained_columns(3));
    c
}

fn fmt_cell(values: &[f64]) -> String {
    match summarize(values) {
        None => "-".into(),
        Some(s) if values.len() == 1 => format!("{:.2}", s.median),
        Some(s) => format!("{:.2} [{:.2}, {:.2}]", s.median, s.min, s.max),
    }
}

pub fn column_values(reports: &[MetricsReport], c: Column) -> Vec<f64> {
    reports.iter().filter_map(|r| c.value(r)).collect()
}

/// Rows of (label, per-seed reports) rendered under stage headings.
pub fn render(title: &str, rows: &[(String, Vec<MetricsReport>)], columns: &[Column]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let cells: Vec<Vec<String>> =
        rows.iter().map(|(_, rs)| columns.iter().map(|&c| fmt_cell(&column_values(rs, c))).collect()).collect();
    let widths: Vec<usize> = (0..columns.len())
        .map(|j| cells.iter().map(|r| r[j].len()).chain([columns[j].header().len()]).max().unwrap_or(0))
        .collect();

    let mut s = format!("{title}\n");
    write!(s, "{:<label_w$}", "").unwrap();
    let mut j = 0;
    while j < columns.len() {
        let stage = columns[j].stage;
        let span: Vec<usize> = (j..columns.len()).take_while(|&k| columns[k].stage == stage).collect();
        let w = span.iter().map(|&k| widths[k] + 2).sum::<usize>() + 1;
        write!(s, " |{:^w$}", format!("after stage {stage}"), w = w - 1).unwrap();
        j += span.len();
    }
    s.push('\n');
    write!(s, "{:<label_w$}", "").unwrap();
    for (j, c) in columns.iter().enumerate() {
        if j == 0 || columns[j - 1].stage != c.stage {
            s.push_str(" |");
        }
        write!(s, "  {:>w$}", c.header(), w = widths[j]).unwrap();
    }
    s.push('\n');
    for ((label, _), row) in rows.iter().zip(&cells) {
        write!(s, "{label:<label_w$}").unwrap();
        for (j, c) in columns.iter().enumerate() {
            if j == 0 || columns[j - 1].stage != c.stage {
                s.push_str(" |");
            }
            write!(s, "  {:>w$}", row[j], w = widths[j]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Ingredient IoU lost between stage 1 and the final stage, in percent.
pub fn task1_drops(reports: &[MetricsReport]) -> Vec<f64> {
    reports
        .iter()
        .filter_map(|r| {
            let before = r.cell(1, TaskKind::Ingredient)?.iou;
            let after = r.cell(r.final_stage(), TaskKind::Ingredient)?.iou;
            relative_drop(before, after).ok()
        })
        .collect()
}

/// Method comparison with forgetting and wall-clock columns under it.
pub fn comparison(rows: &[(String, Vec<MetricsReport>, Vec<f64>)]) -> String {
    let table_rows: Vec<(String, Vec<MetricsReport>)> = rows.iter().map(|(l, r, _)| (l.clone(), r.clone())).collect();
    let mut s = render("Continual stream comparison (IoU in %, BLEU and Rouge-L 0-100)", &table_rows, &comparison_columns());
    s.push('\n');
    let label_w = rows.iter().map(|(l, _, _)| l.len()).max().unwrap_or(0).max(8);
    writeln!(s, "{:<label_w$} | {:>28} | {:>28}", "", "ingredient IoU drop 1->3 (%)", "wall-clock per run (s)").unwrap();
    for (label, reports, secs) in rows {
        writeln!(s, "{label:<label_w$} | {:>28} | {:>28}", fmt_cell(&task1_drops(reports)), fmt_cell(secs)).unwrap();
    }
    let secs_of = |name: &str| rows.iter().find(|(l, _, _)| l == name).and_then(|(_, _, t)| median(t));
    if let (Some(d), Some(n)) = (secs_of(Strategy::DualLora.name()), secs_of(Strategy::NaiveLora.name())) {
        if n > 0.0 {
            writeln!(s, "dual-lora / naive-lora wall-clock (median): {:.2}x (budget 2x)", d / n).unwrap();
        }
    }
    s
}

/// One seed-aggregated table per grid present in `cells`.
pub fn ablation_tables(cells: &[CellResult]) -> String {
    let mut grids: Vec<_> = cells.iter().map(|c| c.cell.grid).collect();
    grids.dedup();
    let mut s = String::new();
    for g in grids {
        let rows: Vec<(String, Vec<MetricsReport>)> = cells
            .iter()
            .filter(|c| c.cell.grid == g)
            .map(|c| {
                let reports = c.runs.iter().filter_map(|r| r.outcome.as_ref().ok()).map(|o| o.report.clone()).collect();
                let failed = c.runs.iter().filter(|r| r.outcome.is_err()).count();
                let label = if failed > 0 { format!("{} ({failed} failed)", c.cell.label) } else { c.cell.label.clone() };
                (label, reports)
            })
            .collect();
        let columns: Vec<Column> = retained_columns(2).into_iter().chain(retained_columns(3)).collect();
        s.push_str(&render(&format!("Ablation: {} (retained metrics, seed median [min, max])", g.name()), &rows, &columns));
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub text: String,
    pub absent: Vec<PathBuf>,
}

/// Rescores run directories from their predictions and renders one
/// comparison. Directories without a run are listed as absent; runs over
/// different datasets are refused.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<Rendered> {
    let mut absent = Vec::new();
    let mut loaded: Vec<(RunRecord, MetricsReport)> = Vec::new();
    for d in dirs {
        if !d.join(RUN_FILE).exists() {
            absent.push(d.clone());
            continue;
        }
        loaded.push(rescore_run(d)?);
    }
    if let Some((first, _)) = loaded.first() {
        if let Some((other, _)) = loaded.iter().find(|(r, _)| r.dataset_hash != first.dataset_hash) {
            return Err(CliError::DatasetMismatch(format!(
                "{} vs {}",
                short(&first.dataset_hash),
                short(&other.dataset_hash)
            )));
        }
    }
    // Group by method, then by configuration within a method.
    let mut groups: BTreeMap<(usize, String), (Vec<MetricsReport>, Vec<f64>)> = BTreeMap::new();
    for (rec, rep) in loaded {
        let order = Strategy::ALL.iter().position(|&m| m == rec.method).unwrap_or(usize::MAX);
        let e = groups.entry((order, rec.config_hash.clone())).or_default();
        e.0.push(rep);
        e.1.push(rec.seconds);
    }
    let per_method = |order: usize| groups.keys().filter(|(o, _)| *o == order).count();
    let rows: Vec<(String, Vec<MetricsReport>, Vec<f64>)> = groups
        .iter()
        .map(|((order, hash), (reps, secs))| {
            let name = reps.first().map_or("?".to_string(), |r| r.method.clone());
            let label = if per_method(*order) > 1 { format!("{name} {}", short(hash)) } else { name };
            (label, reps.clone(), secs.clone())
        })
        .collect();
    let mut text = comparison(&rows);
    if !absent.is_empty() {
        text.push_str("absent:\n");
        for a in &absent {
            writeln!(text, "  {}", a.display()).unwrap();
        }
    }
    Ok(Rendered { text, absent })
}

/// Every `runs/<method>/seed<k>` directory the configured seeds name.
pub fn default_report_dirs(root: &Path, seeds: &[u64]) -> Vec<PathBuf> {
    Strategy::ALL
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| crate::pipeline::run_dir(root, m, s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_odd_and_even_counts() {
        let s = summarize(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.min, s.median, s.max), (1.0, 2.0, 3.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(summarize(&[]), None);
    }

    #[test]
    fn columns_cover_three_stages() {
        let c = comparison_columns();
        assert_eq!(c.len(), 7);
        assert_eq!(c.iter().filter(|c| c.stage == 3).count(), 3);
        assert!(c.iter().all(|c| c.task != TaskKind::Nutrition));
    }
}
