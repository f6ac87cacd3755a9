//! Stage × task metric grids and forgetting statistics.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::scores::{bleu, corpus_bleu, iou, relative_drop, rouge_l};
use crate::error::{Error, Result};
use crate::foodstream::TaskKind;
use crate::replay::parse::{mentioned_ingredients, nutrition_pairs, parse_set_answer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// In `[0, 1]`.
    pub iou: f64,
    /// BLEU and Rouge-L are in `[0, 100]`.
    pub bleu: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Iou,
    Bleu,
    RougeL,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Iou, Metric::Bleu, Metric::RougeL];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Iou => "iou",
            Metric::Bleu => "bleu",
            Metric::RougeL => "rouge_l",
        }
    }
}

impl Scores {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Iou => self.iou,
            Metric::Bleu => self.bleu,
            Metric::RougeL => self.rouge_l,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    /// Mean of sentence scores.
    #[default]
    Sentence,
    Corpus,
}

/// The set compared by the IoU column: ingredient items, ingredients a recipe
/// mentions, or nutrition key-value pairs.
pub fn iou_view(task: TaskKind, text: &str) -> BTreeSet<String> {
    match task {
        TaskKind::Ingredient => parse_set_answer(text),
        TaskKind::Recipe => mentioned_ingredients(text),
        TaskKind::Nutrition => nutrition_pairs(text),
    }
}

pub fn score_sample(task: TaskKind, prediction: &str, reference: &str) -> Result<Scores> {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Evaluation(format!("empty {task} reference")));
    }
    Ok(Scores { iou: iou(&iou_view(task, prediction), &iou_view(task, reference))?, bleu: bleu(&p, &r), rouge_l: rouge_l(&p, &r) })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: u64,
    pub task: TaskKind,
    pub prediction: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePredictions {
    /// 1-based stage; tasks `1..=stage` are evaluated.
    pub stage: usize,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCell {
    pub task: TaskKind,
    pub samples: usize,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: usize,
    pub cells: Vec<TaskCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropEntry {
    pub task: TaskKind,
    pub metric: Metric,
    pub learned_stage: usize,
    pub stage: usize,
    pub before: f64,
    pub after: f64,
    /// Percent; absent when the learned value is zero.
    pub drop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub stage: usize,
    pub task: TaskKind,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub bleu_mode: BleuMode,
    pub tasks: Vec<TaskKind>,
    pub stages: Vec<StageRow>,
    pub drops: Vec<DropEntry>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Scores every stage's predictions. `tasks` lists the stream order with the
/// test-set size of each task; stage `s` must cover exactly the first `s`.
pub fn build_report(
    method: &str,
    seed: u64,
    config_hash: &str,
    tasks: &[(TaskKind, usize)],
    stages: &[StagePredictions],
    bleu_mode: BleuMode,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(stages.len());
    for sp in stages {
        if sp.stage == 0 || sp.stage > tasks.len() {
            return Err(Error::Evaluation(format!("stage {} outside a {}-task stream", sp.stage, tasks.len())));
        }
        let seen = &tasks[..sp.stage];
        if let Some(p) = sp.predictions.iter().find(|p| !seen.iter().any(|(t, _)| *t == p.task)) {
            return Err(Error::Evaluation(format!("stage {} has a prediction for unseen task {}", sp.stage, p.task)));
        }
        let mut cells = Vec::new();
        for &(task, expected) in seen {
            let preds: Vec<&Prediction> = sp.predictions.iter().filter(|p| p.task == task).collect();
            let ids: HashSet<u64> = preds.iter().map(|p| p.sample_id).collect();
            if preds.len() != expected || ids.len() != expected {
                return Err(Error::Evaluation(format!(
                    "stage {} covers {} distinct of {expected} {task} test samples",
                    sp.stage,
                    ids.len()
                )));
            }
            let per: Vec<Scores> =
                preds.iter().map(|p| score_sample(task, &p.prediction, &p.reference)).collect::<Result<_>>()?;
            let bleu_value = match bleu_mode {
                BleuMode::Sentence => mean(per.iter().map(|s| s.bleu)),
                BleuMode::Corpus => {
                    let toks: Vec<(Vec<&str>, Vec<&str>)> = preds
                        .iter()
                        .map(|p| (p.prediction.split_whitespace().collect(), p.reference.split_whitespace().collect()))
                        .collect();
                    let pairs: Vec<(&[&str], &[&str])> = toks.iter().map(|(a, b)| (&a[..], &b[..])).collect();
                    corpus_bleu(&pairs)
                }
            };
            let scores = Scores {
                iou: mean(per.iter().map(|s| s.iou)),
                bleu: bleu_value,
                rouge_l: mean(per.iter().map(|s| s.rouge_l)),
            };
            if !(scores.iou.is_finite() && scores.bleu.is_finite() && scores.rouge_l.is_finite()) {
                return Err(Error::NonFinite(format!("stage {} {task} scores", sp.stage)));
            }
            cells.push(TaskCell { task, samples: expected, scores });
        }
        rows.push(StageRow { stage: sp.stage, cells });
    }
    rows.sort_by_key(|r| r.stage);

    let mut report = MetricsReport {
        method: method.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        bleu_mode,
        tasks: tasks.iter().map(|(t, _)| *t).collect(),
        stages: rows,
        drops: Vec::new(),
    };
    let mut drops = Vec::new();
    for (i, &task) in report.tasks.iter().enumerate() {
        let learned = i + 1;
        let Some(before) = report.cell(learned, task) else { continue };
        for row in report.stages.iter().filter(|r| r.stage > learned) {
            let Some(after) = row.cells.iter().find(|c| c.task == task) else { continue };
            for m in Metric::ALL {
                let (b, a) = (before.get(m), after.scores.get(m));
                drops.push(DropEntry {
                    task,
                    metric: m,
                    learned_stage: learned,
                    stage: row.stage,
                    before: b,
                    after: a,
                    drop: relative_drop(b, a).ok(),
                });
            }
        }
    }
    report.drops = drops;
    Ok(report)
}

impl MetricsReport {
    pub fn cell(&self, stage: usize, task: TaskKind) -> Option<Scores> {
        self.stages.iter().find(|r| r.stage == stage)?.cells.iter().find(|c| c.task == task).map(|c| c.scores)
    }

    pub fn drop(&self, task: TaskKind, metric: Metric, stage: usize) -> Option<&DropEntry> {
        self.drops.iter().find(|d| d.task == task && d.metric == metric && d.stage == stage)
    }

    pub fn final_stage(&self) -> usize {
        self.stages.iter().map(|r| r.stage).max().unwrap_or(0)
    }

    /// One record per stage × task × metric.
    pub fn grid(&self) -> Vec<GridRecord> {
        let mut out = Vec::new();
        for row in &self.stages {
            for c in &row.cells {
                for m in Metric::ALL {
                    out.push(GridRecord { stage: row.stage, task: c.task, metric: m, value: c.scores.get(m) });
                }
            }
        }
        out
    }

    /// One line per stage, three metric columns per task; unseen tasks are blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,seed,stage");
        for t in &self.tasks {
            for m in Metric::ALL {
                write!(s, ",{t}_{}", m.name()).unwrap();
            }
        }
        s.push('\n');
        for row in &self.stages {
            write!(s, "{},{},{}", self.method, self.seed, row.stage).unwrap();
            for &t in &self.tasks {
                for m in Metric::ALL {
                    match self.cell(row.stage, t) {
                        Some(sc) => write!(s, ",{:.4}", sc.get(m)).unwrap(),
                        None => s.push(','),
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} (seed {}, config {})\n", self.method, self.seed, short(&self.config_hash));
        write!(s, "{:<7}", "stage").unwrap();
        for t in &self.tasks {
            write!(s, " | {:^26}", t.name()).unwrap();
        }
        s.push('\n');
        write!(s, "{:<7}", "").unwrap();
        for _ in &self.tasks {
            write!(s, " | {:>8}{:>9}{:>9}", "IoU", "BLEU", "RougeL").unwrap();
        }
        s.push('\n');
        for row in &self.stages {
            write!(s, "{:<7}", row.stage).unwrap();
            for &t in &self.tasks {
                match self.cell(row.stage, t) {
                    Some(sc) => write!(s, " | {:>8.4}{:>9.2}{:>9.2}", sc.iou, sc.bleu, sc.rouge_l).unwrap(),
                    None => write!(s, " | {:>26}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        let last = self.final_stage();
        let finals: Vec<&DropEntry> = self.drops.iter().filter(|d| d.stage == last).collect();
        if !finals.is_empty() {
            s.push_str("relative drop at final stage (%):\n");
            for d in finals {
                let v = d.drop.map_or("n/a".to_string(), |x| format!("{x:.2}"));
                writeln!(s, "  {} {}: {v}", d.task, d.metric.name()).unwrap();
            }
        }
        s
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: u64, task: TaskKind, p: &str, r: &str) -> Prediction {
        Prediction { sample_id: id, task, prediction: p.into(), reference: r.into() }
    }

    #[test]
    fn single_task_perfect() {
        let stages = [StagePredictions {
            stage: 1,
            predictions: vec![pred(0, TaskKind::Ingredient, "beef , salt", "beef , salt")],
        }];
        let r = build_report("x", 1, "h", &[(TaskKind::Ingredient, 1)], &stages, BleuMode::Sentence).unwrap();
        let c = r.cell(1, TaskKind::Ingredient).unwrap();
        assert_eq!(c.iou, 1.0);
        assert!((c.rouge_l - 100.0).abs() < 1e-12);
        assert!(r.drops.is_empty());
    }

    #[test]
    fn collapse_shows_zero_and_full_drop() {
        let t = TaskKind::Ingredient;
        let stages = [
            StagePredictions { stage: 1, predictions: vec![pred(0, t, "beef , salt", "beef , salt")] },
            StagePredictions {
                stage: 2,
                predictions: vec![
                    pred(0, t, "step 4 serve", "beef , salt"),
                    pred(1, TaskKind::Recipe, "step 1 fry beef", "step 1 fry beef"),
                ],
            },
        ];
        let tasks = [(t, 1), (TaskKind::Recipe, 1)];
        let r = build_report("naive", 1, "h", &tasks, &stages, BleuMode::Sentence).unwrap();
        assert_eq!(r.cell(2, t).unwrap().iou, 0.0);
        assert_eq!(r.cell(2, t).unwrap().rouge_l, 0.0);
        assert!((r.drop(t, Metric::Iou, 2).unwrap().drop.unwrap() - 100.0).abs() < 1e-12);
        assert!(r.to_csv().lines().nth(1).unwrap().ends_with(",,,"));
    }

    #[test]
    fn missing_coverage_is_an_error() {
        let stages = [StagePredictions { stage: 1, predictions: vec![] }];
        assert!(build_report("x", 1, "h", &[(TaskKind::Ingredient, 2)], &stages, BleuMode::Sentence).is_err());
        let dup = [StagePredictions {
            stage: 1,
            predictions: vec![pred(0, TaskKind::Ingredient, "a", "a"), pred(0, TaskKind::Ingredient, "a", "a")],
        }];
        assert!(build_report("x", 1, "h", &[(TaskKind::Ingredient, 2)], &dup, BleuMode::Sentence).is_err());
    }

    #[test]
    fn nutrition_iou_uses_pairs() {
        let s = score_sample(TaskKind::Nutrition, "calories : 1 0 fat : 2", "calories : 1 0 fat : 3").unwrap();
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-12);
    }
}
