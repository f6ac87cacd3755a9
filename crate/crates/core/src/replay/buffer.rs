//! Pseudo-sample generation for earlier tasks and the persisted replay buffer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::{Embedder, HashedNgramEmbedder};
use super::enhance::{consensus_select, enhance_set};
use super::parse::parse_set_answer;
use crate::backbone::{generate, GenerateOptions, InferenceModel};
use crate::error::{Error, Result};
use crate::foodstream::io::{read_jsonl, write_jsonl};
use crate::foodstream::{build_prompt, PoolImage, TaskKind, Tokenizer};
use crate::numeric::rng::{label_tag, SeededRng};
use crate::numeric::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    /// Generations per replayed prompt.
    pub n: usize,
    /// Vote threshold for set answers.
    pub threshold: usize,
    /// Require strictly more than `threshold` votes.
    pub strict_threshold: bool,
    /// Pseudo samples as a fraction of the current task's training set.
    pub proportion: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Off: take raw candidate 0 instead of voting or consensus.
    pub quality_enhancement: bool,
    /// Times each pseudo sample appears in the cooperative training mix.
    pub repeat: usize,
    /// Question templates usable for each task's replay prompts.
    pub templates: BTreeMap<TaskKind, Vec<usize>>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            n: 5,
            threshold: 4,
            strict_threshold: false,
            proportion: 0.05,
            temperature: 0.8,
            max_new_tokens: 48,
            quality_enhancement: true,
            repeat: 1,
            templates: TaskKind::STREAM.iter().map(|&t| (t, (0..t.templates().len()).collect())).collect(),
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.threshold == 0 || self.threshold > self.n {
            return Err(Error::Config(format!("need 1 <= t <= n, got t={} n={}", self.threshold, self.n)));
        }
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::Config(format!("replay proportion {} outside [0, 1]", self.proportion)));
        }
        if self.repeat == 0 {
            return Err(Error::Config("replay repeat must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("replay temperature must be positive".into()));
        }
        Ok(())
    }

    fn templates_for(&self, task: TaskKind) -> Result<&[usize]> {
        let ids = self
            .templates
            .get(&task)
            .filter(|ids| !ids.is_empty())
            .ok_or_else(|| Error::Config(format!("no replay template configured for task {task}")))?;
        if let Some(bad) = ids.iter().find(|&&i| i >= task.templates().len()) {
            return Err(Error::Config(format!("task {task} has no template {bad}")));
        }
        Ok(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Vote,
    Consensus,
    /// Quality enhancement disabled: candidate 0 verbatim.
    Raw,
}

/// One replay record: the prompt, every raw candidate and the kept answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSample {
    pub bundle_id: u64,
    pub task: TaskKind,
    pub prompt: Vec<u32>,
    pub candidates: Vec<String>,
    pub answer: String,
    pub confidence: f64,
    pub rule: SelectionRule,
    /// Hash of the producing experiment configuration.
    #[serde(default)]
    pub config_hash: String,
}

impl PseudoSample {
    /// Prompt + answer + end token with the answer mask, ready for training.
    pub fn training_pair(&self, tok: &Tokenizer) -> Result<(Vec<u32>, Vec<bool>)> {
        let answer = tok.encode(&self.answer)?;
        let mut tokens = self.prompt.clone();
        let mut mask = vec![false; tokens.len()];
        tokens.extend(&answer);
        tokens.push(tok.eos());
        mask.resize(tokens.len(), true);
        Ok((tokens, mask))
    }
}

/// Splits `total` evenly over `tasks` previous tasks; the remainder goes to the earliest.
pub fn allocate(total: usize, tasks: usize) -> Vec<usize> {
    if tasks == 0 {
        return Vec::new();
    }
    let mut out = vec![total / tasks; tasks];
    out[0] += total % tasks;
    out
}

/// Quality-enhanced answer from `n` raw candidates, or `None` if nothing usable survives.
pub fn enhance_bundle(
    task: TaskKind,
    candidates: &[String],
    config: &ReplayConfig,
    embedder: &dyn Embedder,
) -> Result<Option<(String, f64, SelectionRule)>> {
    if !config.quality_enhancement {
        let raw = &candidates[0];
        return Ok((!raw.trim().is_empty()).then(|| (raw.clone(), 1.0, SelectionRule::Raw)));
    }
    match task {
        TaskKind::Ingredient => {
            let sets: Vec<BTreeSet<String>> = candidates.iter().map(|c| parse_set_answer(c)).collect();
            let (kept, conf) = enhance_set(&sets, config.threshold, config.strict_threshold)?;
            if kept.is_empty() {
                return Ok(None);
            }
            let text = kept.into_iter().collect::<Vec<_>>().join(" , ");
            Ok(Some((text, conf, SelectionRule::Vote)))
        }
        TaskKind::Recipe | TaskKind::Nutrition => {
            let refs: Vec<&str> = candidates.iter().map(String::as_str).collect();
            match consensus_select(&refs, embedder) {
                Ok((i, conf)) if !candidates[i].trim().is_empty() => {
                    Ok(Some((candidates[i].clone(), conf, SelectionRule::Consensus)))
                }
                Ok(_) | Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            }
        }
    }
}

/// Generates pseudo samples for `prev_tasks` from unlabeled pool images.
/// Bundles with no usable answer are skipped and the next pool image is
/// tried, so each task receives its full quota while the pool lasts.
pub fn build_replay_buffer(
    prev_tasks: &[TaskKind],
    current_task_size: usize,
    pool: &[PoolImage],
    model: &InferenceModel,
    tok: &Tokenizer,
    config: &ReplayConfig,
    seed: u64,
) -> Result<Vec<PseudoSample>> {
    config.validate()?;
    let total = (config.proportion * current_task_size as f64).round() as usize;
    let quotas = allocate(total, prev_tasks.len());
    let embedder = HashedNgramEmbedder::default();
    let mut out = Vec::new();
    for (&task, &quota) in prev_tasks.iter().zip(&quotas) {
        let templates = config.templates_for(task)?;
        if quota == 0 {
            continue;
        }
        let mut rng = SeededRng::new(derive_seed(seed, &[label_tag(task.name())]));
        let mut order: Vec<usize> = (0..pool.len()).collect();
        rng.shuffle(&mut order);
        let mut kept = 0;
        let mut cursor = 0;
        let mut round = 0u64;
        while kept < quota && cursor < order.len() {
            let want = (quota - kept).min(order.len() - cursor);
            let picked = &order[cursor..cursor + want];
            cursor += want;
            let prompts: Vec<(usize, Vec<u32>)> = picked
                .iter()
                .map(|&i| {
                    let template = templates[rng.below(templates.len())];
                    build_prompt(&pool[i].image, task, template, tok).map(|p| (i, p))
                })
                .collect::<Result<_>>()?;
            let expanded: Vec<&[u32]> =
                prompts.iter().flat_map(|(_, p)| std::iter::repeat(p.as_slice()).take(config.n)).collect();
            let opts = GenerateOptions {
                max_new_tokens: config.max_new_tokens,
                temperature: config.temperature,
                seed: derive_seed(seed, &[label_tag(task.name()), round]),
            };
            round += 1;
            let gens = generate(model, &expanded, tok.eos(), &opts)?;
            for ((pool_idx, prompt), bundle) in prompts.iter().zip(gens.chunks(config.n)) {
                if kept == quota {
                    break;
                }
                let candidates: Vec<String> = bundle.iter().map(|g| tok.decode(&g.tokens)).collect::<Result<_>>()?;
                if let Some((answer, confidence, rule)) = enhance_bundle(task, &candidates, config, &embedder)? {
                    out.push(PseudoSample {
                        bundle_id: u64::from(pool[*pool_idx].dish_id),
                        task,
                        prompt: prompt.clone(),
                        candidates,
                        answer,
                        confidence,
                        rule,
                        config_hash: String::new(),
                    });
                    kept += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn save_buffer(path: &Path, samples: &[PseudoSample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(path, samples)
}

pub fn load_buffer(path: &Path) -> Result<Vec<PseudoSample>> {
    read_jsonl(path)
}
