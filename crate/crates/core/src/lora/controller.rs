//! Sequences the stages of a continual run over the task stream.
//!
//! Each stage only ever sees the current task's training split. Earlier
//! training splits are dropped before the stage starts; replay for them comes
//! from the model's own generations on unlabeled pool images.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adapter::LoraAdapter;
use super::registry::{compose_for_inference, specialized_context, AdapterRegistry, TaskAdapterSet};
use super::train::{fresh_adapters, train_adapters, DualLoraHyper, Example, TrainLog, TrainSlot};
use crate::backbone::{generate, BackboneWeights, GenerateOptions, InferenceModel, InjectionSites};
use crate::error::{Error, Result};
use crate::foodstream::{Sample, TaskKind, TaskStream, Tokenizer};
use crate::metrics::{build_report, BleuMode, MetricsReport, Prediction, StagePredictions};
use crate::numeric::rng::label_tag;
use crate::numeric::{checksum, derive_seed, SeededRng};
use crate::replay::{build_replay_buffer, PseudoSample, ReplayConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One adapter set fine-tuned task after task.
    NaiveLora,
    /// A fresh adapter set per task, kept orthogonal to all earlier ones; no replay.
    OrthoLora,
    /// Specialized plus cooperative adapters with quality-enhanced replay.
    #[default]
    DualLora,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NaiveLora, Strategy::OrthoLora, Strategy::DualLora];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NaiveLora => "naive-lora",
            Strategy::OrthoLora => "ortho-lora",
            Strategy::DualLora => "dual-lora",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Strategy::NaiveLora => "single adapter set fine-tuned sequentially",
            Strategy::OrthoLora => "per-task adapters with orthogonality to all previous tasks, no replay",
            Strategy::DualLora => "specialized and cooperative adapters with quality-enhanced pseudo replay",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub hyper: DualLoraHyper,
    pub replay: ReplayConfig,
    pub seed: u64,
    pub eval_max_new_tokens: usize,
    pub bleu_mode: BleuMode,
    pub config_hash: String,
}

/// Trained adapters of one stage, by role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAdapters {
    /// Dual: the specialized set. Baselines: the task's only set.
    pub specialized: Vec<LoraAdapter>,
    /// Dual only.
    pub cooperative: Option<Vec<LoraAdapter>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub task_index: usize,
    pub task: TaskKind,
    pub adapters: StageAdapters,
    pub specialized_log: TrainLog,
    pub cooperative_log: Option<TrainLog>,
    pub replay: Vec<PseudoSample>,
    pub predictions: StagePredictions,
    pub seconds: f64,
    pub backbone_checksum: String,
    /// Checksum of every adapter trained before this stage, before and after it ran.
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

/// Everything carried from one stage to the next.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControllerState {
    pub registry: AdapterRegistry,
    /// Baselines: the task adapter sets in training order.
    pub task_sets: Vec<Vec<LoraAdapter>>,
    pub stages: Vec<StageResult>,
}

impl ControllerState {
    fn frozen_checksum(&self) -> String {
        let mut ms = Vec::new();
        for s in self.registry.history() {
            ms.extend(s.specialized.iter().chain(&s.cooperative).flat_map(|a| [&a.a, &a.b]));
        }
        ms.extend(self.task_sets.iter().flatten().flat_map(|a| [&a.a, &a.b]));
        checksum(ms)
    }

    /// Frozen adapters active at inference after the last completed stage.
    pub fn inference_stack(&self, strategy: Strategy, hyper: &DualLoraHyper) -> Result<Vec<&LoraAdapter>> {
        match strategy {
            Strategy::DualLora => compose_for_inference(&self.registry, hyper.policy),
            Strategy::NaiveLora => {
                self.task_sets.last().map(|s| s.iter().collect()).ok_or_else(|| Error::StageOrder("no stage".into()))
            }
            Strategy::OrthoLora => {
                if self.task_sets.is_empty() {
                    return Err(Error::StageOrder("no stage".into()));
                }
                Ok(self.task_sets.iter().flatten().collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub stages: Vec<StageResult>,
    pub report: MetricsReport,
    pub backbone_checksum: String,
}

fn examples(samples: &[Sample]) -> Vec<Example> {
    samples.iter().map(|s| Example { tokens: s.tokens(), mask: s.answer_mask() }).collect()
}

fn model_with(backbone: &BackboneWeights, adapters: &[&LoraAdapter]) -> Result<InferenceModel> {
    let mut sites = InjectionSites::empty(&backbone.config);
    sites.attach_all(adapters.iter().copied(), false)?;
    Ok(InferenceModel::new(backbone, &sites))
}

/// Greedy answers for every test sample of `tasks`.
pub fn evaluate(
    model: &InferenceModel,
    stream: &TaskStream,
    tasks: &[TaskKind],
    tok: &Tokenizer,
    max_new_tokens: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for &task in tasks {
        let data = stream.task(task).ok_or_else(|| Error::Data(format!("stream has no task {task}")))?;
        let prompts: Vec<&[u32]> = data.test.iter().map(|s| s.prompt.as_slice()).collect();
        let gens = generate(model, &prompts, tok.eos(), &GenerateOptions::greedy(max_new_tokens))?;
        for (s, g) in data.test.iter().zip(gens) {
            out.push(Prediction {
                sample_id: s.sample_id,
                task,
                prediction: tok.decode(&g.tokens)?,
                reference: tok.decode_answer(&s.answer)?,
            });
        }
    }
    Ok(out)
}

fn stage_seed(seed: u64, stage: usize, label: &str) -> u64 {
    derive_seed(seed, &[stage as u64, label_tag(label)])
}

/// Runs one stage on top of `state`. `train` is the current task's training
/// split; nothing else from the stream's training data is visible.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    state: &mut ControllerState,
    stage: usize,
    task: TaskKind,
    train: Vec<Sample>,
    stream: &TaskStream,
    backbone: &BackboneWeights,
    tok: &Tokenizer,
    cfg: &RunConfig,
) -> Result<StageResult> {
    let start = Instant::now();
    let hyper = &cfg.hyper;
    let bc = backbone.config;
    let backbone_before = backbone.checksum();
    let frozen_before = state.frozen_checksum();
    let seen: Vec<TaskKind> = stream.tasks[..stage].iter().map(|t| t.task).collect();
    let current = examples(&train);

    let (adapters, specialized_log, cooperative_log, replay) = match cfg.strategy {
        Strategy::NaiveLora => {
            let init = match state.task_sets.last() {
                Some(prev) => prev.clone(),
                None => fresh_adapters(&bc, hyper.rank, &mut SeededRng::new(stage_seed(cfg.seed, 1, "init.single")))?,
            };
            let slots = init.into_iter().map(|adapter| TrainSlot { adapter, targets: vec![] }).collect();
            let (trained, log) =
                train_adapters(backbone, &[], slots, &current, hyper, 0.0, stage_seed(cfg.seed, stage, "train.single"))?;
            (StageAdapters { specialized: trained, cooperative: None }, log, None, Vec::new())
        }
        Strategy::OrthoLora => {
            let init = fresh_adapters(&bc, hyper.rank, &mut SeededRng::new(stage_seed(cfg.seed, stage, "init.task")))?;
            let frozen: Vec<&LoraAdapter> = state.task_sets.iter().flatten().collect();
            let slots = init
                .into_iter()
                .map(|adapter| {
                    let targets = frozen.iter().filter(|f| f.site == adapter.site).map(|f| f.a.clone()).collect();
                    TrainSlot { adapter, targets }
                })
                .collect();
            let (trained, log) = train_adapters(
                backbone,
                &frozen,
                slots,
                &current,
                hyper,
                hyper.lambda_o,
                stage_seed(cfg.seed, stage, "train.task"),
            )?;
            (StageAdapters { specialized: trained, cooperative: None }, log, None, Vec::new())
        }
        Strategy::DualLora => {
            // (1) Pseudo samples of earlier tasks from the previous stage's model.
            let replay = if stage > 1 {
                let stack = compose_for_inference(&state.registry, hyper.policy)?;
                let model = model_with(backbone, &stack)?;
                let mut buf = build_replay_buffer(
                    &seen[..stage - 1],
                    train.len(),
                    &stream.pool,
                    &model,
                    tok,
                    &cfg.replay,
                    stage_seed(cfg.seed, stage, "replay"),
                )?;
                buf.iter_mut().for_each(|p| p.config_hash = cfg.config_hash.clone());
                buf
            } else {
                Vec::new()
            };

            // (2) Specialized adapters, orthogonal to the previous cooperative subspace.
            let prev_coop: Vec<LoraAdapter> = match state.registry.latest_cooperative() {
                Some(c) => c.to_vec(),
                None if stage == 1 => Vec::new(),
                None => return Err(Error::StageOrder(format!("stage {stage} has no previous cooperative set"))),
            };
            let init = fresh_adapters(&bc, hyper.rank, &mut SeededRng::new(stage_seed(cfg.seed, stage, "init.spec")))?;
            let slots = init
                .into_iter()
                .map(|adapter| {
                    let targets = prev_coop.iter().filter(|c| c.site == adapter.site).map(|c| c.a.clone()).collect();
                    TrainSlot { adapter, targets }
                })
                .collect();
            let frozen: Vec<&LoraAdapter> = prev_coop.iter().collect();
            let (spec, spec_log) = train_adapters(
                backbone,
                &frozen,
                slots,
                &current,
                hyper,
                hyper.lambda_o,
                stage_seed(cfg.seed, stage, "train.spec"),
            )?;

            // (3) Cooperative adapters on current data plus replay, in the
            // same adapter context they will be evaluated in.
            let coop_init = if prev_coop.is_empty() {
                fresh_adapters(&bc, hyper.rank, &mut SeededRng::new(stage_seed(cfg.seed, stage, "init.coop")))?
            } else {
                prev_coop.clone()
            };
            let context = specialized_context(&state.registry, &spec, hyper.policy);
            let ctx_refs: Vec<&LoraAdapter> = context.iter().collect();
            let mut mixed = current.clone();
            for p in &replay {
                if !seen[..stage - 1].contains(&p.task) {
                    return Err(Error::Data(format!("replay sample tagged {} outside earlier tasks", p.task)));
                }
                let (tokens, mask) = p.training_pair(tok)?;
                let ex = Example { tokens, mask };
                mixed.extend(std::iter::repeat(ex).take(cfg.replay.repeat));
            }
            SeededRng::new(stage_seed(cfg.seed, stage, "mix")).shuffle(&mut mixed);
            let slots = coop_init.into_iter().map(|adapter| TrainSlot { adapter, targets: vec![] }).collect();
            let (coop, coop_log) =
                train_adapters(backbone, &ctx_refs, slots, &mixed, hyper, 0.0, stage_seed(cfg.seed, stage, "train.coop"))?;
            (StageAdapters { specialized: spec, cooperative: Some(coop) }, spec_log, Some(coop_log), replay)
        }
    };

    let frozen_after = state.frozen_checksum();
    if frozen_after != frozen_before {
        return Err(Error::Invariant(format!("stage {stage} modified adapters of earlier stages")));
    }
    match &adapters.cooperative {
        Some(coop) => {
            let set = TaskAdapterSet {
                task_index: stage,
                task,
                specialized: adapters.specialized.clone(),
                cooperative: coop.clone(),
            };
            set.validate(hyper.rank)?;
            state.registry.push(set)?;
        }
        None => state.task_sets.push(adapters.specialized.clone()),
    }

    // (4) Evaluate every task seen so far.
    let stack = state.inference_stack(cfg.strategy, hyper)?;
    let model = model_with(backbone, &stack)?;
    let predictions = evaluate(&model, stream, &seen, tok, cfg.eval_max_new_tokens)?;

    let backbone_after = backbone.checksum();
    if backbone_after != backbone_before {
        return Err(Error::Invariant(format!("backbone changed during stage {stage}")));
    }
    Ok(StageResult {
        task_index: stage,
        task,
        adapters,
        specialized_log,
        cooperative_log,
        replay,
        predictions: StagePredictions { stage, predictions },
        seconds: start.elapsed().as_secs_f64(),
        backbone_checksum: backbone_after,
        frozen_checksum_before: frozen_before,
        frozen_checksum_after: frozen_after,
    })
}

/// Runs stages `state.stages.len() + 1 ..= stop` and returns the state.
/// `on_stage` sees each finished stage before the next begins, so callers can
/// persist partial results.
pub fn continue_task_stream(
    mut state: ControllerState,
    stop: usize,
    stream: &TaskStream,
    backbone: &BackboneWeights,
    tok: &Tokenizer,
    cfg: &RunConfig,
    on_stage: &mut dyn FnMut(&StageResult) -> Result<()>,
) -> Result<ControllerState> {
    cfg.hyper.validate(&backbone.config)?;
    if cfg.strategy == Strategy::DualLora {
        cfg.replay.validate()?;
    }
    if stop > stream.tasks.len() {
        return Err(Error::Config(format!("stage {stop} beyond a {}-task stream", stream.tasks.len())));
    }
    let done = state.stages.len();
    // Only training splits of tasks not yet learned are ever taken into scope.
    let mut pending: VecDeque<(TaskKind, Vec<Sample>)> =
        stream.tasks[done..stop].iter().map(|t| (t.task, t.train.clone())).collect();
    for stage in done + 1..=stop {
        let (task, train) = pending.pop_front().expect("one pending split per stage");
        let result = run_stage(&mut state, stage, task, train, stream, backbone, tok, cfg)?;
        on_stage(&result)?;
        state.stages.push(result);
    }
    Ok(state)
}

/// Scores a finished (or partial) run.
pub fn report_for(state: &ControllerState, stream: &TaskStream, cfg: &RunConfig) -> Result<MetricsReport> {
    let tasks: Vec<(TaskKind, usize)> = stream.tasks.iter().map(|t| (t.task, t.test.len())).collect();
    let preds: Vec<StagePredictions> = state.stages.iter().map(|s| s.predictions.clone()).collect();
    build_report(cfg.strategy.name(), cfg.seed, &cfg.config_hash, &tasks, &preds, cfg.bleu_mode)
}

/// Full continual run over every task of the stream.
pub fn run_task_stream(
    stream: &TaskStream,
    backbone: &BackboneWeights,
    tok: &Tokenizer,
    cfg: &RunConfig,
    on_stage: &mut dyn FnMut(&StageResult) -> Result<()>,
) -> Result<RunOutput> {
    let state = continue_task_stream(ControllerState::default(), stream.tasks.len(), stream, backbone, tok, cfg, on_stage)?;
    let report = report_for(&state, stream, cfg)?;
    Ok(RunOutput { stages: state.stages, report, backbone_checksum: backbone.checksum() })
}
