//! The subcommands: dataset generation, pretraining, runs and ablation grids.
//!
//! Layout under the output root:
//!
//! ```text
//! data/<dataset-hash>/            task split files, pool, manifest
//! backbone/<backbone-hash>/       backbone.tensors, pretrain.json
//! runs/<method>/seed<k>/          one continual run
//! ablate/<grid>/<cell>/seed<k>/   one ablation cell run
//! ```
//!
//! A run directory holds `run.json`, `report.{json,csv,txt}`, and per stage
//! `adapters/task<t>.<role>.tensors`, `stages/stage<t>.json`,
//! `predictions/stage<t>.json` and `replay/stage<t>.jsonl`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use foodcl_core::backbone::{pretrain_backbone, BackboneWeights, PretrainReport};
use foodcl_core::foodstream::corpus::pretraining_corpus;
use foodcl_core::foodstream::io::load_manifest;
use foodcl_core::foodstream::{generate_dataset, load_stream, save_stream, TaskKind, TaskStream, Tokenizer};
use foodcl_core::lora::checkpoint::{adapter_file_name, load_adapters, save_adapters, save_registry, StoredRole};
use foodcl_core::lora::{continue_task_stream, report_for, ControllerState, StageResult, Strategy, TrainLog};
use foodcl_core::metrics::{build_report, MetricsReport, StagePredictions};
use foodcl_core::numeric::checkpoint::TensorFile;
use foodcl_core::replay::save_buffer;
use serde::{Deserialize, Serialize};

use crate::config::{short, ExperimentConfig};
use crate::error::{CliError, Result};

pub const RUN_FILE: &str = "run.json";
pub const BACKBONE_FILE: &str = "backbone.tensors";

pub fn data_dir(root: &Path, dataset_hash: &str) -> PathBuf {
    root.join("data").join(short(dataset_hash))
}

pub fn backbone_dir(root: &Path, backbone_hash: &str) -> PathBuf {
    root.join("backbone").join(short(backbone_hash))
}

pub fn run_dir(root: &Path, method: Strategy, seed: u64) -> PathBuf {
    root.join("runs").join(method.name()).join(format!("seed{seed}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn parallel_map<T: Send, R: Send>(items: Vec<T>, workers: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = items.len();
    let queue = Mutex::new(items.into_iter().enumerate().collect::<Vec<_>>().into_iter());
    let results = Mutex::new((0..n).map(|_| None).collect::<Vec<Option<R>>>());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Worker count: `FOODCL_JOBS` if set, else the available parallelism.
pub fn default_workers() -> usize {
    std::env::var("FOODCL_JOBS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, PartialEq)]
pub struct GenData {
    pub dir: PathBuf,
    pub dataset_hash: String,
    /// False when files for this hash already existed.
    pub created: bool,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenData> {
    cfg.dataset.validate()?;
    let tok = Tokenizer::new();
    let hash = cfg.dataset_hash()?;
    let dir = data_dir(&cfg.out_root(), &hash);
    if let Ok(m) = load_manifest(&dir) {
        if m.config_hash.as_deref() == Some(hash.as_str()) && load_stream(&dir, &tok).is_ok() {
            log::info!("dataset {} already present", short(&hash));
            return Ok(GenData { dir, dataset_hash: hash, created: false });
        }
    }
    let (_, stream) = generate_dataset(cfg.dataset, &tok)?;
    save_stream(&stream, &dir, &tok, Some(&hash))?;
    log::info!("wrote dataset {} to {}", short(&hash), dir.display());
    Ok(GenData { dir, dataset_hash: hash, created: true })
}

/// Loads the dataset for `cfg`, checking it was produced by the same parameters.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(TaskStream, String)> {
    let hash = cfg.dataset_hash()?;
    let dir = data_dir(&cfg.out_root(), &hash);
    let manifest = load_manifest(&dir).map_err(|_| CliError::Missing {
        what: "dataset",
        path: dir.clone(),
        hint: "run `foodcl gen-data` with the same configuration first",
    })?;
    if manifest.config_hash.as_deref() != Some(hash.as_str()) {
        return Err(CliError::HashMismatch {
            path: dir,
            found: manifest.config_hash.unwrap_or_default(),
            expected: hash,
        });
    }
    Ok((load_stream(&dir, &Tokenizer::new())?, hash))
}

// ---------------------------------------------------------------- pretrain

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub config_hash: String,
    pub dataset_hash: String,
    pub checksum: String,
    pub seconds: f64,
    pub report: PretrainReport,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(BackboneWeights, PretrainRecord)> {
    cfg.validate()?;
    let (_, dataset_hash) = load_dataset(cfg)?;
    let hash = cfg.backbone_hash()?;
    let dir = backbone_dir(&cfg.out_root(), &hash);
    let record_path = dir.join("pretrain.json");
    if dir.join(BACKBONE_FILE).exists() && record_path.exists() {
        if let Ok(w) = load_backbone(cfg) {
            let record: PretrainRecord = read_json(&record_path)?;
            if record.checksum == w.checksum() {
                log::info!("backbone {} already present", short(&hash));
                return Ok((w, record));
            }
        }
    }
    let tok = Tokenizer::new();
    let start = Instant::now();
    let corpus = pretraining_corpus(cfg.corpus.size, cfg.corpus.noise_level, cfg.corpus.seed, &tok)?;
    let (weights, report) =
        pretrain_backbone(&corpus, cfg.backbone.config(&tok), &cfg.pretrain, cfg.backbone.init_seed, |step, tr, val| {
            log::info!("pretrain step {step}: train {tr:.4} val {val:.4}");
        })?;
    let seconds = start.elapsed().as_secs_f64();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut file = weights.to_file();
    file.header["config_hash"] = hash.clone().into();
    file.save(&dir.join(BACKBONE_FILE))?;
    let record = PretrainRecord { config_hash: hash, dataset_hash, checksum: weights.checksum(), seconds, report };
    write_json(&record_path, &record)?;
    log::info!("pretrained backbone in {seconds:.1}s, best val loss {:.4}", record.report.best_val_loss);
    Ok((weights, record))
}

pub fn load_backbone(cfg: &ExperimentConfig) -> Result<BackboneWeights> {
    let hash = cfg.backbone_hash()?;
    let path = backbone_dir(&cfg.out_root(), &hash).join(BACKBONE_FILE);
    if !path.exists() {
        return Err(CliError::Missing {
            what: "backbone checkpoint",
            path,
            hint: "run `foodcl pretrain` with the same configuration first",
        });
    }
    let file = TensorFile::load(&path)?;
    let found = file.header.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    if found != hash {
        return Err(CliError::HashMismatch { path, found, expected: hash });
    }
    Ok(BackboneWeights::from_file(&file)?)
}

// ---------------------------------------------------------------- run

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub status: RunStatus,
    pub error: Option<String>,
    pub method: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub backbone_hash: String,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub stages_completed: usize,
    /// Training and evaluation seconds summed over stages, including any
    /// stages shared with other runs.
    pub seconds: f64,
    /// Stream order with test-set sizes, enough to rescore predictions.
    pub tasks: Vec<(TaskKind, usize)>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub config_hash: String,
    pub task_index: usize,
    pub task: TaskKind,
    pub specialized_log: TrainLog,
    pub cooperative_log: Option<TrainLog>,
    pub replay_samples: usize,
    pub seconds: f64,
    pub backbone_checksum: String,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub config_hash: String,
    #[serde(flatten)]
    pub predictions: StagePredictions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub report: MetricsReport,
    pub stages: Vec<StageLog>,
}

/// The loaded inputs every run shares.
pub struct Context {
    pub tok: Tokenizer,
    pub stream: TaskStream,
    pub backbone: BackboneWeights,
    pub dataset_hash: String,
    pub backbone_hash: String,
}

impl Context {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (stream, dataset_hash) = load_dataset(cfg)?;
        let backbone = load_backbone(cfg)?;
        Ok(Self { tok: Tokenizer::new(), stream, backbone, dataset_hash, backbone_hash: cfg.backbone_hash()? })
    }

    fn tasks(&self) -> Vec<(TaskKind, usize)> {
        self.stream.tasks.iter().map(|t| (t.task, t.test.len())).collect()
    }
}

fn persist_stage(dir: &Path, s: &StageResult, strategy: Strategy, hash: &str) -> Result<()> {
    let adapters = dir.join("adapters");
    fs::create_dir_all(&adapters).map_err(|e| CliError::io(&adapters, e))?;
    let role = if strategy == Strategy::DualLora { StoredRole::Specialized } else { StoredRole::Task };
    let path = adapters.join(adapter_file_name(s.task_index, role));
    save_adapters(&path, &s.adapters.specialized, s.task_index, s.task, role, hash)?;
    if let Some(coop) = &s.adapters.cooperative {
        let path = adapters.join(adapter_file_name(s.task_index, StoredRole::Cooperative));
        save_adapters(&path, coop, s.task_index, s.task, StoredRole::Cooperative, hash)?;
    }
    let log = stage_log_of(s, hash);
    write_json(&dir.join("stages").join(format!("stage{}.json", s.task_index)), &log)?;
    let preds = PredictionFile { config_hash: hash.into(), predictions: s.predictions.clone() };
    write_json(&dir.join("predictions").join(format!("stage{}.json", s.task_index)), &preds)?;
    if strategy == Strategy::DualLora {
        save_buffer(&dir.join("replay").join(format!("stage{}.jsonl", s.task_index)), &s.replay)?;
    }
    Ok(())
}

fn stage_log_of(s: &StageResult, hash: &str) -> StageLog {
    StageLog {
        config_hash: hash.into(),
        task_index: s.task_index,
        task: s.task,
        specialized_log: s.specialized_log.clone(),
        cooperative_log: s.cooperative_log.clone(),
        replay_samples: s.replay.len(),
        seconds: s.seconds,
        backbone_checksum: s.backbone_checksum.clone(),
        frozen_checksum_before: s.frozen_checksum_before.clone(),
        frozen_checksum_after: s.frozen_checksum_after.clone(),
    }
}

/// Executes one run into `dir`, optionally continuing from finished stages.
/// Every stage is persisted as soon as it ends; on failure `run.json` records
/// the error and the completed prefix stays on disk.
pub fn execute_run(
    ctx: &Context,
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    start: Option<&ControllerState>,
) -> Result<RunOutcome> {
    let run_cfg = cfg.run_config(seed)?;
    let hash = run_cfg.config_hash.clone();
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let before = ctx.backbone.checksum();
    let state = start.cloned().unwrap_or_default();
    let mut done = Vec::new();
    for s in &state.stages {
        persist_stage(dir, s, cfg.method, &hash)?;
        done.push(stage_log_of(s, &hash));
    }
    let mut record = RunRecord {
        status: RunStatus::Failed,
        error: None,
        method: cfg.method,
        seed,
        config_hash: hash.clone(),
        dataset_hash: ctx.dataset_hash.clone(),
        backbone_hash: ctx.backbone_hash.clone(),
        backbone_checksum_before: before,
        backbone_checksum_after: String::new(),
        stages_completed: done.len(),
        seconds: 0.0,
        tasks: ctx.tasks(),
        config: ExperimentConfig { out_dir: None, seeds: vec![seed], ..cfg.clone() },
    };
    let result = continue_task_stream(
        state,
        ctx.stream.tasks.len(),
        &ctx.stream,
        &ctx.backbone,
        &ctx.tok,
        &run_cfg,
        &mut |s: &StageResult| {
            persist_stage(dir, s, cfg.method, &hash).map_err(|e| foodcl_core::Error::Data(e.to_string()))?;
            done.push(stage_log_of(s, &hash));
            log::info!("{} seed {seed}: stage {} done in {:.1}s", cfg.method, s.task_index, s.seconds);
            Ok(())
        },
    );
    record.backbone_checksum_after = ctx.backbone.checksum();
    record.stages_completed = done.len();
    record.seconds = done.iter().map(|s| s.seconds).sum();
    let state = match result {
        Ok(state) => state,
        Err(e) => {
            record.error = Some(e.to_string());
            write_json(&dir.join(RUN_FILE), &record)?;
            return Err(e.into());
        }
    };
    if cfg.method == Strategy::DualLora {
        save_registry(&dir.join("adapters"), &state.registry, cfg.hyper.policy, &hash)?;
    }
    let report = report_for(&state, &ctx.stream, &run_cfg)?;
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("report.txt"), &report.to_text())?;
    record.status = RunStatus::Complete;
    write_json(&dir.join(RUN_FILE), &record)?;
    Ok(RunOutcome { dir: dir.to_path_buf(), record, report, stages: done })
}

/// Reads a finished run back from disk.
pub fn load_run(dir: &Path) -> Result<RunOutcome> {
    let record: RunRecord = read_json(&dir.join(RUN_FILE))?;
    let report: MetricsReport = read_json(&dir.join("report.json"))?;
    let mut stages = Vec::new();
    for i in 1..=record.stages_completed {
        stages.push(read_json(&dir.join("stages").join(format!("stage{i}.json")))?);
    }
    Ok(RunOutcome { dir: dir.to_path_buf(), record, report, stages })
}

/// Rescores a run from its persisted predictions alone.
pub fn rescore_run(dir: &Path) -> Result<(RunRecord, MetricsReport)> {
    let record: RunRecord = read_json(&dir.join(RUN_FILE))?;
    let mut preds = Vec::new();
    for i in 1..=record.stages_completed {
        let path = dir.join("predictions").join(format!("stage{i}.json"));
        let file: PredictionFile = read_json(&path)?;
        if file.config_hash != record.config_hash {
            return Err(CliError::HashMismatch { path, found: file.config_hash, expected: record.config_hash.clone() });
        }
        preds.push(file.predictions);
    }
    let report = build_report(
        record.method.name(),
        record.seed,
        &record.config_hash,
        &record.tasks,
        &preds,
        record.config.eval.bleu_mode,
    )?;
    Ok((record, report))
}

/// Reloads the adapters files of a run; used to check persisted state.
pub fn load_stage_adapters(dir: &Path, task_index: usize, role: StoredRole) -> Result<Vec<foodcl_core::lora::LoraAdapter>> {
    Ok(load_adapters(&dir.join("adapters").join(adapter_file_name(task_index, role)))?.1)
}

fn reusable(dir: &Path, hash: &str, ctx: &Context) -> Option<RunOutcome> {
    let out = load_run(dir).ok()?;
    let r = &out.record;
    (r.status == RunStatus::Complete
        && r.config_hash == hash
        && r.dataset_hash == ctx.dataset_hash
        && r.backbone_hash == ctx.backbone_hash)
        .then_some(out)
}

#[derive(Debug)]
pub struct JobResult {
    pub method: Strategy,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: std::result::Result<RunOutcome, String>,
}

/// Runs every method × seed, in parallel. With `reuse`, complete run
/// directories produced by the same configuration are read back instead.
pub fn cmd_run(cfg: &ExperimentConfig, methods: &[Strategy], workers: usize, reuse: bool) -> Result<Vec<JobResult>> {
    cfg.validate()?;
    let ctx = Context::load(cfg)?;
    let root = cfg.out_root();
    let mut jobs = Vec::new();
    for &m in methods {
        for &seed in &cfg.seeds {
            jobs.push((ExperimentConfig { method: m, ..cfg.clone() }, seed));
        }
    }
    let results = parallel_map(jobs, workers, |(c, seed)| {
        let dir = run_dir(&root, c.method, seed);
        let outcome = (|| {
            if reuse {
                if let Some(out) = reusable(&dir, &c.config_hash()?, &ctx) {
                    log::info!("{} seed {seed}: reusing {}", c.method, dir.display());
                    return Ok(out);
                }
            }
            execute_run(&ctx, &c, seed, &dir, None)
        })();
        JobResult { method: c.method, seed, dir, outcome: outcome.map_err(|e: CliError| e.to_string()) }
    });
    Ok(results)
}

/// Fails if any job failed, naming the first failure.
pub fn check_jobs(results: &[JobResult]) -> Result<()> {
    let failed: Vec<&JobResult> = results.iter().filter(|r| r.outcome.is_err()).collect();
    match failed.first() {
        None => Ok(()),
        Some(f) => Err(CliError::Incomplete {
            failed: failed.len(),
            total: results.len(),
            first: format!("{} seed {}: {}", f.method, f.seed, f.outcome.as_ref().unwrap_err()),
        }),
    }
}

// ---------------------------------------------------------------- ablate

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    Replay,
    Lambda,
    Qe,
}

impl Grid {
    pub const ALL: [Grid; 3] = [Grid::Qe, Grid::Replay, Grid::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Replay => "replay",
            Grid::Lambda => "lambda",
            Grid::Qe => "qe",
        }
    }

    pub fn parse(s: &str) -> Result<Vec<Grid>> {
        match s {
            "all" => Ok(Grid::ALL.to_vec()),
            _ => Grid::ALL
                .into_iter()
                .find(|g| g.name() == s)
                .map(|g| vec![g])
                .ok_or_else(|| CliError::Config(format!("unknown grid {s:?}; use replay, lambda, qe or all"))),
        }
    }
}

pub const REPLAY_GRID: [f64; 3] = [0.01, 0.05, 0.10];
pub const LAMBDA_GRID: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub grid: Grid,
    pub label: String,
    pub config: ExperimentConfig,
}

impl Cell {
    pub fn dir(&self, root: &Path, seed: u64) -> PathBuf {
        let slug: String = self.label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' }).collect();
        root.join("ablate").join(self.grid.name()).join(slug).join(format!("seed{seed}"))
    }
}

/// The cells of one grid as deltas of `base`, always with the dual method.
pub fn grid_cells(base: &ExperimentConfig, grid: Grid) -> Vec<Cell> {
    let dual = ExperimentConfig { method: Strategy::DualLora, ..base.clone() };
    match grid {
        Grid::Replay => REPLAY_GRID
            .iter()
            .map(|&p| {
                let mut c = dual.clone();
                c.replay.proportion = p;
                Cell { grid, label: format!("{}%", (p * 100.0).round()), config: c }
            })
            .collect(),
        Grid::Lambda => LAMBDA_GRID
            .iter()
            .map(|&l| {
                let mut c = dual.clone();
                c.hyper.lambda_o = l;
                Cell { grid, label: format!("lambda {l}"), config: c }
            })
            .collect(),
        Grid::Qe => [true, false]
            .into_iter()
            .map(|on| {
                let mut c = dual.clone();
                c.replay.quality_enhancement = on;
                Cell { grid, label: if on { "QE on" } else { "QE off" }.into(), config: c }
            })
            .collect(),
    }
}

/// Configurations that agree on this key train identical first stages: the
/// first stage has no earlier cooperative subspace and nothing to replay.
fn first_stage_key(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.hyper.lambda_o = 0.0;
    c.replay = Default::default();
    c.config_hash()
}

#[derive(Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub runs: Vec<JobResult>,
}

/// Runs every cell of `grids` for every seed. Identical configurations are
/// computed once, first stages are shared between cells that agree on them,
/// and with `reuse` a complete matching run (for instance the main dual run)
/// is read back. Failures stay inside their cell.
pub fn cmd_ablate(cfg: &ExperimentConfig, grids: &[Grid], workers: usize, reuse: bool) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let ctx = Context::load(cfg)?;
    let root = cfg.out_root();
    let cells: Vec<Cell> = grids.iter().flat_map(|&g| grid_cells(cfg, g)).collect();

    // Unique (config, seed) jobs and every directory each one serves.
    let mut unique: BTreeMap<(String, u64), (ExperimentConfig, Vec<PathBuf>)> = BTreeMap::new();
    for cell in &cells {
        let hash = cell.config.config_hash()?;
        for &seed in &cfg.seeds {
            let entry = unique.entry((hash.clone(), seed)).or_insert_with(|| (cell.config.clone(), Vec::new()));
            entry.1.push(cell.dir(&root, seed));
        }
    }
    let mut known: BTreeMap<(String, u64), RunOutcome> = BTreeMap::new();
    if reuse {
        for ((hash, seed), (c, dirs)) in &unique {
            let candidates = dirs.iter().cloned().chain([run_dir(&root, c.method, *seed)]);
            if let Some(out) = candidates.filter_map(|d| reusable(&d, hash, &ctx)).next() {
                known.insert((hash.clone(), *seed), out);
            }
        }
    }

    let todo: Vec<((String, u64), ExperimentConfig, Vec<PathBuf>)> = unique
        .iter()
        .filter(|(k, _)| !known.contains_key(*k))
        .map(|(k, (c, d))| (k.clone(), c.clone(), d.clone()))
        .collect();
    let mut first: BTreeMap<(String, u64), ExperimentConfig> = BTreeMap::new();
    for ((_, seed), c, _) in &todo {
        first.entry((first_stage_key(c)?, *seed)).or_insert_with(|| c.clone());
    }
    let first_jobs: Vec<((String, u64), ExperimentConfig)> = first.into_iter().collect();
    let shared: BTreeMap<(String, u64), std::result::Result<ControllerState, String>> =
        parallel_map(first_jobs, workers, |((key, seed), c)| {
            let state = c.run_config(seed).map_err(|e| e.to_string()).and_then(|rc| {
                continue_task_stream(ControllerState::default(), 1, &ctx.stream, &ctx.backbone, &ctx.tok, &rc, &mut |_| Ok(()))
                    .map_err(|e| e.to_string())
            });
            ((key, seed), state)
        })
        .into_iter()
        .collect();

    let computed = parallel_map(todo, workers, |((hash, seed), c, dirs)| {
        let key = first_stage_key(&c).map_err(|e| e.to_string());
        let outcome = key.and_then(|k| {
            let start = shared[&(k, seed)].as_ref().map_err(|e| format!("first stage: {e}"))?;
            execute_run(&ctx, &c, seed, &dirs[0], Some(start)).map_err(|e| e.to_string())
        });
        if let Err(e) = &outcome {
            log::warn!("ablation cell {} seed {seed} failed: {e}", short(&hash));
        }
        ((hash, seed), outcome)
    });
    let mut failed: BTreeMap<(String, u64), String> = BTreeMap::new();
    for (k, outcome) in computed {
        match outcome {
            Ok(out) => {
                known.insert(k, out);
            }
            Err(e) => {
                failed.insert(k, e);
            }
        }
    }

    let mut results = Vec::new();
    for cell in cells {
        let hash = cell.config.config_hash()?;
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let dir = cell.dir(&root, seed);
            let k = (hash.clone(), seed);
            let outcome = match (known.get(&k), failed.get(&k)) {
                (Some(out), _) => {
                    if out.dir != dir {
                        copy_dir(&out.dir, &dir)?;
                    }
                    Ok(RunOutcome { dir: dir.clone(), ..out.clone() })
                }
                (None, Some(e)) => Err(e.clone()),
                (None, None) => Err("not run".to_string()),
            };
            runs.push(JobResult { method: Strategy::DualLora, seed, dir, outcome });
        }
        results.push(CellResult { cell, runs });
    }
    Ok(results)
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    if to.exists() {
        fs::remove_dir_all(to).map_err(|e| CliError::io(to, e))?;
    }
    fs::create_dir_all(to).map_err(|e| CliError::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| CliError::io(from, e))? {
        let entry = entry.map_err(|e| CliError::io(from, e))?;
        let target = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target).map_err(|e| CliError::io(&target, e))?;
        }
    }
    Ok(())
}
