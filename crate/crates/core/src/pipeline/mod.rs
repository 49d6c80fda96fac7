//! End-to-end runs: train → prune → allocate → optimize → recover, with every
//! artifact persisted under one output directory.

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Budget, PipelineConfig};

use crate::adapter::{finetune, full_finetune, AdaptedModel, AdapterConfig, FinetuneConfig, Precision};
use crate::bo::{pareto_csv, read_history, run_loop_from, trials_csv, Clock, Evaluation, Feasibility, LoopConfig, StopReason, TrialRecord};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::io::{read_json, to_sorted_json, write_atomic, write_json};
use crate::mi::{allocate_bits, mi_report, trace_activations, AllocationReport, BitConfig, MIReport, MemoryModel};
use crate::models::{accuracy, build_model, generate_dataset_with, train, ModelSpec, SyntheticDataset, ToyModel};
use crate::prune::{prune_model, PruneReport};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Prune,
    Allocate,
    Optimize,
    Recover,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Train, Stage::Prune, Stage::Allocate, Stage::Optimize, Stage::Recover];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Prune => "prune",
            Stage::Allocate => "allocate",
            Stage::Optimize => "optimize",
            Stage::Recover => "recover",
        }
    }

    fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Train => &["baseline.ckpt", "train.json"],
            Stage::Prune => &["pruned.ckpt", "prune_report.json"],
            Stage::Allocate => &["mi_report.json", "allocation.json"],
            Stage::Optimize => &["trials.jsonl", "pareto.csv", "optimize.json"],
            Stage::Recover => &["recovered.ckpt", "recover.json"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Wall-clock duration; `None` under the logical clock.
    pub seconds: Option<f64>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub failure: Option<StageFailure>,
}

impl RunManifest {
    fn fresh(hash: String) -> Self {
        let stages = Stage::ALL
            .iter()
            .map(|&stage| StageRecord { stage, status: StageStatus::Pending, seconds: None, artifacts: Vec::new() })
            .collect();
        RunManifest { config_hash: hash, stages, failure: None }
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.record(stage).status == StageStatus::Done
    }

    pub fn record(&self, stage: Stage) -> &StageRecord {
        &self.stages[stage as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f32,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub best: TrialRecord,
    pub stop: StopReason,
    pub trials: usize,
    pub front_size: usize,
    pub m_max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverSummary {
    pub b: BitConfig,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub memory_bytes: u64,
    /// fp32 bytes of every weight and bias of the pruned model.
    pub fp32_bytes: u64,
    pub checkpoint_bytes: u64,
}

/// What a call to [`run_pipeline`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    /// Stages executed by this call (skipped stages excluded).
    pub executed: Vec<Stage>,
}

pub fn dataset(cfg: &PipelineConfig) -> Result<SyntheticDataset> {
    generate_dataset_with(&cfg.data, substream(cfg.seed, "dataset"))
}

/// Per-layer precision of `b` under the configured format and `δ`.
pub fn precisions_for(cfg: &PipelineConfig, b: &BitConfig) -> Vec<Precision> {
    b.bits()
        .iter()
        .map(|&bits| match cfg.quant {
            None => Precision::Full,
            Some(format) => Precision::Quant { format, bits, delta: cfg.quant_delta },
        })
        .collect()
}

pub fn memory_model(cfg: &PipelineConfig, model: &ToyModel) -> MemoryModel {
    MemoryModel::for_model(model, if cfg.method.is_some() { cfg.rank } else { 0 })
}

/// `M_max` for `model` under the configured budget.
pub fn memory_budget(cfg: &PipelineConfig, model: &ToyModel) -> u64 {
    let mem = memory_model(cfg, model);
    let layers = mem.layers();
    cfg.budget.resolve(mem.cost(&BitConfig::uniform(layers, 4)), mem.cost(&BitConfig::uniform(layers, 8)))
}

/// Quantizes the pruned model with `b`, initializes adapters and fine-tunes.
/// Used both to score search trials and to build the final model, so a
/// configuration's `P` is reproducible.
pub struct RecoveryEvaluator<'a> {
    pub cfg: &'a PipelineConfig,
    pub model: &'a ToyModel,
    pub data: &'a SyntheticDataset,
}

impl RecoveryEvaluator<'_> {
    pub fn recover(&self, b: &BitConfig) -> Result<AdaptedModel> {
        let cfg = self.cfg;
        let adapters = AdapterConfig { method: cfg.method, rank: cfg.rank };
        let mut am = AdaptedModel::build(self.model, &precisions_for(cfg, b), &adapters, substream(cfg.seed, "adapter"))?;
        let ft = FinetuneConfig { steps: cfg.steps, lr: cfg.lr, batch_size: cfg.batch_size };
        let ft_seed = substream(cfg.seed, "finetune");
        if cfg.steps > 0 {
            if cfg.full_finetune {
                am = full_finetune(&am, self.data, &ft, ft_seed)?.0;
            } else if cfg.method.is_some() {
                finetune(&mut am, self.data, &ft, ft_seed)?;
            }
        }
        Ok(am)
    }

    pub fn evaluate(&self, b: &BitConfig) -> Result<Evaluation> {
        let am = self.recover(b)?;
        Ok(Evaluation { p: am.accuracy(&self.data.validation)?, m: am.memory_bytes() })
    }
}

fn fp32_bytes(model: &ToyModel) -> u64 {
    (model.param_count() * 4) as u64
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: &'a Path,
    resume: bool,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn load_model(&self, name: &str) -> Result<ToyModel> {
        Checkpoint::load(&self.path(name))?.to_model()
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        let cfg = self.cfg;
        let data = dataset(cfg)?;
        match stage {
            Stage::Train => {
                let spec = ModelSpec { arch: cfg.arch, input_dim: cfg.data.dim, classes: cfg.data.classes };
                let mut model = build_model(spec, substream(cfg.seed, "init"))?;
                let report = train(&mut model, &data, &cfg.train, substream(cfg.seed, "train"))?;
                let test_accuracy = accuracy(&model.predict(&data.test.inputs)?, &data.test.labels);
                Checkpoint::from_model(&model).save(&self.path("baseline.ckpt"))?;
                let summary = TrainSummary {
                    val_accuracy: report.val_accuracy,
                    test_accuracy,
                    final_loss: report.final_loss,
                    param_count: model.param_count(),
                };
                write_json(&self.path("train.json"), &summary)
            }
            Stage::Prune => {
                let model = self.load_model("baseline.ckpt")?;
                let (pruned, report) = prune_model(&model, &data.calibration, &cfg.importance, cfg.prune_rate)?;
                Checkpoint::from_model(&pruned).save(&self.path("pruned.ckpt"))?;
                write_json(&self.path("prune_report.json"), &report)
            }
            Stage::Allocate => {
                let model = self.load_model("pruned.ckpt")?;
                let traces = trace_activations(&model, &data.calibration.inputs, substream(cfg.seed, "projection"))?;
                let mi = mi_report(&traces, cfg.bins, cfg.seed)?;
                let mem = memory_model(cfg, &model);
                let m_max = memory_budget(cfg, &model);
                let b = allocate_bits(&mi.mi, &mem, m_max, cfg.cap_fraction)?;
                let report = AllocationReport { memory_bytes: mem.cost(&b), b_avg: b.b_avg(), b, m_max };
                write_json(&self.path("mi_report.json"), &mi)?;
                write_json(&self.path("allocation.json"), &report)
            }
            Stage::Optimize => {
                let model = self.load_model("pruned.ckpt")?;
                let alloc: AllocationReport = read_json(&self.path("allocation.json"))?;
                let feas = Feasibility { memory: memory_model(cfg, &model), m_max: alloc.m_max, cap_fraction: cfg.cap_fraction };
                let history = self.path("trials.jsonl");
                let prior = if self.resume && history.exists() { read_history(&history)? } else { Vec::new() };
                let loop_cfg = LoopConfig {
                    iterations: cfg.bo_iters,
                    seed: substream(cfg.seed, "bo"),
                    steps: cfg.steps,
                    random_init: cfg.bo_random_init,
                    hyper: Some(cfg.hyper(feas.layers())),
                    ei_tolerance: crate::bo::EI_TOLERANCE,
                    clock: cfg.clock,
                };
                let evaluator = RecoveryEvaluator { cfg, model: &model, data: &data };
                let mut eval = |b: &BitConfig, _seed: u64| evaluator.evaluate(b);
                let result = run_loop_from(prior, &alloc.b, &mut eval, &feas, &loop_cfg, Some(&history))?;
                write_atomic(&self.path("pareto.csv"), &pareto_csv(&result.front)?)?;
                let summary = OptimizeSummary {
                    best: best_trial(&result.trials).clone(),
                    stop: result.stop,
                    trials: result.trials.len(),
                    front_size: result.front.len(),
                    m_max: alloc.m_max,
                };
                write_json(&self.path("optimize.json"), &summary)
            }
            Stage::Recover => {
                let model = self.load_model("pruned.ckpt")?;
                let b = match &cfg.bits {
                    Some(b) => {
                        b.validate(model.linears().len())?;
                        b.clone()
                    }
                    None => read_json::<OptimizeSummary>(&self.path("optimize.json"))?.best.b,
                };
                let evaluator = RecoveryEvaluator { cfg, model: &model, data: &data };
                let am = evaluator.recover(&b)?;
                let ck = am.to_checkpoint();
                ck.save(&self.path("recovered.ckpt"))?;
                let summary = RecoverSummary {
                    val_accuracy: am.accuracy(&data.validation)?,
                    test_accuracy: am.accuracy(&data.test)?,
                    memory_bytes: am.memory_bytes(),
                    fp32_bytes: fp32_bytes(&model),
                    checkpoint_bytes: ck.byte_len() as u64,
                    b,
                };
                write_json(&self.path("recover.json"), &summary)
            }
        }
    }
}

/// Highest `P`; ties go to lower `M`, then the earlier trial.
pub fn best_trial(trials: &[TrialRecord]) -> &TrialRecord {
    let mut best = &trials[0];
    for t in &trials[1..] {
        if t.p > best.p || (t.p == best.p && t.m < best.m) {
            best = t;
        }
    }
    best
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(&dir.join("manifest.json"), manifest)
}

/// Canonical config text without the output directory.
fn config_text(cfg: &PipelineConfig) -> String {
    cfg.to_text().lines().filter(|l| !l.starts_with("run.out=")).map(|l| format!("{l}\n")).collect()
}

/// Runs every stage up to and including `until`. With `resume`, stages the
/// manifest already marks done (and whose artifacts exist) are skipped, and
/// a partial trial history is continued.
pub fn run_pipeline_until(cfg: &PipelineConfig, until: Stage, resume: bool) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let dir = cfg.out.as_path();
    std::fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let manifest_path = dir.join("manifest.json");
    let mut manifest = if resume && manifest_path.exists() {
        let m: RunManifest = read_json(&manifest_path)?;
        if m.config_hash != hash {
            return Err(Error::config(format!(
                "{} holds a run of config {}, not {hash}",
                dir.display(),
                m.config_hash
            )));
        }
        m
    } else {
        RunManifest::fresh(hash)
    };
    write_atomic(&dir.join("config.txt"), config_text(cfg).as_bytes())?;

    let run = Run { cfg, dir, resume };
    let mut executed = Vec::new();
    let mut invalidated = false;
    for stage in Stage::ALL.into_iter().filter(|&s| s <= until) {
        let rec = manifest.record(stage);
        let present = stage.artifacts().iter().all(|a| dir.join(a).exists());
        if !invalidated && rec.status == StageStatus::Done && present {
            continue;
        }
        // later stages depend on this one's outputs
        invalidated = true;
        for later in &mut manifest.stages[stage as usize..] {
            later.status = StageStatus::Pending;
            later.seconds = None;
            later.artifacts.clear();
        }
        manifest.failure = None;
        if stage == Stage::Optimize && !executed.is_empty() {
            // a partial history from before an upstream re-run is stale
            let stale = dir.join("trials.jsonl");
            if stale.exists() {
                std::fs::remove_file(stale)?;
            }
        }
        let start = Instant::now();
        let result = run.execute(stage);
        let seconds = match cfg.clock {
            Clock::Wall => Some(start.elapsed().as_secs_f64()),
            Clock::Logical => None,
        };
        let rec = &mut manifest.stages[stage as usize];
        rec.seconds = seconds;
        match result {
            Ok(()) => {
                rec.status = StageStatus::Done;
                rec.artifacts = stage.artifacts().iter().map(|s| s.to_string()).collect();
                executed.push(stage);
                write_manifest(dir, &manifest)?;
            }
            Err(e) => {
                rec.status = StageStatus::Failed;
                manifest.failure = Some(StageFailure { stage, message: e.to_string() });
                write_manifest(dir, &manifest)?;
                return Err(Error::Stage { stage: stage.name(), source: Box::new(e) });
            }
        }
    }
    write_manifest(dir, &manifest)?;
    Ok(PipelineOutcome { manifest, executed })
}

pub fn run_pipeline(cfg: &PipelineConfig, resume: bool) -> Result<PipelineOutcome> {
    run_pipeline_until(cfg, Stage::Recover, resume)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: u8,
    pub label: String,
    pub bits: Vec<BitConfig>,
    /// Validation accuracy, the quantity the search maximizes.
    pub accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    pub memory_bytes: Vec<u64>,
    pub mean: f64,
    pub sd: f64,
    pub test_mean: f64,
    pub test_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub prune_rate: f64,
    pub m_max: Vec<u64>,
    pub modes: Vec<ModeResult>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

struct SeedOutcome {
    m_max: u64,
    /// `(b, val, test, memory)` for modes 1, 2, 3.
    modes: [(BitConfig, f64, f64, u64); 3],
}

fn compare_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedOutcome> {
    let mut c = cfg.clone();
    c.seed = seed;
    c.out = cfg.out.join(format!("seed-{seed}"));
    c.bits = None;
    run_pipeline_until(&c, Stage::Optimize, true)?;
    let dir = c.out.clone();
    let model = Checkpoint::load(&dir.join("pruned.ckpt"))?.to_model()?;
    let data = dataset(&c)?;
    let trials = read_history(&dir.join("trials.jsonl"))?;
    let opt: OptimizeSummary = read_json(&dir.join("optimize.json"))?;
    let evaluator = RecoveryEvaluator { cfg: &c, model: &model, data: &data };
    let layers = model.linears().len();
    let picks = [BitConfig::uniform(layers, 4), trials[0].b.clone(), best_trial(&trials).b.clone()];
    let mut modes = Vec::with_capacity(3);
    for b in picks {
        let am = evaluator.recover(&b)?;
        let val = am.accuracy(&data.validation)?;
        let test = am.accuracy(&data.test)?;
        modes.push((b, val, test, am.memory_bytes()));
    }
    let modes: [(BitConfig, f64, f64, u64); 3] = modes.try_into().expect("three modes");
    Ok(SeedOutcome { m_max: opt.m_max, modes })
}

/// Uniform 4-bit (mode 1), MI-allocated (mode 2) and search-refined
/// (mode 3) recovery on the same seeds. Seeds run in parallel, each under
/// `out/seed-<s>`; the table is written to `out/compare.json` and
/// `out/compare.csv`.
pub fn compare_modes(cfg: &PipelineConfig, seeds: &[u64]) -> Result<Comparison> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("compare needs at least one seed"));
    }
    let outcomes: Vec<SeedOutcome> = seeds.par_iter().map(|&s| compare_seed(cfg, s)).collect::<Result<_>>()?;
    let labels = ["uniform-4bit", "mi-allocated", "bo-refined"];
    let modes = (0..3)
        .map(|k| {
            let accuracy: Vec<f64> = outcomes.iter().map(|o| o.modes[k].1).collect();
            let test_accuracy: Vec<f64> = outcomes.iter().map(|o| o.modes[k].2).collect();
            let (mean, sd) = mean_sd(&accuracy);
            let (test_mean, test_sd) = mean_sd(&test_accuracy);
            ModeResult {
                mode: k as u8 + 1,
                label: labels[k].to_string(),
                bits: outcomes.iter().map(|o| o.modes[k].0.clone()).collect(),
                memory_bytes: outcomes.iter().map(|o| o.modes[k].3).collect(),
                accuracy,
                test_accuracy,
                mean,
                sd,
                test_mean,
                test_sd,
            }
        })
        .collect();
    let table = Comparison {
        seeds: seeds.to_vec(),
        prune_rate: cfg.prune_rate,
        m_max: outcomes.iter().map(|o| o.m_max).collect(),
        modes,
    };
    std::fs::create_dir_all(&cfg.out)?;
    write_atomic(&cfg.out.join("compare.json"), to_sorted_json(&table)?.as_bytes())?;
    write_atomic(&cfg.out.join("compare.csv"), &comparison_csv(&table)?)?;
    Ok(table)
}

fn comparison_csv(table: &Comparison) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "label", "mean_accuracy", "sd_accuracy", "mean_test_accuracy", "sd_test_accuracy", "mean_memory_bytes"])?;
    for m in &table.modes {
        let mem = m.memory_bytes.iter().sum::<u64>() as f64 / m.memory_bytes.len() as f64;
        w.write_record([
            m.mode.to_string(),
            m.label.clone(),
            m.mean.to_string(),
            m.sd.to_string(),
            m.test_mean.to_string(),
            m.test_sd.to_string(),
            mem.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes every trial of `history` with an `on_front` column. Returns the
/// number of trials.
pub fn export_pareto(history: &Path, out: &Path) -> Result<usize> {
    let trials = read_history(history)?;
    write_atomic(out, &trials_csv(&trials)?)?;
    Ok(trials.len())
}

/// Reads a stage artifact written by [`run_pipeline`].
pub fn load_summary<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    read_json(&dir.join(name))
}

pub fn load_prune_report(dir: &Path) -> Result<PruneReport> {
    load_summary(dir, "prune_report.json")
}

pub fn load_mi_report(dir: &Path) -> Result<MIReport> {
    load_summary(dir, "mi_report.json")
}
