//! Bayesian optimization over per-layer bit widths.
//!
//! A GP on the 0/1 encoding of `b` predicts performance; the next
//! configuration maximizes expected improvement over the feasible set
//! (8-bit cap and memory budget). Memory acts only as a constraint and the
//! trade-off is reported through the Pareto front.

mod gp;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use gp::{gp_fit, GpHyper, GpModel};

use crate::error::{Error, Result};
use crate::io::{to_sorted_json_line, write_atomic};
use crate::mi::{eight_bit_cap, BitConfig, MemoryModel};
use crate::quant::std_normal_cdf;
use crate::rng;

/// Layers up to which the feasible set is enumerated exhaustively.
pub const EXHAUSTIVE_MAX_LAYERS: usize = 16;
pub const RANDOM_CANDIDATES: usize = 1000;
pub const EI_TOLERANCE: f64 = 1e-6;

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub b: BitConfig,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "M")]
    pub m: u64,
    pub seed: u64,
    pub steps: usize,
    pub iso_time: String,
}

/// Where trial timestamps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    /// Trial `i` is stamped `i` seconds after the Unix epoch, keeping
    /// histories byte-reproducible.
    #[default]
    Logical,
    Wall,
}

impl Clock {
    pub fn stamp(self, index: usize) -> String {
        let t = match self {
            Clock::Logical => chrono::DateTime::from_timestamp(index as i64, 0).expect("small timestamp"),
            Clock::Wall => chrono::Utc::now(),
        };
        t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
    }
}

/// Hard constraints every proposal must meet.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub memory: MemoryModel,
    pub m_max: u64,
    pub cap_fraction: f64,
}

impl Feasibility {
    pub fn layers(&self) -> usize {
        self.memory.layers()
    }

    pub fn cap(&self) -> usize {
        eight_bit_cap(self.layers(), self.cap_fraction)
    }

    pub fn is_feasible(&self, b: &BitConfig) -> bool {
        b.validate(self.layers()).is_ok() && b.eight_bit_count() <= self.cap() && self.memory.cost(b) <= self.m_max
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `(μ − best)·Φ(z) + σ·φ(z)` with `z = (μ − best)/σ`; `max(0, μ − best)`
/// when `σ = 0`.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let gain = mean - best;
    if sd <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    (gain * std_normal_cdf(z) + sd * std_normal_pdf(z)).max(0.0)
}

pub fn acquisition_ei(gp: &GpModel, b: &BitConfig, best: f64) -> f64 {
    let (mean, var) = gp.predict(&b.encode());
    let sd = if var <= 1e-10 { 0.0 } else { var.sqrt() };
    expected_improvement(mean, sd, best)
}

/// Feasible, unevaluated configurations to score, in ascending order.
pub fn candidates(
    feas: &Feasibility,
    evaluated: &BTreeSet<BitConfig>,
    front: &[BitConfig],
    rng: &mut rng::Rng,
) -> BTreeSet<BitConfig> {
    let layers = feas.layers();
    let cap = feas.cap();
    let mut out = BTreeSet::new();
    let offer = |b: BitConfig, out: &mut BTreeSet<BitConfig>| {
        if !evaluated.contains(&b) && feas.is_feasible(&b) {
            out.insert(b);
        }
    };
    if layers <= EXHAUSTIVE_MAX_LAYERS {
        for mask in 0u32..(1u32 << layers) {
            if mask.count_ones() as usize <= cap {
                offer(BitConfig((0..layers).map(|i| if mask >> i & 1 == 1 { 8 } else { 4 }).collect()), &mut out);
            }
        }
        return out;
    }
    let mut draws = 0;
    while out.len() < RANDOM_CANDIDATES && draws < RANDOM_CANDIDATES * 20 {
        draws += 1;
        let k = rng.random_range(0..=cap);
        let mut b = BitConfig::uniform(layers, 4);
        for i in sample(rng, layers, k) {
            b.0[i] = 8;
        }
        offer(b, &mut out);
    }
    for f in front {
        for i in 0..layers {
            let mut b = f.clone();
            b.0[i] = if b.0[i] == 8 { 4 } else { 8 };
            offer(b, &mut out);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub b: BitConfig,
    pub ei: f64,
}

/// EI argmax over [`candidates`]; equal EI keeps the smallest `b`.
pub fn propose_next(
    gp: &GpModel,
    feas: &Feasibility,
    evaluated: &BTreeSet<BitConfig>,
    front: &[BitConfig],
    best: f64,
    rng: &mut rng::Rng,
) -> Result<Proposal> {
    let mut winner: Option<Proposal> = None;
    for b in candidates(feas, evaluated, front, rng) {
        let ei = acquisition_ei(gp, &b, best);
        if winner.as_ref().is_none_or(|w| ei > w.ei) {
            winner = Some(Proposal { b, ei });
        }
    }
    winner.ok_or(Error::Exhausted)
}

/// Trials not dominated in (higher P, lower M), ordered by ascending M,
/// then descending P, then `b`.
pub fn pareto_front(trials: &[TrialRecord]) -> Vec<TrialRecord> {
    let dominates = |a: &TrialRecord, b: &TrialRecord| a.p >= b.p && a.m <= b.m && (a.p > b.p || a.m < b.m);
    let mut front: Vec<TrialRecord> =
        trials.iter().filter(|t| !trials.iter().any(|o| dominates(o, t))).cloned().collect();
    front.sort_by(|a, b| a.m.cmp(&b.m).then(b.p.total_cmp(&a.p)).then_with(|| a.b.cmp(&b.b)));
    front
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub p: f64,
    pub m: u64,
}

/// `P(b)` and `M(b)` for a configuration, deterministic given the seed.
pub trait Evaluator {
    fn evaluate(&mut self, b: &BitConfig, seed: u64) -> Result<Evaluation>;
}

impl<F: FnMut(&BitConfig, u64) -> Result<Evaluation>> Evaluator for F {
    fn evaluate(&mut self, b: &BitConfig, seed: u64) -> Result<Evaluation> {
        self(b, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Proposal rounds after the initial trials.
    pub iterations: usize,
    pub seed: u64,
    /// Fine-tune budget recorded with each trial.
    pub steps: usize,
    /// Random feasible configurations evaluated after `b₀`.
    pub random_init: usize,
    pub hyper: Option<GpHyper>,
    pub ei_tolerance: f64,
    pub clock: Clock,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iterations: 20,
            seed: 0,
            steps: 0,
            random_init: 0,
            hyper: None,
            ei_tolerance: EI_TOLERANCE,
            clock: Clock::Logical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Iterations,
    Converged,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopResult {
    pub trials: Vec<TrialRecord>,
    pub front: Vec<TrialRecord>,
    pub stop: StopReason,
}

fn initial_plan(initial: &BitConfig, feas: &Feasibility, cfg: &LoopConfig) -> Vec<BitConfig> {
    let mut plan = vec![initial.clone()];
    if cfg.random_init == 0 {
        return plan;
    }
    let mut g = rng::rng_for(cfg.seed, "bo/random-init");
    let mut seen: BTreeSet<BitConfig> = plan.iter().cloned().collect();
    let pool: Vec<BitConfig> = candidates(feas, &seen, &[], &mut g).into_iter().collect();
    let picks = sample(&mut g, pool.len(), cfg.random_init.min(pool.len()));
    for i in picks {
        if seen.insert(pool[i].clone()) {
            plan.push(pool[i].clone());
        }
    }
    plan
}

/// Runs the loop, continuing from `prior` trials (e.g. a partial history
/// from an interrupted run). When `history` is set, the full trial list is
/// rewritten atomically after every evaluation.
pub fn run_loop_from<E: Evaluator>(
    prior: Vec<TrialRecord>,
    initial: &BitConfig,
    evaluator: &mut E,
    feas: &Feasibility,
    cfg: &LoopConfig,
    history: Option<&Path>,
) -> Result<LoopResult> {
    if !feas.is_feasible(initial) {
        return Err(Error::config(format!("initial configuration {initial} is infeasible")));
    }
    let hyper = cfg.hyper.unwrap_or_else(|| GpHyper::for_layers(feas.layers()));
    let mut trials = prior;
    let record = |b: BitConfig, trials: &mut Vec<TrialRecord>, evaluator: &mut E| -> Result<()> {
        let e = evaluator.evaluate(&b, cfg.seed)?;
        if !(0.0..=1.0).contains(&e.p) || e.m == 0 {
            return Err(Error::Contract(format!("evaluation of {b} gave P = {}, M = {}", e.p, e.m)));
        }
        let stamp = cfg.clock.stamp(trials.len());
        trials.push(TrialRecord { b, p: e.p, m: e.m, seed: cfg.seed, steps: cfg.steps, iso_time: stamp });
        if let Some(path) = history {
            write_history(path, trials)?;
        }
        Ok(())
    };

    let plan = initial_plan(initial, feas, cfg);
    for (i, b) in plan.iter().enumerate() {
        match trials.get(i) {
            Some(t) if &t.b == b => {}
            Some(t) => {
                return Err(Error::Contract(format!("history trial {i} is {} but the plan expects {b}", t.b)));
            }
            None => record(b.clone(), &mut trials, evaluator)?,
        }
    }

    let mut stop = StopReason::Iterations;
    for t in 0..cfg.iterations {
        if trials.len() > plan.len() + t {
            continue;
        }
        let xs: Vec<Vec<f64>> = trials.iter().map(|r| r.b.encode()).collect();
        let ys: Vec<f64> = trials.iter().map(|r| r.p).collect();
        let gp = gp_fit(&xs, &ys, hyper)?;
        let best = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let evaluated: BTreeSet<BitConfig> = trials.iter().map(|r| r.b.clone()).collect();
        let front: Vec<BitConfig> = pareto_front(&trials).into_iter().map(|r| r.b).collect();
        let mut g = rng::rng_for(cfg.seed, &format!("bo/propose/{t}"));
        let proposal = match propose_next(&gp, feas, &evaluated, &front, best, &mut g) {
            Ok(p) => p,
            Err(Error::Exhausted) => {
                stop = StopReason::Exhausted;
                break;
            }
            Err(e) => return Err(e),
        };
        if proposal.ei < cfg.ei_tolerance {
            stop = StopReason::Converged;
            break;
        }
        record(proposal.b, &mut trials, evaluator)?;
    }
    let front = pareto_front(&trials);
    Ok(LoopResult { trials, front, stop })
}

pub fn run_loop<E: Evaluator>(
    initial: &BitConfig,
    evaluator: &mut E,
    feas: &Feasibility,
    cfg: &LoopConfig,
    history: Option<&Path>,
) -> Result<LoopResult> {
    run_loop_from(Vec::new(), initial, evaluator, feas, cfg, history)
}

/// One sorted-key JSON object per line.
pub fn history_text(trials: &[TrialRecord]) -> Result<String> {
    let mut s = String::new();
    for t in trials {
        s.push_str(&to_sorted_json_line(t)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_history(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    write_atomic(path, history_text(trials)?.as_bytes())
}

pub fn read_history(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

/// CSV with header `memory_bytes,performance,config`.
pub fn pareto_csv(front: &[TrialRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["memory_bytes", "performance", "config"])?;
    for t in front {
        w.write_record([t.m.to_string(), t.p.to_string(), t.b.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Every trial, with an `on_front` flag.
pub fn trials_csv(trials: &[TrialRecord]) -> Result<Vec<u8>> {
    let front = pareto_front(trials);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["memory_bytes", "performance", "config", "on_front"])?;
    for t in trials {
        let on = front.iter().any(|f| f == t);
        w.write_record([t.m.to_string(), t.p.to_string(), t.b.to_string(), on.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
