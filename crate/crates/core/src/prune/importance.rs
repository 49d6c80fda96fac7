use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::Side;
use super::groups::CoupledGroup;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{ParamBinder, SplitData, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Product,
    Max,
    Last,
}

impl FromStr for Order {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Order::First),
            "second" => Ok(Order::Second),
            o => Err(Error::config(format!("unknown importance order `{o}`"))),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "product" | "prod" => Ok(Aggregation::Product),
            "max" => Ok(Aggregation::Max),
            "last" => Ok(Aggregation::Last),
            o => Err(Error::config(format!("unknown aggregation `{o}`"))),
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::First => "first",
            Order::Second => "second",
        })
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Product => "product",
            Aggregation::Max => "max",
            Aggregation::Last => "last",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    pub order: Order,
    pub aggregation: Aggregation,
    pub calib_size: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig { order: Order::Second, aggregation: Aggregation::Sum, calib_size: 256 }
    }
}

/// Per-parameter loss gradient and Fisher diagonal over a calibration batch.
#[derive(Debug, Clone)]
pub struct GradientStats {
    /// `(weight, bias)` per linear: mean of per-sample gradients.
    pub grad: Vec<(Vec<f64>, Vec<f64>)>,
    /// `(weight, bias)` per linear: mean of squared per-sample gradients.
    pub fisher: Vec<(Vec<f64>, Vec<f64>)>,
    pub samples: usize,
}

const CHUNK: usize = 16;

impl GradientStats {
    pub fn compute(model: &ToyModel, calib: &SplitData) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::input("empty calibration batch"));
        }
        let shapes: Vec<(usize, usize)> = model.linears().iter().map(|l| (l.weight.numel(), l.bias.numel())).collect();
        let zeros = || -> Vec<(Vec<f64>, Vec<f64>)> { shapes.iter().map(|&(w, b)| (vec![0.0; w], vec![0.0; b])).collect() };
        let n = calib.len();
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        // fixed chunks, summed in order, keep the result independent of scheduling
        let partial: Vec<Result<(Vec<(Vec<f64>, Vec<f64>)>, Vec<(Vec<f64>, Vec<f64>)>)>> = starts
            .par_iter()
            .map(|&start| {
                let mut g = zeros();
                let mut f = zeros();
                for i in start..(start + CHUNK).min(n) {
                    let sample = calib.gather(&[i])?;
                    let mut tape = Tape::new();
                    let x = tape.constant(sample.inputs);
                    let mut binder = ParamBinder::default();
                    let out = model.forward(&mut tape, x, &mut binder)?;
                    let loss = tape.cross_entropy(out.logits, &sample.labels)?;
                    let grads = tape.backward(loss)?;
                    for (li, &(wv, bv)) in binder.vars.iter().enumerate() {
                        for (slot, var) in [(0, wv), (1, bv)] {
                            let src = grads.get(var).expect("parameter gradient");
                            let (gs, fs) = if slot == 0 { (&mut g[li].0, &mut f[li].0) } else { (&mut g[li].1, &mut f[li].1) };
                            for ((gk, fk), &s) in gs.iter_mut().zip(fs.iter_mut()).zip(src) {
                                let s = f64::from(s);
                                *gk += s;
                                *fk += s * s;
                            }
                        }
                    }
                }
                Ok((g, f))
            })
            .collect();
        let mut grad = zeros();
        let mut fisher = zeros();
        for p in partial {
            let (g, f) = p?;
            for li in 0..shapes.len() {
                add_into(&mut grad[li].0, &g[li].0);
                add_into(&mut grad[li].1, &g[li].1);
                add_into(&mut fisher[li].0, &f[li].0);
                add_into(&mut fisher[li].1, &f[li].1);
            }
        }
        let inv = 1.0 / n as f64;
        for (a, b) in grad.iter_mut().chain(fisher.iter_mut()) {
            a.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= inv);
        }
        Ok(GradientStats { grad, fisher, samples: n })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `|g·w|` (first order) or `|g·w − ½·w²·h|` (second order) for one parameter.
pub fn parameter_score(order: Order, g: f64, w: f64, h: f64) -> f64 {
    match order {
        Order::First => (g * w).abs(),
        Order::Second => (g * w - 0.5 * w * w * h).abs(),
    }
}

/// `|gᵀw − ½·wᵀHw|` with a dense Hessian block (`h` row-major, `n×n`).
pub fn taylor_importance(grad: &[f64], weights: &[f64], h: &[f64]) -> f64 {
    let n = weights.len();
    let lin: f64 = grad.iter().zip(weights).map(|(g, w)| g * w).sum();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += weights[i] * h[i * n + j] * weights[j];
        }
    }
    (lin - 0.5 * quad).abs()
}

pub fn aggregate(agg: Aggregation, scores: &[f64]) -> f64 {
    match agg {
        Aggregation::Sum => scores.iter().sum(),
        Aggregation::Product => scores.iter().product(),
        Aggregation::Max => scores.iter().cloned().fold(0.0, f64::max),
        Aggregation::Last => scores.last().copied().unwrap_or(0.0),
    }
}

/// Summed parameter scores of each member structure of `group`.
pub fn structure_scores(group: &CoupledGroup, model: &ToyModel, stats: &GradientStats, order: Order) -> Vec<f64> {
    let linears = model.linears();
    group
        .members
        .iter()
        .map(|m| {
            let l = linears[m.layer];
            let (gw, gb) = &stats.grad[m.layer];
            let (hw, hb) = &stats.fisher[m.layer];
            let (cols, rows) = (l.in_dim(), l.out_dim());
            let w = l.weight.data();
            match m.side {
                Side::Out => {
                    let r = m.channel;
                    let row: f64 = (r * cols..(r + 1) * cols)
                        .map(|k| parameter_score(order, gw[k], f64::from(w[k]), hw[k]))
                        .sum();
                    row + parameter_score(order, gb[r], f64::from(l.bias.data()[r]), hb[r])
                }
                Side::In => (0..rows)
                    .map(|r| r * cols + m.channel)
                    .map(|k| parameter_score(order, gw[k], f64::from(w[k]), hw[k]))
                    .sum(),
            }
        })
        .collect()
}

pub fn score_group(group: &CoupledGroup, model: &ToyModel, stats: &GradientStats, cfg: &ImportanceConfig) -> f64 {
    aggregate(cfg.aggregation, &structure_scores(group, model, stats, cfg.order))
}

/// Importance of a single group using the first `cfg.calib_size` samples of
/// `calib`.
pub fn group_importance(group: &CoupledGroup, model: &ToyModel, calib: &SplitData, cfg: &ImportanceConfig) -> Result<f64> {
    if cfg.calib_size == 0 {
        return Err(Error::input("calibration batch size must be positive"));
    }
    let stats = GradientStats::compute(model, &calib.head(cfg.calib_size)?)?;
    Ok(score_group(group, model, &stats, cfg))
}

/// Scores every group from one shared set of gradient statistics.
pub fn score_groups(groups: &[CoupledGroup], model: &ToyModel, calib: &SplitData, cfg: &ImportanceConfig) -> Result<Vec<f64>> {
    if cfg.calib_size == 0 {
        return Err(Error::input("calibration batch size must be positive"));
    }
    let stats = GradientStats::compute(model, &calib.head(cfg.calib_size)?)?;
    Ok(groups.par_iter().map(|g| score_group(g, model, &stats, cfg)).collect())
}
