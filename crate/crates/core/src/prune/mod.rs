//! Structured channel pruning.
//!
//! Channels that share an index across producers and consumers form a
//! [`CoupledGroup`]; the group is scored by a Taylor estimate of the loss
//! change on removal, and the cheapest groups are cut out of the weights.

mod graph;
mod groups;
mod importance;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Linear, SplitData, ToyModel};
use crate::tensor::Tensor;

pub use graph::{build_dependency_graph, model_spaces, ChannelNode, DependencyGraph, FeatureSpace, Side};
pub use groups::{form_groups, CoupledGroup};
pub use importance::{
    aggregate, group_importance, parameter_score, score_group, score_groups, structure_scores, taylor_importance,
    Aggregation, GradientStats, ImportanceConfig, Order,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub target_rate: f64,
    pub realized_rate: f64,
    /// In removal order.
    pub removed_group_ids: Vec<usize>,
    /// Indexed by group id.
    pub per_group_scores: Vec<f64>,
}

/// Removed rows and columns per linear.
#[derive(Debug, Clone, Default)]
struct Cuts {
    rows: Vec<BTreeSet<usize>>,
    cols: Vec<BTreeSet<usize>>,
}

impl Cuts {
    fn new(layers: usize) -> Self {
        Cuts { rows: vec![BTreeSet::new(); layers], cols: vec![BTreeSet::new(); layers] }
    }

    fn add(&mut self, group: &CoupledGroup) {
        for m in &group.members {
            match m.side {
                Side::Out => self.rows[m.layer].insert(m.channel),
                Side::In => self.cols[m.layer].insert(m.channel),
            };
        }
    }

    fn removed_params(&self, model: &ToyModel) -> usize {
        model
            .linears()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (r, c) = (self.rows[i].len(), self.cols[i].len());
                r * (l.in_dim() + 1) + c * l.out_dim() - r * c
            })
            .sum()
    }

    fn emptied_layer<'a>(&self, model: &'a ToyModel) -> Option<&'a str> {
        model.linears().into_iter().enumerate().find_map(|(i, l)| {
            (self.rows[i].len() >= l.out_dim() || self.cols[i].len() >= l.in_dim()).then_some(l.id.as_str())
        })
    }
}

/// Parameters that removing every group would delete.
pub fn prunable_params(model: &ToyModel, groups: &[CoupledGroup]) -> usize {
    let mut cuts = Cuts::new(model.linears().len());
    groups.iter().for_each(|g| cuts.add(g));
    cuts.removed_params(model)
}

fn keep(n: usize, drop: &BTreeSet<usize>) -> Vec<usize> {
    (0..n).filter(|i| !drop.contains(i)).collect()
}

fn shrink(linear: &Linear, drop_rows: &BTreeSet<usize>, drop_cols: &BTreeSet<usize>) -> Result<Linear> {
    let rows = keep(linear.out_dim(), drop_rows);
    let cols = keep(linear.in_dim(), drop_cols);
    let mut w = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        let src = linear.weight.row(r);
        w.extend(cols.iter().map(|&c| src[c]));
    }
    let b = rows.iter().map(|&r| linear.bias.data()[r]).collect();
    Linear::new(linear.id.clone(), Tensor::matrix(rows.len(), cols.len(), w)?, Tensor::vector(b)?)
}

/// Removes the lowest-scoring groups (ties by ascending id) until the
/// removed share of prunable parameters reaches `rate`.
pub fn prune(model: &ToyModel, groups: &[CoupledGroup], scores: &[f64], rate: f64) -> Result<(ToyModel, PruneReport)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("pruning rate must lie in [0, 1), got {rate}")));
    }
    if scores.len() != groups.len() {
        return Err(Error::input(format!("{} scores for {} groups", scores.len(), groups.len())));
    }
    let total = prunable_params(model, groups);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(groups[a].id.cmp(&groups[b].id)));

    let mut cuts = Cuts::new(model.linears().len());
    let mut removed_ids = Vec::new();
    let mut removed = 0usize;
    for &g in &order {
        if total == 0 || removed as f64 / total as f64 >= rate {
            break;
        }
        cuts.add(&groups[g]);
        if let Some(layer) = cuts.emptied_layer(model) {
            return Err(Error::Pruning { layer: layer.to_string() });
        }
        removed = cuts.removed_params(model);
        removed_ids.push(groups[g].id);
    }

    let mut pruned = model.clone();
    for (i, linear) in pruned.linears_mut().into_iter().enumerate() {
        if !cuts.rows[i].is_empty() || !cuts.cols[i].is_empty() {
            *linear = shrink(linear, &cuts.rows[i], &cuts.cols[i])?;
        }
    }
    pruned.validate()?;
    let realized = if total == 0 { 0.0 } else { removed as f64 / total as f64 };
    let mut per_group_scores = vec![0.0; groups.len()];
    for (g, &s) in groups.iter().zip(scores) {
        if let Some(slot) = per_group_scores.get_mut(g.id) {
            *slot = s;
        }
    }
    let report = PruneReport { target_rate: rate, realized_rate: realized, removed_group_ids: removed_ids, per_group_scores };
    Ok((pruned, report))
}

/// Copy of `model` with every member row, bias entry and column of the
/// given groups set to zero.
pub fn zero_groups(model: &ToyModel, groups: &[&CoupledGroup]) -> ToyModel {
    let mut out = model.clone();
    let mut linears = out.linears_mut();
    for g in groups {
        for m in &g.members {
            let l = &mut linears[m.layer];
            let cols = l.in_dim();
            match m.side {
                Side::Out => {
                    l.weight.data_mut()[m.channel * cols..(m.channel + 1) * cols].fill(0.0);
                    l.bias.data_mut()[m.channel] = 0.0;
                }
                Side::In => {
                    let rows = l.out_dim();
                    for r in 0..rows {
                        l.weight.data_mut()[r * cols + m.channel] = 0.0;
                    }
                }
            }
        }
    }
    out
}

/// Graph, groups, scores and removal in one call.
pub fn prune_model(model: &ToyModel, calib: &SplitData, cfg: &ImportanceConfig, rate: f64) -> Result<(ToyModel, PruneReport)> {
    let graph = build_dependency_graph(model)?;
    let mut groups = form_groups(&graph);
    let scores = score_groups(&groups, model, calib, cfg)?;
    for (g, &s) in groups.iter_mut().zip(&scores) {
        g.importance = s;
    }
    prune(model, &groups, &scores, rate)
}
