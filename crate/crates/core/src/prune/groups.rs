use serde::{Deserialize, Serialize};

use super::graph::{ChannelNode, DependencyGraph, Side};
use crate::models::ToyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledGroup {
    pub id: usize,
    /// Sorted by `(layer, side, channel)`.
    pub members: Vec<ChannelNode>,
    pub importance: f64,
}

impl CoupledGroup {
    /// Parameters owned by each member: a row plus bias, or a column.
    /// Entries shared between a row member and a column member of the same
    /// group are counted once.
    pub fn param_mass(&self, model: &ToyModel) -> usize {
        let linears = model.linears();
        let mut total = 0;
        for m in &self.members {
            let l = linears[m.layer];
            total += match m.side {
                Side::Out => l.in_dim() + 1,
                Side::In => l.out_dim(),
            };
        }
        for a in &self.members {
            for b in &self.members {
                if a.layer == b.layer && a.side == Side::Out && b.side == Side::In {
                    total -= 1;
                }
            }
        }
        total
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the unprotected part of `g`, ordered by their
/// smallest member.
pub fn form_groups(g: &DependencyGraph) -> Vec<CoupledGroup> {
    let n = g.nodes().len();
    let mut parent: Vec<usize> = (0..n).collect();
    for node in 0..n {
        if g.is_protected(node) {
            continue;
        }
        for succ in g.successors(node).collect::<Vec<_>>() {
            let (a, b) = (find(&mut parent, node), find(&mut parent, succ));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut buckets: std::collections::BTreeMap<usize, Vec<ChannelNode>> = Default::default();
    for node in 0..n {
        if !g.is_protected(node) {
            let root = find(&mut parent, node);
            buckets.entry(root).or_default().push(g.nodes()[node]);
        }
    }
    let mut groups: Vec<Vec<ChannelNode>> = buckets
        .into_values()
        .map(|mut m| {
            m.sort();
            m
        })
        .collect();
    groups.sort_by_key(|m| m[0]);
    groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| CoupledGroup { id, members, importance: 0.0 })
        .collect()
}
