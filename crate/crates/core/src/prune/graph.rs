use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Layer, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// A column of the weight (an input feature).
    In,
    /// A row of the weight plus its bias entry (an output channel).
    Out,
}

/// Channel `channel` on one side of linear layer `layer` (model-order index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelNode {
    pub layer: usize,
    pub side: Side,
    pub channel: usize,
}

/// A set of channels that share an index: every producer's output channel
/// `j` feeds every consumer's input channel `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub label: String,
    pub width: usize,
    pub producers: Vec<usize>,
    pub consumers: Vec<usize>,
    /// Model inputs, logits and the residual stream are never pruned.
    pub protected: bool,
}

#[derive(Debug, Clone)]
pub struct DependencyGraph {
    nodes: Vec<ChannelNode>,
    index: HashMap<ChannelNode, usize>,
    node_space: Vec<usize>,
    edges: Vec<(usize, usize)>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    spaces: Vec<FeatureSpace>,
    layer_ids: Vec<String>,
}

impl DependencyGraph {
    /// Builds the graph from explicit feature spaces. `layer_dims[i]` is
    /// `(in, out)` of linear `i`.
    pub fn from_spaces(spaces: Vec<FeatureSpace>, layer_ids: Vec<String>, layer_dims: &[(usize, usize)]) -> Result<Self> {
        let mut g = DependencyGraph {
            nodes: Vec::new(),
            index: HashMap::new(),
            node_space: Vec::new(),
            edges: Vec::new(),
            out_edges: Vec::new(),
            in_edges: Vec::new(),
            spaces: Vec::new(),
            layer_ids,
        };
        for (s, space) in spaces.iter().enumerate() {
            for &p in &space.producers {
                if layer_dims[p].1 != space.width {
                    return Err(Error::shape(format!("{}: producer {} has {} outputs", space.label, p, layer_dims[p].1)));
                }
                for j in 0..space.width {
                    g.add_node(ChannelNode { layer: p, side: Side::Out, channel: j }, s)?;
                }
            }
            for &c in &space.consumers {
                if layer_dims[c].0 != space.width {
                    return Err(Error::shape(format!("{}: consumer {} has {} inputs", space.label, c, layer_dims[c].0)));
                }
                for j in 0..space.width {
                    g.add_node(ChannelNode { layer: c, side: Side::In, channel: j }, s)?;
                }
            }
        }
        for space in &spaces {
            for &p in &space.producers {
                for &c in &space.consumers {
                    for j in 0..space.width {
                        let a = g.index[&ChannelNode { layer: p, side: Side::Out, channel: j }];
                        let b = g.index[&ChannelNode { layer: c, side: Side::In, channel: j }];
                        g.out_edges[a].push(g.edges.len());
                        g.in_edges[b].push(g.edges.len());
                        g.edges.push((a, b));
                    }
                }
            }
        }
        g.spaces = spaces;
        Ok(g)
    }

    fn add_node(&mut self, node: ChannelNode, space: usize) -> Result<()> {
        if self.index.contains_key(&node) {
            return Err(Error::config(format!("channel {node:?} belongs to two feature spaces")));
        }
        self.index.insert(node, self.nodes.len());
        self.nodes.push(node);
        self.node_space.push(space);
        self.out_edges.push(Vec::new());
        self.in_edges.push(Vec::new());
        Ok(())
    }

    pub fn nodes(&self) -> &[ChannelNode] {
        &self.nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (ChannelNode, ChannelNode)> + '_ {
        self.edges.iter().map(|&(a, b)| (self.nodes[a], self.nodes[b]))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn spaces(&self) -> &[FeatureSpace] {
        &self.spaces
    }

    pub fn layer_id(&self, layer: usize) -> &str {
        &self.layer_ids[layer]
    }

    pub fn node_index(&self, node: &ChannelNode) -> Option<usize> {
        self.index.get(node).copied()
    }

    pub fn is_protected(&self, node: usize) -> bool {
        self.spaces[self.node_space[node]].protected
    }

    /// Number of edges leaving `node`.
    pub fn out_degree(&self, node: usize) -> usize {
        self.out_edges[node].len()
    }

    /// Number of edges entering `node`.
    pub fn in_degree(&self, node: usize) -> usize {
        self.in_edges[node].len()
    }

    pub fn successors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.out_edges[node].iter().map(|&e| self.edges[e].1)
    }

    pub fn predecessors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.in_edges[node].iter().map(|&e| self.edges[e].0)
    }

    /// The degree rule: `b` depends on `a` when `b` is fed by `a` alone, or
    /// `a` feeds nothing but `b`.
    pub fn forced_dependency(&self, a: usize, b: usize) -> bool {
        let linked = self.successors(a).any(|s| s == b);
        linked && (self.in_degree(b) == 1 || self.out_degree(a) == 1)
    }
}

/// Feature spaces of a model, walking its layers in order.
pub fn model_spaces(model: &ToyModel) -> Vec<FeatureSpace> {
    let mut spaces = Vec::new();
    let mut current = FeatureSpace {
        label: "input".into(),
        width: model.spec.input_dim,
        producers: vec![],
        consumers: vec![],
        protected: true,
    };
    let linears = model.linears();
    let mut idx = 0usize;
    let fresh = |label: &str, producer: usize, width: usize| FeatureSpace {
        label: label.to_string(),
        width,
        producers: vec![producer],
        consumers: vec![],
        protected: false,
    };
    for layer in &model.layers {
        match layer {
            Layer::Tokenize { seq_len } => current.width /= seq_len,
            Layer::MeanPool { .. } => {}
            Layer::Linear { linear, .. } => {
                current.consumers.push(idx);
                spaces.push(std::mem::replace(&mut current, fresh(&linear.id, idx, linear.out_dim())));
                idx += 1;
            }
            Layer::Mlp(b) => {
                current.consumers.push(idx);
                spaces.push(std::mem::replace(&mut current, fresh(&b.fc1.id, idx, b.fc1.out_dim())));
                current.consumers.push(idx + 1);
                spaces.push(std::mem::replace(&mut current, fresh(&b.fc2.id, idx + 1, b.fc2.out_dim())));
                idx += 2;
            }
            Layer::Transformer(t) => {
                let (q, k, v, o, f1, f2) = (idx, idx + 1, idx + 2, idx + 3, idx + 4, idx + 5);
                current.protected = true;
                current.label = format!("{} residual", current.label);
                current.consumers.extend([q, k, v, f1]);
                current.producers.extend([o, f2]);
                spaces.push(FeatureSpace {
                    label: "attn.head".into(),
                    width: t.q.out_dim(),
                    producers: vec![q, k, v],
                    consumers: vec![o],
                    protected: false,
                });
                spaces.push(FeatureSpace {
                    label: "ffn.hidden".into(),
                    width: t.ff1.out_dim(),
                    producers: vec![f1],
                    consumers: vec![f2],
                    protected: false,
                });
                idx += 6;
            }
        }
    }
    debug_assert_eq!(idx, linears.len());
    current.protected = true;
    current.label = "logits".into();
    spaces.push(current);
    spaces
}

pub fn build_dependency_graph(model: &ToyModel) -> Result<DependencyGraph> {
    let linears = model.linears();
    let dims: Vec<(usize, usize)> = linears.iter().map(|l| (l.in_dim(), l.out_dim())).collect();
    let ids = linears.iter().map(|l| l.id.clone()).collect();
    DependencyGraph::from_spaces(model_spaces(model), ids, &dims)
}
