//! Desk-scale networks and the synthetic task they are trained on.
//!
//! A [`ToyModel`] is an ordered list of [`Layer`]s. Every weight matrix sits
//! in a [`Linear`] with a stable id; the model-order list of linears is the
//! unit of quantization, pruning and adapter attachment.

mod data;
pub(crate) mod train;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use data::{generate_dataset, generate_dataset_with, DatasetParams, Split, SplitData, SyntheticDataset};
pub use train::{accuracy, argmax_rows, train, Adam, TrainConfig, TrainReport};

/// Rows per chunk when running inference over a whole split.
const PREDICT_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "mlp-s")]
    MlpS,
    #[serde(rename = "mlp-m")]
    MlpM,
    #[serde(rename = "tiny-transformer")]
    TinyTransformer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::MlpS => "mlp-s",
            Arch::MlpM => "mlp-m",
            Arch::TinyTransformer => "tiny-transformer",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-s" => Ok(Arch::MlpS),
            "mlp-m" => Ok(Arch::MlpM),
            "tiny-transformer" => Ok(Arch::TinyTransformer),
            other => Err(Error::config(format!("unknown model spec `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_dim: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch) -> Self {
        ModelSpec { arch, input_dim: 32, classes: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// `y = x·Wᵀ + b` with `W: [out, in]`. Rows of `W` are output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub id: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(id: impl Into<String>, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.numel() != out || bias.rank() != 1 {
            return Err(Error::shape(format!("bias {:?} for weight {:?}", bias.shape(), weight.shape())));
        }
        Ok(Linear { id: id.into(), weight, bias })
    }

    fn init(id: &str, in_dim: usize, out_dim: usize, rng: &mut rng::Rng) -> Self {
        let scale = 1.0 / (in_dim as f32).sqrt();
        let weight = Tensor::from_fn(&[out_dim, in_dim], |_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        });
        Linear { id: id.to_string(), weight, bias: Tensor::zeros(&[out_dim]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
    pub out_act: Activation,
}

/// Pre-norm single-head attention plus feed-forward, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub seq_len: usize,
    /// Fixed at construction from the original head width so that removing
    /// head channels does not rescale the remaining attention scores.
    pub score_scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `[batch, seq·d] → [batch·seq, d]`.
    Tokenize { seq_len: usize },
    Linear { linear: Linear, act: Activation },
    Mlp(MlpBlock),
    Transformer(TransformerBlock),
    /// `[batch·seq, d] → [batch, d]`, mean over tokens.
    MeanPool { seq_len: usize },
}

/// Supplies the weights of each linear layer to a forward pass.
///
/// `index` is the layer's position in [`ToyModel::linears`].
pub trait LinearBinder {
    fn linear(&mut self, tape: &mut Tape, index: usize, layer: &Linear, x: Var) -> Result<Var>;
}

/// `x·Wᵀ + b` with the given weight and bias nodes.
pub fn affine(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let wt = tape.transpose(weight)?;
    let y = tape.matmul(x, wt)?;
    tape.add(y, bias)
}

/// Binds every weight and bias as a differentiable parameter.
#[derive(Debug, Default)]
pub struct ParamBinder {
    /// `(weight, bias)` per linear, in model order.
    pub vars: Vec<(Var, Var)>,
}

impl LinearBinder for ParamBinder {
    fn linear(&mut self, tape: &mut Tape, index: usize, layer: &Linear, x: Var) -> Result<Var> {
        let w = tape.param(layer.weight.clone());
        let b = tape.param(layer.bias.clone());
        debug_assert_eq!(index, self.vars.len());
        self.vars.push((w, b));
        affine(tape, x, w, b)
    }
}

/// Binds every weight as a constant; used for inference.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenBinder;

impl LinearBinder for FrozenBinder {
    fn linear(&mut self, tape: &mut Tape, _index: usize, layer: &Linear, x: Var) -> Result<Var> {
        let w = tape.constant(layer.weight.clone());
        let b = tape.constant(layer.bias.clone());
        affine(tape, x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardPass {
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

pub fn build_model(spec: ModelSpec, seed: u64) -> Result<ToyModel> {
    if spec.input_dim == 0 || spec.classes < 2 {
        return Err(Error::config("model needs input_dim > 0 and at least 2 classes"));
    }
    let mut rng = rng::rng(seed);
    let d = spec.input_dim;
    let c = spec.classes;
    let layers = match spec.arch {
        Arch::MlpS => vec![
            Layer::Linear { linear: Linear::init("fc0", d, 64, &mut rng), act: Activation::Relu },
            Layer::Linear { linear: Linear::init("head", 64, c, &mut rng), act: Activation::Identity },
        ],
        Arch::MlpM => {
            let mut layers =
                vec![Layer::Linear { linear: Linear::init("fc0", d, 64, &mut rng), act: Activation::Relu }];
            for b in 1..=3 {
                layers.push(Layer::Mlp(MlpBlock {
                    fc1: Linear::init(&format!("block{b}.fc1"), 64, 96, &mut rng),
                    fc2: Linear::init(&format!("block{b}.fc2"), 96, 64, &mut rng),
                    act: Activation::Relu,
                    out_act: Activation::Relu,
                }));
            }
            layers.push(Layer::Linear { linear: Linear::init("head", 64, c, &mut rng), act: Activation::Identity });
            layers
        }
        Arch::TinyTransformer => {
            const SEQ: usize = 4;
            const MODEL: usize = 16;
            const HEAD: usize = 16;
            const FF: usize = 32;
            if d % SEQ != 0 {
                return Err(Error::config(format!("tiny-transformer needs input_dim divisible by {SEQ}")));
            }
            let token = d / SEQ;
            vec![
                Layer::Tokenize { seq_len: SEQ },
                Layer::Linear { linear: Linear::init("embed", token, MODEL, &mut rng), act: Activation::Identity },
                Layer::Transformer(TransformerBlock {
                    q: Linear::init("attn.q", MODEL, HEAD, &mut rng),
                    k: Linear::init("attn.k", MODEL, HEAD, &mut rng),
                    v: Linear::init("attn.v", MODEL, HEAD, &mut rng),
                    o: Linear::init("attn.o", HEAD, MODEL, &mut rng),
                    ff1: Linear::init("ffn.fc1", MODEL, FF, &mut rng),
                    ff2: Linear::init("ffn.fc2", FF, MODEL, &mut rng),
                    seq_len: SEQ,
                    score_scale: 1.0 / (HEAD as f32).sqrt(),
                }),
                Layer::MeanPool { seq_len: SEQ },
                Layer::Linear { linear: Linear::init("head", MODEL, c, &mut rng), act: Activation::Identity },
            ]
        }
    };
    let model = ToyModel { spec, layers };
    model.validate()?;
    Ok(model)
}

impl ToyModel {
    /// All linear layers in model order.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear { linear, .. } => out.push(linear),
                Layer::Mlp(b) => out.extend([&b.fc1, &b.fc2]),
                Layer::Transformer(t) => out.extend([&t.q, &t.k, &t.v, &t.o, &t.ff1, &t.ff2]),
                Layer::Tokenize { .. } | Layer::MeanPool { .. } => {}
            }
        }
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { linear, .. } => out.push(linear),
                Layer::Mlp(b) => out.extend([&mut b.fc1, &mut b.fc2]),
                Layer::Transformer(t) => {
                    out.extend([&mut t.q, &mut t.k, &mut t.v, &mut t.o, &mut t.ff1, &mut t.ff2])
                }
                Layer::Tokenize { .. } | Layer::MeanPool { .. } => {}
            }
        }
        out
    }

    pub fn linear_index(&self, id: &str) -> Option<usize> {
        self.linears().iter().position(|l| l.id == id)
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.linears().iter().map(|l| l.id.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.linears().iter().map(|l| l.param_count()).sum()
    }

    /// `(name, tensor)` for every parameter, weights before biases per layer.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.linears()
            .into_iter()
            .flat_map(|l| [(format!("{}.weight", l.id), &l.weight), (format!("{}.bias", l.id), &l.bias)])
            .collect()
    }

    /// Rebuilds a model of `spec` from named parameters (as stored in a
    /// checkpoint). Shapes may differ from the fresh architecture, e.g. after
    /// pruning.
    pub fn from_named_params(spec: ModelSpec, params: Vec<(String, Tensor)>) -> Result<ToyModel> {
        let mut model = build_model(spec, 0)?;
        let mut lookup: std::collections::HashMap<String, Tensor> = params.into_iter().collect();
        for linear in model.linears_mut() {
            let w = lookup
                .remove(&format!("{}.weight", linear.id))
                .ok_or_else(|| Error::Format(format!("missing parameter {}.weight", linear.id)))?;
            let b = lookup
                .remove(&format!("{}.bias", linear.id))
                .ok_or_else(|| Error::Format(format!("missing parameter {}.bias", linear.id)))?;
            *linear = Linear::new(linear.id.clone(), w, b)?;
        }
        if let Some(extra) = lookup.keys().next() {
            return Err(Error::Format(format!("unexpected parameter {extra}")));
        }
        model.validate()?;
        Ok(model)
    }

    /// Checks that adjacent layer dimensions agree.
    pub fn validate(&self) -> Result<()> {
        let mismatch = |what: &str, a: usize, b: usize| {
            Err(Error::shape(format!("{what}: {a} vs {b}")))
        };
        let mut width = self.spec.input_dim;
        for layer in &self.layers {
            match layer {
                Layer::Tokenize { seq_len } => {
                    if width % seq_len != 0 {
                        return mismatch("tokenize", width, *seq_len);
                    }
                    width /= seq_len;
                }
                Layer::MeanPool { .. } => {}
                Layer::Linear { linear, .. } => {
                    if linear.in_dim() != width {
                        return mismatch(&linear.id, linear.in_dim(), width);
                    }
                    width = linear.out_dim();
                }
                Layer::Mlp(b) => {
                    if b.fc1.in_dim() != width {
                        return mismatch(&b.fc1.id, b.fc1.in_dim(), width);
                    }
                    if b.fc2.in_dim() != b.fc1.out_dim() {
                        return mismatch(&b.fc2.id, b.fc2.in_dim(), b.fc1.out_dim());
                    }
                    width = b.fc2.out_dim();
                }
                Layer::Transformer(t) => {
                    for l in [&t.q, &t.k, &t.v, &t.ff1] {
                        if l.in_dim() != width {
                            return mismatch(&l.id, l.in_dim(), width);
                        }
                    }
                    if t.q.out_dim() != t.k.out_dim() || t.v.out_dim() != t.o.in_dim() {
                        return mismatch("attention head", t.q.out_dim(), t.k.out_dim());
                    }
                    if t.o.out_dim() != width || t.ff2.out_dim() != width {
                        return mismatch("residual stream", t.o.out_dim(), width);
                    }
                    if t.ff2.in_dim() != t.ff1.out_dim() {
                        return mismatch(&t.ff2.id, t.ff2.in_dim(), t.ff1.out_dim());
                    }
                }
            }
        }
        if width != self.spec.classes {
            return mismatch("logits", width, self.spec.classes);
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `outputs`, when given, receives the
    /// output node of every linear layer in model order.
    pub fn forward_traced<B: LinearBinder>(
        &self,
        tape: &mut Tape,
        input: Var,
        binder: &mut B,
        mut outputs: Option<&mut Vec<Var>>,
    ) -> Result<ForwardPass> {
        let mut x = input;
        let mut index = 0usize;
        let mut apply = |tape: &mut Tape, layer: &Linear, x: Var, outputs: &mut Option<&mut Vec<Var>>| {
            let y = binder.linear(tape, index, layer, x)?;
            index += 1;
            if let Some(out) = outputs.as_deref_mut() {
                out.push(y);
            }
            Ok::<Var, Error>(y)
        };
        for layer in &self.layers {
            x = match layer {
                Layer::Tokenize { seq_len } => {
                    let v = tape.value(x);
                    let (rows, cols) = v.dims2()?;
                    tape.reshape(x, vec![rows * seq_len, cols / seq_len])?
                }
                Layer::Linear { linear, act } => {
                    let y = apply(tape, linear, x, &mut outputs)?;
                    act.apply(tape, y)
                }
                Layer::Mlp(b) => {
                    let h = apply(tape, &b.fc1, x, &mut outputs)?;
                    let h = b.act.apply(tape, h);
                    let y = apply(tape, &b.fc2, h, &mut outputs)?;
                    b.out_act.apply(tape, y)
                }
                Layer::Transformer(t) => {
                    let tokens = tape.value(x).rows();
                    let h = tape.layer_norm(x)?;
                    let q = apply(tape, &t.q, h, &mut outputs)?;
                    let k = apply(tape, &t.k, h, &mut outputs)?;
                    let v = apply(tape, &t.v, h, &mut outputs)?;
                    let kt = tape.transpose(k)?;
                    let scores = tape.matmul(q, kt)?;
                    let scores = tape.scale(scores, t.score_scale);
                    let mask = tape.constant(block_mask(tokens, t.seq_len));
                    let scores = tape.add(scores, mask)?;
                    let probs = tape.softmax(scores)?;
                    let mixed = tape.matmul(probs, v)?;
                    let attn = apply(tape, &t.o, mixed, &mut outputs)?;
                    let x1 = tape.add(x, attn)?;
                    let h2 = tape.layer_norm(x1)?;
                    let f = apply(tape, &t.ff1, h2, &mut outputs)?;
                    let f = tape.gelu(f);
                    let f = apply(tape, &t.ff2, f, &mut outputs)?;
                    tape.add(x1, f)?
                }
                Layer::MeanPool { seq_len } => {
                    let tokens = tape.value(x).rows();
                    let pool = tape.constant(pool_matrix(tokens, *seq_len));
                    tape.matmul(pool, x)?
                }
            };
        }
        Ok(ForwardPass { logits: x })
    }

    pub fn forward<B: LinearBinder>(&self, tape: &mut Tape, input: Var, binder: &mut B) -> Result<ForwardPass> {
        self.forward_traced(tape, input, binder, None)
    }

    /// Logits for every row of `inputs`, computed in chunks.
    pub fn predict_with<B: LinearBinder>(&self, inputs: &Tensor, mut make: impl FnMut() -> B) -> Result<Tensor> {
        let (n, d) = inputs.dims2()?;
        let mut logits = Vec::with_capacity(n * self.spec.classes);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = Tensor::matrix(end - start, d, inputs.data()[start * d..end * d].to_vec())?;
            let mut tape = Tape::new();
            let x = tape.constant(chunk);
            let mut binder = make();
            let out = self.forward(&mut tape, x, &mut binder)?;
            logits.extend_from_slice(tape.value(out.logits).data());
        }
        Tensor::matrix(n, self.spec.classes, logits)
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        self.predict_with(inputs, || FrozenBinder)
    }
}

fn block_mask(tokens: usize, seq_len: usize) -> Tensor {
    Tensor::from_fn(&[tokens, tokens], |i| {
        let (r, c) = (i / tokens, i % tokens);
        if r / seq_len == c / seq_len {
            0.0
        } else {
            -1e9
        }
    })
}

fn pool_matrix(tokens: usize, seq_len: usize) -> Tensor {
    let batch = tokens / seq_len;
    let w = 1.0 / seq_len as f32;
    Tensor::from_fn(&[batch, tokens], |i| {
        let (r, c) = (i / tokens, i % tokens);
        if c / seq_len == r {
            w
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(arch: Arch) -> ModelSpec {
        ModelSpec::new(arch)
    }

    #[test]
    fn same_seed_same_params() {
        for arch in [Arch::MlpS, Arch::MlpM, Arch::TinyTransformer] {
            let a = build_model(spec(arch), 11).unwrap();
            let b = build_model(spec(arch), 11).unwrap();
            for ((_, x), (_, y)) in a.named_params().iter().zip(b.named_params().iter()) {
                assert!(x.bit_eq(y));
            }
            let c = build_model(spec(arch), 12).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn mlp_s_param_count() {
        let m = build_model(spec(Arch::MlpS), 0).unwrap();
        assert_eq!(m.param_count(), 32 * 64 + 64 + 64 * 4 + 4);
        assert_eq!(m.linears().len(), 2);
    }

    #[test]
    fn quantizable_layer_counts() {
        assert_eq!(build_model(spec(Arch::MlpM), 0).unwrap().linears().len(), 8);
        assert_eq!(build_model(spec(Arch::TinyTransformer), 0).unwrap().linears().len(), 8);
    }

    #[test]
    fn unknown_spec_is_config_error() {
        assert!(matches!("mlp-xl".parse::<Arch>(), Err(Error::Config(_))));
    }

    #[test]
    fn transformer_zero_input_is_finite() {
        let m = build_model(spec(Arch::TinyTransformer), 3).unwrap();
        let logits = m.predict(&Tensor::zeros(&[5, 32])).unwrap();
        assert_eq!(logits.shape(), &[5, 4]);
        assert!(logits.is_finite());
    }

    #[test]
    fn forward_shapes_for_all_batch_sizes() {
        for arch in [Arch::MlpS, Arch::MlpM, Arch::TinyTransformer] {
            let m = build_model(spec(arch), 5).unwrap();
            for batch in [1, 2, 7, 130] {
                let x = Tensor::from_fn(&[batch, 32], |i| ((i * 37) % 11) as f32 / 11.0 - 0.5);
                let out = m.predict(&x).unwrap();
                assert_eq!(out.shape(), &[batch, 4]);
            }
        }
    }

    #[test]
    fn transformer_samples_do_not_interact() {
        let m = build_model(spec(Arch::TinyTransformer), 9).unwrap();
        let x = Tensor::from_fn(&[3, 32], |i| (i as f32 * 0.37).sin());
        let all = m.predict(&x).unwrap();
        let single = m.predict(&Tensor::matrix(1, 32, x.row(1).to_vec()).unwrap()).unwrap();
        for c in 0..4 {
            assert!((all.at(1, c) - single.at(0, c)).abs() < 1e-5);
        }
    }

    #[test]
    fn named_params_round_trip() {
        let m = build_model(spec(Arch::TinyTransformer), 2).unwrap();
        let params: Vec<(String, Tensor)> =
            m.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = ToyModel::from_named_params(m.spec, params).unwrap();
        assert_eq!(back, m);
    }
}
