//! Low-rank adapters over frozen (optionally quantized) weights.
//!
//! Each linear's weight becomes `base + A·B` with `A: [out, r]` and
//! `B: [r, in]`. Only `A` and `B` are trained; the base and bias stay fixed.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{AdapterEntry, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::{from_dmatrix, split_factors, to_dmatrix};
use crate::mi::BitConfig;
use crate::models::{accuracy, affine, train, Adam, Linear, LinearBinder, SplitData, SyntheticDataset, ToyModel, TrainConfig, TrainReport};
use crate::quant::{dequantize, fit_scheme_with, memory_bytes, project_nearest, quantize_with, QuantFormat, QuantScheme, QuantizedMatrix};
use crate::rng;
use crate::tensor::{self, Tensor};

pub const DEFAULT_RANK: usize = 8;
pub const GAUSSIAN_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Gaussian,
    Pissa,
    LoftQ { iters: usize },
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitMethod::Gaussian => f.write_str("gaussian"),
            InitMethod::Pissa => f.write_str("pissa"),
            InitMethod::LoftQ { iters } => write!(f, "loftq({iters})"),
        }
    }
}

impl FromStr for InitMethod {
    type Err = Error;

    /// `gaussian`, `pissa`, `loftq` (one iteration) or `loftq:<iters>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(InitMethod::Gaussian),
            "pissa" => Ok(InitMethod::Pissa),
            "loftq" => Ok(InitMethod::LoftQ { iters: 1 }),
            other => match other.strip_prefix("loftq:").map(str::parse::<usize>) {
                Some(Ok(iters)) if iters > 0 => Ok(InitMethod::LoftQ { iters }),
                _ => Err(Error::config(format!("unknown adapter init `{other}`"))),
            },
        }
    }
}

/// How a base weight is stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Precision {
    Full,
    /// `delta` overrides the NormalFloat endpoint offset.
    Quant { format: QuantFormat, bits: u8, delta: Option<f32> },
}

impl Precision {
    pub fn quant(format: QuantFormat, bits: u8) -> Self {
        Precision::Quant { format, bits, delta: None }
    }

    fn scheme_for(self, w: &Tensor) -> Result<Option<QuantScheme>> {
        match self {
            Precision::Full => Ok(None),
            Precision::Quant { format, bits, delta } => Ok(Some(fit_scheme_with(w, format, bits, delta)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Base {
    Full(Tensor),
    Quantized(QuantizedMatrix),
}

impl Base {
    pub fn project(w: &Tensor, precision: Precision) -> Result<Base> {
        match precision {
            Precision::Full => Ok(Base::Full(w.clone())),
            Precision::Quant { .. } => {
                let scheme = precision.scheme_for(w)?.expect("quantized precision");
                Ok(Base::Quantized(quantize_with(w, &scheme)?))
            }
        }
    }

    pub fn dense(&self) -> Tensor {
        match self {
            Base::Full(t) => t.clone(),
            Base::Quantized(q) => dequantize(q),
        }
    }

    pub fn memory_bytes(&self) -> u64 {
        match self {
            Base::Full(t) => (t.numel() * 4) as u64,
            Base::Quantized(q) => memory_bytes(q),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub method: InitMethod,
}

impl LowRankAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> Tensor {
        self.a.matmul(&self.b).expect("adapter factors agree")
    }

    pub fn memory_bytes(&self) -> u64 {
        ((self.a.numel() + self.b.numel()) * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    pub id: String,
    pub base: Base,
    pub precision: Precision,
    pub bias: Tensor,
    pub adapter: Option<LowRankAdapter>,
    dense: Tensor,
}

impl AdaptedLayer {
    pub fn new(id: impl Into<String>, base: Base, precision: Precision, bias: Tensor, adapter: Option<LowRankAdapter>) -> Result<Self> {
        let dense = base.dense();
        let (out, inp) = dense.dims2()?;
        if bias.numel() != out {
            return Err(Error::shape(format!("bias of {} for {out} outputs", bias.numel())));
        }
        if let Some(ad) = &adapter {
            let (ar, r) = ad.a.dims2()?;
            let (r2, bc) = ad.b.dims2()?;
            if ar != out || bc != inp || r != r2 || r == 0 {
                return Err(Error::shape(format!(
                    "adapter {ar}x{r} · {r2}x{bc} for weight {out}x{inp}"
                )));
            }
        }
        Ok(AdaptedLayer { id: id.into(), base, precision, bias, adapter, dense })
    }

    /// Dequantized (or full-precision) base weight.
    pub fn base_dense(&self) -> &Tensor {
        &self.dense
    }

    /// `base + A·B`.
    pub fn effective_weight(&self) -> Tensor {
        match &self.adapter {
            Some(ad) => self.dense.add(&ad.delta()).expect("same shape"),
            None => self.dense.clone(),
        }
    }

    pub fn memory_bytes(&self) -> u64 {
        self.base.memory_bytes() + self.adapter.as_ref().map_or(0, |a| a.memory_bytes())
    }
}

/// `x·(base + A·B)ᵀ + bias` evaluated directly.
pub fn adapted_forward(layer: &AdaptedLayer, x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let (out, inp) = layer.dense.dims2()?;
    if d != inp {
        return Err(Error::shape(format!("input width {d} for layer expecting {inp}")));
    }
    let mut y = tensor::matmul_nt(x.data(), layer.dense.data(), n, d, out);
    if let Some(ad) = &layer.adapter {
        let r = ad.rank();
        let xb = tensor::matmul_nt(x.data(), ad.b.data(), n, d, r);
        let low = tensor::matmul_nt(&xb, ad.a.data(), n, r, out);
        y.iter_mut().zip(low).for_each(|(a, b)| *a += b);
    }
    for row in y.chunks_mut(out) {
        row.iter_mut().zip(layer.bias.data()).for_each(|(a, &b)| *a += b);
    }
    Tensor::matrix(n, out, y)
}

/// `‖W − (Q + A·B)‖_F²` in f64.
pub fn loftq_objective(w: &Tensor, q: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (m, n) = w.dims2()?;
    if q.shape() != w.shape() || a.rows() != m || b.cols() != n || a.cols() != b.rows() {
        return Err(Error::shape("loftq objective operands disagree"));
    }
    let r = a.cols();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let ab: f64 = (0..r).map(|k| f64::from(a.at(i, k)) * f64::from(b.at(k, j))).sum();
            let e = f64::from(w.at(i, j)) - f64::from(q.at(i, j)) - ab;
            total += e * e;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct AdapterInit {
    pub adapter: LowRankAdapter,
    pub base: Base,
    /// `‖W − (Q_t + A_t·B_t)‖²` after each LoftQ iteration; empty otherwise.
    pub objective_trace: Vec<f64>,
}

/// Builds the adapter and its frozen base for weight `w`. `r` is clamped to
/// `min(rows, cols)`.
pub fn init_adapter(w: &Tensor, precision: Precision, method: InitMethod, r: usize, seed: u64) -> Result<AdapterInit> {
    let (m, n) = w.dims2()?;
    if r == 0 {
        return Err(Error::input("adapter rank must be positive"));
    }
    let r = r.min(m.min(n));
    match method {
        InitMethod::Gaussian => {
            let mut g = rng::rng(seed);
            let normal = Normal::new(0.0, GAUSSIAN_STD).expect("valid std");
            let a = Tensor::from_fn(&[m, r], |_| normal.sample(&mut g) as f32);
            let adapter = LowRankAdapter { a, b: Tensor::zeros(&[r, n]), method };
            Ok(AdapterInit { adapter, base: Base::project(w, precision)?, objective_trace: vec![] })
        }
        InitMethod::Pissa => {
            let (a, b) = split_factors(&to_dmatrix(w)?, r)?;
            let (a, b) = (from_dmatrix(&a), from_dmatrix(&b));
            let base = Base::project(&w.sub(&a.matmul(&b)?)?, precision)?;
            Ok(AdapterInit { adapter: LowRankAdapter { a, b, method }, base, objective_trace: vec![] })
        }
        InitMethod::LoftQ { iters } => {
            if iters == 0 {
                return Err(Error::input("LoftQ needs at least one iteration"));
            }
            // The Q-step is an exact projection onto one grid fitted to W, so
            // every half-step can only lower the objective.
            let scheme = precision.scheme_for(w)?;
            let wd = to_dmatrix(w)?;
            let mut ab = DMatrix::<f64>::zeros(m, n);
            let mut trace = Vec::with_capacity(iters);
            let mut result = None;
            for _ in 0..iters {
                let target = &wd - &ab;
                let base = match &scheme {
                    None => Base::Full(from_dmatrix(&target)),
                    Some(s) => {
                        let rows: Vec<f64> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| target[(i, j)]).collect();
                        Base::Quantized(project_nearest(&rows, m, n, s)?)
                    }
                };
                let q = base.dense();
                let residual = &wd - to_dmatrix(&q)?;
                let (a, b) = split_factors(&residual, r)?;
                let (a, b) = (from_dmatrix(&a), from_dmatrix(&b));
                ab = to_dmatrix(&a)? * to_dmatrix(&b)?;
                trace.push(loftq_objective(w, &q, &a, &b)?);
                result = Some((a, b, base));
            }
            let (a, b, base) = result.expect("iters > 0");
            Ok(AdapterInit { adapter: LowRankAdapter { a, b, method }, base, objective_trace: trace })
        }
    }
}

/// Recovery settings for turning a model into an [`AdaptedModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// `None` keeps bases frozen without adapters.
    pub method: Option<InitMethod>,
    pub rank: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { method: Some(InitMethod::LoftQ { iters: 1 }), rank: DEFAULT_RANK }
    }
}

/// A model whose linears are frozen bases plus optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    /// Layer structure; linear weights hold the dense bases.
    pub model: ToyModel,
    pub layers: Vec<AdaptedLayer>,
}

/// Precision of each layer for a bit config; `format = None` keeps fp32.
pub fn precisions(bits: &BitConfig, format: Option<QuantFormat>) -> Vec<Precision> {
    bits.bits()
        .iter()
        .map(|&b| match format {
            None => Precision::Full,
            Some(f) => Precision::quant(f, b),
        })
        .collect()
}

impl AdaptedModel {
    pub fn build(model: &ToyModel, precision: &[Precision], cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        let linears = model.linears();
        if precision.len() != linears.len() {
            return Err(Error::config(format!("{} precisions for {} layers", precision.len(), linears.len())));
        }
        let mut layers = Vec::with_capacity(linears.len());
        for (i, (l, &p)) in linears.iter().zip(precision).enumerate() {
            let layer = match cfg.method {
                None => AdaptedLayer::new(l.id.clone(), Base::project(&l.weight, p)?, p, l.bias.clone(), None)?,
                Some(method) => {
                    let init = init_adapter(&l.weight, p, method, cfg.rank, rng::substream(seed, &format!("adapter/{i}")))?;
                    AdaptedLayer::new(l.id.clone(), init.base, p, l.bias.clone(), Some(init.adapter))?
                }
            };
            layers.push(layer);
        }
        Self::from_layers(model, layers)
    }

    fn from_layers(model: &ToyModel, layers: Vec<AdaptedLayer>) -> Result<Self> {
        let mut structure = model.clone();
        for (lin, layer) in structure.linears_mut().into_iter().zip(&layers) {
            *lin = Linear::new(layer.id.clone(), layer.dense.clone(), layer.bias.clone())?;
        }
        structure.validate()?;
        Ok(AdaptedModel { model: structure, layers })
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        self.model.predict_with(inputs, || AdaptedBinder::frozen(&self.layers))
    }

    pub fn accuracy(&self, split: &SplitData) -> Result<f64> {
        Ok(accuracy(&self.predict(&split.inputs)?, &split.labels))
    }

    /// Stored bytes: quantized bases (or fp32), plus fp32 adapters.
    pub fn memory_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.memory_bytes()).sum()
    }

    /// Plain model with `base + A·B` folded into each weight.
    pub fn merged(&self) -> Result<ToyModel> {
        let mut out = self.model.clone();
        for (lin, layer) in out.linears_mut().into_iter().zip(&self.layers) {
            lin.weight = layer.effective_weight();
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.params.clear();
        for layer in &self.layers {
            match &layer.base {
                Base::Full(w) => ck.params.push((format!("{}.weight", layer.id), w.clone())),
                Base::Quantized(q) => {
                    ck.quantized.push((format!("{}.weight", layer.id), q.clone()));
                    if let Precision::Quant { format, .. } = layer.precision {
                        ck.meta.insert(format!("quant.{}", layer.id), format.to_string());
                    }
                }
            }
            ck.params.push((format!("{}.bias", layer.id), layer.bias.clone()));
            if let Some(ad) = &layer.adapter {
                ck.adapters.push(AdapterEntry { name: layer.id.clone(), a: ad.a.clone(), b: ad.b.clone() });
                ck.meta.insert(format!("adapter.{}", layer.id), ad.method.to_string());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec = ck.spec()?;
        let mut named: Vec<(String, Tensor)> = ck.params.clone();
        for (name, q) in &ck.quantized {
            named.push((name.clone(), dequantize(q)));
        }
        let model = ToyModel::from_named_params(spec, named)?;
        let mut layers = Vec::new();
        for lin in model.linears() {
            let wname = format!("{}.weight", lin.id);
            let (base, precision) = match ck.quantized.iter().find(|(n, _)| *n == wname) {
                Some((_, q)) => {
                    let format = match ck.meta.get(&format!("quant.{}", lin.id)) {
                        Some(f) => f.parse()?,
                        None => format_of(q),
                    };
                    let delta = match (format, q.scheme()) {
                        (QuantFormat::Nf, QuantScheme::NormalFloat { delta, .. })
                            if *delta != crate::quant::default_delta(q.bits()) =>
                        {
                            Some(*delta)
                        }
                        _ => None,
                    };
                    (Base::Quantized(q.clone()), Precision::Quant { format, bits: q.bits(), delta })
                }
                None => (Base::Full(lin.weight.clone()), Precision::Full),
            };
            let adapter = match ck.adapters.iter().find(|a| a.name == lin.id) {
                Some(a) => {
                    let method = ck
                        .meta
                        .get(&format!("adapter.{}", lin.id))
                        .map(|m| parse_method_label(m))
                        .transpose()?
                        .unwrap_or(InitMethod::Gaussian);
                    Some(LowRankAdapter { a: a.a.clone(), b: a.b.clone(), method })
                }
                None => None,
            };
            layers.push(AdaptedLayer::new(lin.id.clone(), base, precision, lin.bias.clone(), adapter)?);
        }
        Self::from_layers(&model, layers)
    }
}

fn format_of(q: &QuantizedMatrix) -> QuantFormat {
    match q.scheme() {
        QuantScheme::NormalFloat { .. } => QuantFormat::Nf,
        QuantScheme::UniformInt { .. } => QuantFormat::Int,
    }
}

fn parse_method_label(s: &str) -> Result<InitMethod> {
    if let Some(n) = s.strip_prefix("loftq(").and_then(|r| r.strip_suffix(')')) {
        return format!("loftq:{n}").parse();
    }
    s.parse()
}

/// Feeds adapted layers to a forward pass. Adapter factors are parameters
/// when `trainable`; everything else is constant.
#[derive(Debug)]
pub struct AdaptedBinder<'a> {
    layers: &'a [AdaptedLayer],
    trainable: bool,
    /// `(A, B)` nodes per layer, for layers with adapters.
    pub vars: Vec<Option<(Var, Var)>>,
}

impl<'a> AdaptedBinder<'a> {
    pub fn frozen(layers: &'a [AdaptedLayer]) -> Self {
        AdaptedBinder { layers, trainable: false, vars: Vec::new() }
    }

    pub fn trainable(layers: &'a [AdaptedLayer]) -> Self {
        AdaptedBinder { layers, trainable: true, vars: Vec::new() }
    }
}

impl LinearBinder for AdaptedBinder<'_> {
    fn linear(&mut self, tape: &mut Tape, index: usize, _layer: &Linear, x: Var) -> Result<Var> {
        let layer = &self.layers[index];
        let w = tape.constant(layer.dense.clone());
        let bias = tape.constant(layer.bias.clone());
        let base = affine(tape, x, w, bias)?;
        let Some(ad) = &layer.adapter else {
            self.vars.push(None);
            return Ok(base);
        };
        let (a, b) = if self.trainable {
            (tape.param(ad.a.clone()), tape.param(ad.b.clone()))
        } else {
            (tape.constant(ad.a.clone()), tape.constant(ad.b.clone()))
        };
        self.vars.push(Some((a, b)));
        let bt = tape.transpose(b)?;
        let xb = tape.matmul(x, bt)?;
        let at = tape.transpose(a)?;
        let low = tape.matmul(xb, at)?;
        tape.add(base, low)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { steps: 200, lr: 2e-3, batch_size: 64 }
    }
}

/// Trains adapter factors only. Returns validation accuracy.
pub fn finetune(m: &mut AdaptedModel, data: &SyntheticDataset, cfg: &FinetuneConfig, seed: u64) -> Result<TrainReport> {
    if cfg.steps == 0 {
        return Err(Error::input("fine-tuning needs at least one step"));
    }
    if data.train.is_empty() {
        return Err(Error::input("empty training split"));
    }
    let sizes: Vec<usize> = m
        .layers
        .iter()
        .filter_map(|l| l.adapter.as_ref())
        .flat_map(|a| [a.a.numel(), a.b.numel()])
        .collect();
    let mut final_loss = f32::NAN;
    if !sizes.is_empty() {
        let mut adam = Adam::new(cfg.lr, &sizes);
        let mut g = rng::rng(seed);
        for step in 0..cfg.steps {
            let batch = crate::models::train::sample_batch(&data.train, cfg.batch_size, &mut g)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.inputs);
            let mut binder = AdaptedBinder::trainable(&m.layers);
            let out = m.model.forward(&mut tape, x, &mut binder)?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training { step, loss: value });
            }
            final_loss = value;
            let grads = tape.backward(loss)?;
            let grad_slices: Vec<&[f32]> = binder
                .vars
                .iter()
                .flatten()
                .flat_map(|&(a, b)| [grads.get(a).expect("A grad"), grads.get(b).expect("B grad")])
                .collect();
            let mut params: Vec<&mut [f32]> = Vec::with_capacity(sizes.len());
            for ad in m.layers.iter_mut().filter_map(|l| l.adapter.as_mut()) {
                params.push(ad.a.data_mut());
                params.push(ad.b.data_mut());
            }
            adam.step(&mut params, &grad_slices);
        }
    }
    Ok(TrainReport { val_accuracy: m.accuracy(&data.validation)?, final_loss })
}

/// Dequantizes, trains every weight and bias, then re-quantizes each layer
/// at its original precision. Adapters are folded in before training.
pub fn full_finetune(m: &AdaptedModel, data: &SyntheticDataset, cfg: &FinetuneConfig, seed: u64) -> Result<(AdaptedModel, TrainReport)> {
    let mut dense = m.merged()?;
    let tc = TrainConfig { steps: cfg.steps, batch_size: cfg.batch_size, lr: cfg.lr };
    let report = train(&mut dense, data, &tc, seed)?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for (lin, old) in dense.linears().into_iter().zip(&m.layers) {
        layers.push(AdaptedLayer::new(lin.id.clone(), Base::project(&lin.weight, old.precision)?, old.precision, lin.bias.clone(), None)?);
    }
    let out = AdaptedModel::from_layers(&dense, layers)?;
    let val_accuracy = out.accuracy(&data.validation)?;
    Ok((out, TrainReport { val_accuracy, final_loss: report.final_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, generate_dataset, Arch, ModelSpec};

    fn rand_matrix(m: usize, n: usize, seed: u64) -> Tensor {
        let mut g = rng::rng(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        Tensor::from_fn(&[m, n], |_| normal.sample(&mut g) as f32)
    }

    #[test]
    fn zero_b_matches_base_forward() {
        let w = rand_matrix(6, 5, 1);
        let q4 = Precision::quant(QuantFormat::Nf, 4);
        let init = init_adapter(&w, q4, InitMethod::Gaussian, 3, 2).unwrap();
        let layer = AdaptedLayer::new("l", init.base.clone(), q4, Tensor::zeros(&[6]), Some(init.adapter)).unwrap();
        let plain = AdaptedLayer::new("l", init.base, q4, Tensor::zeros(&[6]), None).unwrap();
        let x = rand_matrix(4, 5, 3);
        assert!(adapted_forward(&layer, &x).unwrap().bit_eq(&adapted_forward(&plain, &x).unwrap()));
    }

    #[test]
    fn zero_factors_full_base_is_plain_linear() {
        let w = rand_matrix(3, 4, 5);
        let ad = LowRankAdapter { a: Tensor::zeros(&[3, 2]), b: Tensor::zeros(&[2, 4]), method: InitMethod::Gaussian };
        let layer = AdaptedLayer::new("l", Base::Full(w.clone()), Precision::Full, Tensor::zeros(&[3]), Some(ad)).unwrap();
        let x = rand_matrix(2, 4, 6);
        let want = x.matmul(&w.transpose().unwrap()).unwrap();
        assert!(adapted_forward(&layer, &x).unwrap().max_abs_diff(&want) == 0.0);
    }

    #[test]
    fn full_rank_loftq_is_exact() {
        let w = rand_matrix(8, 6, 7);
        let init = init_adapter(&w, Precision::quant(QuantFormat::Nf, 4), InitMethod::LoftQ { iters: 1 }, 6, 0).unwrap();
        let obj = loftq_objective(&w, &init.base.dense(), &init.adapter.a, &init.adapter.b).unwrap();
        assert!(obj.sqrt() <= 1e-5, "{}", obj.sqrt());
    }

    #[test]
    fn objective_edge_cases() {
        let w = rand_matrix(4, 4, 8);
        let q = rand_matrix(4, 4, 9);
        let zero_a = Tensor::zeros(&[4, 2]);
        let zero_b = Tensor::zeros(&[2, 4]);
        let direct = w.sub(&q).unwrap().frobenius_sq();
        assert!((loftq_objective(&w, &q, &zero_a, &zero_b).unwrap() - direct).abs() < 1e-6 * direct);
        // A·B = W − Q with rank 4 factors
        let a = w.sub(&q).unwrap();
        let b = Tensor::identity(4);
        assert!(loftq_objective(&w, &q, &a, &b).unwrap() < 1e-12);
    }

    #[test]
    fn rank_is_clamped() {
        let w = rand_matrix(3, 7, 1);
        let init = init_adapter(&w, Precision::Full, InitMethod::Pissa, 8, 0).unwrap();
        assert_eq!(init.adapter.rank(), 3);
        assert!(init_adapter(&w, Precision::Full, InitMethod::Pissa, 0, 0).is_err());
    }

    #[test]
    fn pissa_full_rank_reproduces_weight() {
        let w = rand_matrix(5, 5, 4);
        let init = init_adapter(&w, Precision::Full, InitMethod::Pissa, 5, 0).unwrap();
        let back = init.base.dense().add(&init.adapter.delta()).unwrap();
        assert!(back.max_abs_diff(&w) < 1e-5);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("loftq:4".parse::<InitMethod>().unwrap(), InitMethod::LoftQ { iters: 4 });
        assert_eq!(parse_method_label("loftq(2)").unwrap(), InitMethod::LoftQ { iters: 2 });
        assert!("loftq:0".parse::<InitMethod>().is_err());
        assert!("svd".parse::<InitMethod>().is_err());
    }

    #[test]
    fn finetune_keeps_base_and_zero_lr_keeps_accuracy() {
        let data = generate_dataset(4, 32, 512, 1).unwrap();
        let model = build_model(ModelSpec::new(Arch::MlpS), 1).unwrap();
        let prec = precisions(&BitConfig::uniform(2, 4), Some(QuantFormat::Nf));
        let cfg = AdapterConfig { method: Some(InitMethod::Gaussian), rank: 4 };
        let mut am = AdaptedModel::build(&model, &prec, &cfg, 3).unwrap();
        let bases: Vec<Base> = am.layers.iter().map(|l| l.base.clone()).collect();
        let before = am.accuracy(&data.validation).unwrap();
        let r = finetune(&mut am, &data, &FinetuneConfig { steps: 5, lr: 0.0, batch_size: 16 }, 0).unwrap();
        assert_eq!(r.val_accuracy, before);
        finetune(&mut am, &data, &FinetuneConfig { steps: 5, lr: 1e-2, batch_size: 16 }, 0).unwrap();
        for (l, b) in am.layers.iter().zip(&bases) {
            assert_eq!(&l.base, b);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = build_model(ModelSpec::new(Arch::TinyTransformer), 1).unwrap();
        let bits = BitConfig(vec![4, 8, 4, 4, 8, 4, 4, 4]);
        let cfg = AdapterConfig { method: Some(InitMethod::LoftQ { iters: 2 }), rank: 4 };
        let am = AdaptedModel::build(&model, &precisions(&bits, Some(QuantFormat::Int)), &cfg, 3).unwrap();
        let ck = am.to_checkpoint();
        let back = AdaptedModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, am);
    }
}
