use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ParamBinder, SplitData, SyntheticDataset, ToyModel};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 600, batch_size: 64, lr: 5e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub val_accuracy: f64,
    pub final_loss: f32,
}

/// Adam over a fixed list of flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `params[i]` and `grads[i]` must match the sizes given to `new`.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.cols();
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Samples a minibatch with replacement.
pub(crate) fn sample_batch(data: &SplitData, batch: usize, rng: &mut rng::Rng) -> Result<SplitData> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
    data.gather(&idx)
}

/// Trains every weight and bias of `model` with Adam on cross-entropy.
/// Returns validation accuracy. `steps == 0` leaves the model untouched.
pub fn train(model: &mut ToyModel, data: &SyntheticDataset, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::input("empty training split"));
    }
    let sizes: Vec<usize> = model.linears().iter().flat_map(|l| [l.weight.numel(), l.bias.numel()]).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut rng = rng::rng(seed);
    let mut final_loss = f32::NAN;
    for step in 0..cfg.steps {
        let batch = sample_batch(&data.train, cfg.batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.inputs);
        let mut binder = ParamBinder::default();
        let out = model.forward(&mut tape, x, &mut binder)?;
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
            .flat_map(|&(w, b)| [grads.get(w).expect("weight grad"), grads.get(b).expect("bias grad")])
            .collect();
        let mut params: Vec<&mut [f32]> = Vec::with_capacity(sizes.len());
        for super::Linear { weight, bias, .. } in model.linears_mut() {
            params.push(weight.data_mut());
            params.push(bias.data_mut());
        }
        adam.step(&mut params, &grad_slices);
    }
    let logits = model.predict(&data.validation.inputs)?;
    Ok(TrainReport { val_accuracy: accuracy(&logits, &data.validation.labels), final_loss })
}
