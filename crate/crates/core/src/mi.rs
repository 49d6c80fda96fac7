//! Layer importance by mutual information with the prediction, and the
//! greedy initial bit allocation built on it.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{argmax_rows, FrozenBinder, ToyModel};
use crate::quant::memory_bytes_for;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_CAP_FRACTION: f64 = 0.25;

const TRACE_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivationTrace {
    pub layer_id: String,
    /// Projection of each sample's flattened layer output.
    pub summaries: Vec<f64>,
    /// Argmax of the model's logits per sample.
    pub predictions: Vec<usize>,
}

fn unit_vector(len: usize, seed: u64, layer: usize) -> Vec<f64> {
    let mut r = rng::rng_for(seed, &format!("projection/{layer}"));
    let v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut r)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

/// Runs `samples` through `model` and projects every linear's output onto a
/// seeded unit direction.
pub fn trace_activations(model: &ToyModel, samples: &Tensor, seed: u64) -> Result<Vec<LayerActivationTrace>> {
    let (n, d) = samples.dims2()?;
    let ids = model.layer_ids();
    let mut summaries = vec![Vec::with_capacity(n); ids.len()];
    let mut predictions = Vec::with_capacity(n);
    let mut directions: Vec<Option<Vec<f64>>> = vec![None; ids.len()];
    for start in (0..n).step_by(TRACE_CHUNK) {
        let end = (start + TRACE_CHUNK).min(n);
        let batch = end - start;
        let chunk = Tensor::matrix(batch, d, samples.data()[start * d..end * d].to_vec())?;
        let mut tape = Tape::new();
        let x = tape.constant(chunk);
        let mut outputs = Vec::new();
        let out = model.forward_traced(&mut tape, x, &mut FrozenBinder, Some(&mut outputs))?;
        predictions.extend(argmax_rows(tape.value(out.logits)));
        for (li, &var) in outputs.iter().enumerate() {
            let v = tape.value(var);
            let per_sample = v.numel() / batch;
            let u = directions[li].get_or_insert_with(|| unit_vector(per_sample, seed, li));
            for row in v.data().chunks(per_sample) {
                summaries[li].push(row.iter().zip(u.iter()).map(|(&a, &b)| f64::from(a) * b).sum());
            }
        }
    }
    Ok(ids
        .into_iter()
        .zip(summaries)
        .map(|(layer_id, summaries)| LayerActivationTrace { layer_id, summaries, predictions: predictions.clone() })
        .collect())
}

/// Equal-frequency bin of each value: rank `r` lands in `⌊r·K/n⌋`, and tied
/// values share the bin of their first rank.
pub fn equal_frequency_bins(x: &[f64], k: usize) -> Vec<usize> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut bins = vec![0usize; n];
    let mut rank = 0;
    while rank < n {
        let mut end = rank + 1;
        while end < n && x[order[end]] == x[order[rank]] {
            end += 1;
        }
        let bin = rank * k / n;
        order[rank..end].iter().for_each(|&i| bins[i] = bin);
        rank = end;
    }
    bins
}

/// `Σ p(a,b)·ln(p(a,b) / (p(a)·p(b)))` over a table of counts.
pub fn mi_from_counts(counts: &[Vec<f64>]) -> f64 {
    let total: f64 = counts.iter().flatten().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..counts.first().map_or(0, |r| r.len())).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                let p = c / total;
                mi += p * (p / ((rows[i] / total) * (cols[j] / total))).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Plug-in estimate of `I(X; Y)` in nats after binning `x` into `k`
/// equal-frequency bins.
pub fn mutual_information(x: &[f64], y: &[usize], k: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::input(format!("{} summaries but {} labels", x.len(), y.len())));
    }
    if k == 0 || x.len() < k {
        return Err(Error::input(format!("need at least {k} samples for {k} bins, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite summary"));
    }
    let bins = equal_frequency_bins(x, k);
    let classes = y.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![vec![0.0; classes]; k];
    for (&b, &c) in bins.iter().zip(y) {
        counts[b][c] += 1.0;
    }
    Ok(mi_from_counts(&counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIReport {
    pub layer_ids: Vec<String>,
    pub mi: Vec<f64>,
    pub bins: usize,
    pub seed: u64,
}

pub fn mi_report(traces: &[LayerActivationTrace], bins: usize, seed: u64) -> Result<MIReport> {
    let mi = traces.iter().map(|t| mutual_information(&t.summaries, &t.predictions, bins)).collect::<Result<_>>()?;
    Ok(MIReport { layer_ids: traces.iter().map(|t| t.layer_id.clone()).collect(), mi, bins, seed })
}

/// Per-layer bit widths, each 4 or 8.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitConfig(pub Vec<u8>);

impl BitConfig {
    pub fn uniform(layers: usize, bits: u8) -> Self {
        BitConfig(vec![bits; layers])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn eight_bit_count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 8).count()
    }

    pub fn b_avg(&self) -> f64 {
        self.0.iter().map(|&b| f64::from(b)).sum::<f64>() / self.0.len().max(1) as f64
    }

    /// 0/1 encoding (4 → 0, 8 → 1).
    pub fn encode(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b == 8 { 1.0 } else { 0.0 }).collect()
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.0.len() != layers {
            return Err(Error::config(format!("bit config has {} entries for {layers} layers", self.0.len())));
        }
        if let Some(b) = self.0.iter().find(|&&b| b != 4 && b != 8) {
            return Err(Error::config(format!("bit width {b} is not 4 or 8")));
        }
        Ok(())
    }
}

impl fmt::Display for BitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for BitConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .split(',')
            .map(|p| p.trim().parse::<u8>().map_err(|_| Error::config(format!("bad bit width `{p}` in `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(b) = bits.iter().find(|&&b| b != 4 && b != 8) {
            return Err(Error::config(format!("bit width {b} is not 4 or 8")));
        }
        Ok(BitConfig(bits))
    }
}

/// `M(b)`: quantized weight bytes plus fp32 adapter bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// `(rows, cols)` of each quantizable weight.
    pub dims: Vec<(usize, usize)>,
    /// Adapter rank per layer; 0 for none. Clamped to `min(rows, cols)`.
    pub adapter_rank: usize,
}

impl MemoryModel {
    pub fn for_model(model: &ToyModel, adapter_rank: usize) -> Self {
        MemoryModel { dims: model.linears().iter().map(|l| (l.out_dim(), l.in_dim())).collect(), adapter_rank }
    }

    pub fn layers(&self) -> usize {
        self.dims.len()
    }

    pub fn adapter_bytes(&self) -> u64 {
        self.dims
            .iter()
            .map(|&(r, c)| {
                let k = self.adapter_rank.min(r.min(c));
                (k * (r + c) * 4) as u64
            })
            .sum()
    }

    pub fn layer_bytes(&self, layer: usize, bits: u8) -> u64 {
        let (r, c) = self.dims[layer];
        memory_bytes_for(r, c, bits)
    }

    pub fn cost(&self, b: &BitConfig) -> u64 {
        b.0.iter().enumerate().map(|(i, &bits)| self.layer_bytes(i, bits)).sum::<u64>() + self.adapter_bytes()
    }
}

/// Largest number of 8-bit layers for `layers` layers and cap fraction.
pub fn eight_bit_cap(layers: usize, cap_fraction: f64) -> usize {
    (cap_fraction * layers as f64 + 1e-9).floor() as usize
}

/// Starting from all 4-bit, upgrades layers to 8-bit in descending MI order
/// (ties by ascending index), skipping upgrades that would break the budget
/// or the 8-bit cap.
pub fn allocate_bits(mi: &[f64], memory: &MemoryModel, m_max: u64, cap_fraction: f64) -> Result<BitConfig> {
    let layers = memory.layers();
    if mi.len() != layers {
        return Err(Error::input(format!("{} MI values for {layers} layers", mi.len())));
    }
    let mut b = BitConfig::uniform(layers, 4);
    let floor = memory.cost(&b);
    if floor > m_max {
        return Err(Error::Allocation { budget: m_max, floor });
    }
    let cap = eight_bit_cap(layers, cap_fraction);
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&a, &c| mi[c].total_cmp(&mi[a]).then(a.cmp(&c)));
    let mut cost = floor;
    let mut upgraded = 0;
    for i in order {
        if upgraded >= cap {
            break;
        }
        let delta = memory.layer_bytes(i, 8) - memory.layer_bytes(i, 4);
        if cost + delta <= m_max {
            b.0[i] = 8;
            cost += delta;
            upgraded += 1;
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub b: BitConfig,
    pub memory_bytes: u64,
    pub b_avg: f64,
    pub m_max: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Arch, ModelSpec};

    #[test]
    fn identical_samples_identical_traces() {
        let m = build_model(ModelSpec::new(Arch::TinyTransformer), 1).unwrap();
        let row: Vec<f32> = (0..32).map(|i| (i as f32 * 0.3).sin()).collect();
        let x = Tensor::matrix(2, 32, [row.clone(), row].concat()).unwrap();
        for t in trace_activations(&m, &x, 5).unwrap() {
            assert_eq!(t.summaries[0].to_bits(), t.summaries[1].to_bits());
            assert_eq!(t.predictions[0], t.predictions[1]);
        }
    }

    #[test]
    fn constant_layer_has_zero_variance() {
        let mut m = build_model(ModelSpec::new(Arch::MlpS), 1).unwrap();
        m.linears_mut()[0].weight.data_mut().fill(0.0);
        let x = Tensor::from_fn(&[10, 32], |i| i as f32);
        let t = &trace_activations(&m, &x, 5).unwrap()[0];
        assert!(t.summaries.iter().all(|&s| s == t.summaries[0]));
    }

    #[test]
    fn deterministic_labels_give_label_entropy() {
        let x: Vec<f64> = (0..400).map(|i| i as f64).collect();
        let bins = equal_frequency_bins(&x, 4);
        let y: Vec<usize> = bins.iter().map(|&b| b % 2).collect();
        let mi = mutual_information(&x, &y, 4).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ties_share_first_bin() {
        let bins = equal_frequency_bins(&[1.0, 1.0, 1.0, 2.0], 2);
        assert_eq!(bins, vec![0, 0, 0, 1]);
    }

    #[test]
    fn length_mismatch_is_input_error() {
        assert!(matches!(mutual_information(&[0.0; 20], &[0; 19], 4), Err(Error::Input(_))));
        assert!(matches!(mutual_information(&[0.0; 3], &[0; 3], 4), Err(Error::Input(_))));
    }

    #[test]
    fn bit_config_text() {
        let b: BitConfig = "8,4,4,8".parse().unwrap();
        assert_eq!(b.0, vec![8, 4, 4, 8]);
        assert_eq!(b.to_string(), "8,4,4,8");
        assert_eq!(b.b_avg(), 6.0);
        assert!("8,3".parse::<BitConfig>().is_err());
        assert_eq!(serde_json::to_string(&b).unwrap(), "[8,4,4,8]");
    }

    #[test]
    fn equal_mi_upgrades_layer_zero() {
        let mem = MemoryModel { dims: vec![(16, 16); 4], adapter_rank: 0 };
        let floor = mem.cost(&BitConfig::uniform(4, 4));
        let delta = mem.layer_bytes(0, 8) - mem.layer_bytes(0, 4);
        let b = allocate_bits(&[0.3; 4], &mem, floor + delta, 0.25).unwrap();
        assert_eq!(b.0, vec![8, 4, 4, 4]);
    }

    #[test]
    fn floor_budget_gives_all_four_bit() {
        let m = build_model(ModelSpec::new(Arch::MlpM), 0).unwrap();
        let mem = MemoryModel::for_model(&m, 8);
        let floor = mem.cost(&BitConfig::uniform(8, 4));
        let b = allocate_bits(&[1.0, 0.5, 0.2, 0.1, 0.9, 0.7, 0.3, 0.4], &mem, floor, 0.25).unwrap();
        assert_eq!(b, BitConfig::uniform(8, 4));
        let err = allocate_bits(&[0.0; 8], &mem, floor - 1, 0.25).unwrap_err();
        assert!(matches!(err, Error::Allocation { floor: f, .. } if f == floor));
    }

    #[test]
    fn generous_budget_takes_top_two() {
        let mem = MemoryModel { dims: vec![(32, 32); 8], adapter_rank: 8 };
        let mi = [0.1, 0.5, 0.3, 0.9, 0.2, 0.8, 0.05, 0.4];
        let b = allocate_bits(&mi, &mem, u64::MAX / 2, 0.25).unwrap();
        assert_eq!(b.0, vec![4, 4, 4, 8, 4, 8, 4, 4]);
    }

    #[test]
    fn memory_counts_adapters() {
        let mem = MemoryModel { dims: vec![(64, 32)], adapter_rank: 8 };
        assert_eq!(mem.adapter_bytes(), 8 * 96 * 4);
        let tiny = MemoryModel { dims: vec![(4, 2)], adapter_rank: 8 };
        assert_eq!(tiny.adapter_bytes(), 2 * 6 * 4);
    }
}
