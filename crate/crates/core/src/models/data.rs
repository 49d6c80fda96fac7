use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calibration,
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Calibration, Split::Train, Split::Validation, Split::Test];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (all of them when `n` exceeds the split).
    pub fn head(&self, n: usize) -> Result<SplitData> {
        let n = n.min(self.len());
        let d = self.inputs.cols();
        Ok(SplitData {
            inputs: Tensor::matrix(n, d, self.inputs.data()[..n * d].to_vec())?,
            labels: self.labels[..n].to_vec(),
        })
    }

    pub fn gather(&self, idx: &[usize]) -> Result<SplitData> {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        Ok(SplitData {
            inputs: Tensor::matrix(idx.len(), d, data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Gaussian clusters: each class owns `clusters_per_class` centers of norm
/// `margin`, and samples add isotropic noise of scale `noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    pub clusters_per_class: usize,
    pub margin: f32,
    pub noise: f32,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams { classes: 4, dim: 32, n: 2048, clusters_per_class: 2, margin: 4.0, noise: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub params: DatasetParams,
    pub seed: u64,
    pub calibration: SplitData,
    pub train: SplitData,
    pub validation: SplitData,
    pub test: SplitData,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Calibration => &self.calibration,
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_dataset(classes: usize, dim: usize, n: usize, seed: u64) -> Result<SyntheticDataset> {
    generate_dataset_with(&DatasetParams { classes, dim, n, ..DatasetParams::default() }, seed)
}

pub fn generate_dataset_with(params: &DatasetParams, seed: u64) -> Result<SyntheticDataset> {
    let &DatasetParams { classes, dim, n, clusters_per_class, margin, noise } = params;
    if classes < 2 || dim == 0 || n < 4 * classes || clusters_per_class == 0 {
        return Err(Error::config(format!(
            "dataset needs classes >= 2, dim > 0, n >= 4*classes, clusters >= 1 (got {classes}, {dim}, {n}, {clusters_per_class})"
        )));
    }
    if !(margin.is_finite() && noise.is_finite() && noise >= 0.0) {
        return Err(Error::config("dataset margin and noise must be finite, noise >= 0"));
    }
    let mut rng = rng::rng(seed);
    let centers: Vec<Vec<f32>> = (0..classes * clusters_per_class)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
            v.into_iter().map(|x| x * margin / norm).collect()
        })
        .collect();

    // Labels cycle through classes; each block of `classes` consecutive
    // samples goes to one split, rotating over the four splits.
    let mut parts: [(Vec<f32>, Vec<usize>); 4] = Default::default();
    for i in 0..n {
        let label = i % classes;
        let cluster = rng.random_range(0..clusters_per_class);
        let center = &centers[label * clusters_per_class + cluster];
        let part = &mut parts[(i / classes) % 4];
        for &c in center {
            let z: f32 = StandardNormal.sample(&mut rng);
            part.0.push(c + noise * z);
        }
        part.1.push(label);
    }
    let [calibration, train, validation, test] = parts.map(|(data, labels)| {
        let rows = labels.len();
        SplitData { inputs: Tensor::matrix(rows, dim, data).expect("rows * dim elements"), labels }
    });
    Ok(SyntheticDataset { params: *params, seed, calibration, train, validation, test })
}
