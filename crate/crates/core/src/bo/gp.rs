use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed RBF kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GpHyper {
    /// `ℓ = √L / 2`, `s² = 0.25`, `σ_n² = 1e-4`.
    pub fn for_layers(layers: usize) -> Self {
        GpHyper { length_scale: (layers as f64).sqrt() / 2.0, signal_var: 0.25, noise_var: 1e-4 }
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        self.signal_var * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Jitter ladder tried, relative to `s²`, when the kernel matrix is not
/// numerically positive definite.
const JITTER: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

/// Exact GP regression posterior with a constant prior mean equal to the
/// mean of the observations.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub prior_mean: f64,
    /// Diagonal jitter actually added on top of `σ_n²`.
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

pub fn gp_fit(xs: &[Vec<f64>], ys: &[f64], hyper: GpHyper) -> Result<GpModel> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::input(format!("{} inputs and {} targets", xs.len(), ys.len())));
    }
    let n = xs.len();
    if hyper.noise_var == 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                if xs[i] == xs[j] && ys[i] != ys[j] {
                    return Err(Error::Singular(format!(
                        "inputs {i} and {j} coincide with different targets and no observation noise"
                    )));
                }
            }
        }
    }
    let prior_mean = ys.iter().sum::<f64>() / n as f64;
    let k = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&xs[i], &xs[j]));
    let centered = DVector::from_iterator(n, ys.iter().map(|y| y - prior_mean));
    for rel in JITTER {
        let jitter = rel * hyper.signal_var;
        let mut kn = k.clone();
        for i in 0..n {
            kn[(i, i)] += hyper.noise_var + jitter;
        }
        if let Some(chol) = Cholesky::new(kn) {
            let alpha = chol.solve(&centered);
            if alpha.iter().all(|v| v.is_finite()) {
                return Ok(GpModel { hyper, xs: xs.to_vec(), ys: ys.to_vec(), prior_mean, jitter, chol, alpha });
            }
        }
    }
    Err(Error::Singular(format!("{n}x{n} kernel matrix not positive definite after jitter")))
}

impl GpModel {
    /// Posterior mean and variance at `x`; variance is clamped at 0.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.xs.len();
        let kx = DVector::from_iterator(n, self.xs.iter().map(|xi| self.hyper.kernel(xi, x)));
        let mean = self.prior_mean + kx.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&kx).expect("Cholesky factor is invertible");
        let var = self.hyper.kernel(x, x) - v.norm_squared();
        (mean, var.max(0.0))
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}
