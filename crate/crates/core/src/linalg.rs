//! Dense f64 helpers backed by nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2()?;
    Ok(DMatrix::from_row_iterator(r, c, t.data().iter().map(|&v| f64::from(v))))
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::from_fn(&[r, c], |i| m[(i / c, i % c)] as f32)
}

/// Singular triplets sorted by descending singular value.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × k`, columns are left singular vectors.
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    /// `k × n`, rows are right singular vectors.
    pub vt: DMatrix<f64>,
}

const SVD_EPS: f64 = 1e-14;
const SVD_MAX_ITER: usize = 10_000;

pub fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    let dec = m
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numeric(format!("SVD of {}x{} matrix did not converge", m.nrows(), m.ncols())))?;
    let (u, vt) = (dec.u.expect("requested U"), dec.v_t.expect("requested Vᵀ"));
    let mut order: Vec<usize> = (0..dec.singular_values.len()).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]).then(a.cmp(&b)));
    let s = order.iter().map(|&i| dec.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt = DMatrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    Ok(Svd { u, s, vt })
}

/// Rank-`r` factors `(U_r·S_r^½, S_r^½·V_rᵀ)` of `m`.
pub fn split_factors(m: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = svd(m)?;
    let r = r.min(d.s.len());
    let root: Vec<f64> = d.s[..r].iter().map(|s| s.max(0.0).sqrt()).collect();
    let a = DMatrix::from_fn(m.nrows(), r, |i, k| d.u[(i, k)] * root[k]);
    let b = DMatrix::from_fn(r, m.ncols(), |k, j| root[k] * d.vt[(k, j)]);
    Ok((a, b))
}
