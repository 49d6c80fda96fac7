//! Integer codes, lookup-table dequantization and simulated matrix
//! quantization.
//!
//! A value is encoded as `round((2^N − 1)·F(x))` with `F` either the
//! min–max normalization (uniform) or `Φ(x/σ)` (NormalFloat). The codebook
//! maps a code back through `F⁻¹(i / (2^N − 1))`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-matrix overhead counted by [`memory_bytes`] for scheme parameters.
pub const PARAM_OVERHEAD_BYTES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    UniformInt,
    NormalFloat,
}

/// How [`quantize_matrix`] fits scheme parameters to a weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantFormat {
    /// Uniform grid on `[min W, max W]`.
    Int,
    /// NormalFloat with `σ` = sample standard deviation of `W`.
    Nf,
    /// Uniform 4-bit grid on `[−max|W|, max|W|]`.
    Fp4,
}

impl QuantFormat {
    pub fn name(self) -> &'static str {
        match self {
            QuantFormat::Int => "int",
            QuantFormat::Nf => "nf",
            QuantFormat::Fp4 => "fp4",
        }
    }
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int" | "uniform" => Ok(QuantFormat::Int),
            "nf" | "nf4" | "normalfloat" => Ok(QuantFormat::Nf),
            "fp4" => Ok(QuantFormat::Fp4),
            other => Err(Error::config(format!("unknown quantization kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QuantScheme {
    UniformInt { bits: u8, min: f32, max: f32 },
    NormalFloat { bits: u8, sigma: f32, delta: f32 },
}

impl QuantScheme {
    pub fn uniform(bits: u8, min: f32, max: f32) -> Result<Self> {
        let s = QuantScheme::UniformInt { bits, min, max };
        s.validate()?;
        Ok(s)
    }

    /// NormalFloat with the default half-step clamp `δ = 1/(2(2^N − 1))`.
    pub fn normal_float(bits: u8, sigma: f32) -> Result<Self> {
        Self::normal_float_with_delta(bits, sigma, default_delta(bits))
    }

    pub fn normal_float_with_delta(bits: u8, sigma: f32, delta: f32) -> Result<Self> {
        let s = QuantScheme::NormalFloat { bits, sigma, delta };
        s.validate()?;
        Ok(s)
    }

    pub fn kind(&self) -> SchemeKind {
        match self {
            QuantScheme::UniformInt { .. } => SchemeKind::UniformInt,
            QuantScheme::NormalFloat { .. } => SchemeKind::NormalFloat,
        }
    }

    pub fn bits(&self) -> u8 {
        match *self {
            QuantScheme::UniformInt { bits, .. } | QuantScheme::NormalFloat { bits, .. } => bits,
        }
    }

    pub fn levels(&self) -> usize {
        1usize << self.bits()
    }

    fn max_code(&self) -> f64 {
        (self.levels() - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits(), 2 | 4 | 8) {
            return Err(Error::input(format!("unsupported bit width {}", self.bits())));
        }
        match *self {
            QuantScheme::UniformInt { min, max, .. } => {
                if !(min.is_finite() && max.is_finite() && max >= min) {
                    return Err(Error::input(format!("uniform range [{min}, {max}] is invalid")));
                }
            }
            QuantScheme::NormalFloat { sigma, delta, .. } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::input(format!("sigma must be positive, got {sigma}")));
                }
                if !(delta > 0.0 && delta < 0.5) {
                    return Err(Error::input(format!("clamp delta must lie in (0, 0.5), got {delta}")));
                }
            }
        }
        Ok(())
    }

    /// `F(x)`, clamped to `[0, 1]`.
    fn normalize(&self, x: f64) -> f64 {
        let f = match *self {
            QuantScheme::UniformInt { min, max, .. } => {
                if max == min {
                    0.0
                } else {
                    (x - f64::from(min)) / (f64::from(max) - f64::from(min))
                }
            }
            QuantScheme::NormalFloat { sigma, .. } => std_normal_cdf(x / f64::from(sigma)),
        };
        f.clamp(0.0, 1.0)
    }
}

pub fn default_delta(bits: u8) -> f32 {
    let steps = ((1u32 << bits) - 1) as f32;
    1.0 / (2.0 * steps)
}

/// Lookup table `T[0 .. 2^N − 1]`, non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    values: Vec<f32>,
}

impl Codebook {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lookup(&self, code: u8) -> f32 {
        self.values[code as usize]
    }

    fn from_values(values: Vec<f32>, bits: u8) -> Result<Self> {
        if values.len() != 1usize << bits {
            return Err(Error::Format(format!("codebook of {} entries for {bits} bits", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format("codebook must be finite and non-decreasing".into()));
        }
        Ok(Codebook { values })
    }
}

pub fn build_codebook(scheme: &QuantScheme) -> Result<Codebook> {
    scheme.validate()?;
    let steps = scheme.max_code();
    let values = (0..scheme.levels())
        .map(|i| {
            let u = i as f64 / steps;
            match *scheme {
                QuantScheme::UniformInt { min, max, .. } => {
                    (f64::from(min) + u * (f64::from(max) - f64::from(min))) as f32
                }
                QuantScheme::NormalFloat { sigma, delta, .. } => {
                    let p = u.clamp(f64::from(delta), 1.0 - f64::from(delta));
                    (f64::from(sigma) * std_normal_quantile(p)) as f32
                }
            }
        })
        .collect();
    Ok(Codebook { values })
}

/// Round half away from zero.
fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Scheme plus its codebook; encodes scalars.
#[derive(Debug, Clone)]
pub struct Quantizer {
    scheme: QuantScheme,
    codebook: Codebook,
}

/// Width of the band around a rounding midpoint treated as an exact tie.
const TIE_BAND: f64 = 1e-6;

impl Quantizer {
    pub fn new(scheme: QuantScheme) -> Result<Self> {
        let codebook = build_codebook(&scheme)?;
        Ok(Quantizer { scheme, codebook })
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn code(&self, x: f32) -> Result<u8> {
        if !x.is_finite() {
            return Err(Error::input(format!("cannot quantize non-finite value {x}")));
        }
        let scaled = self.scheme.max_code() * self.scheme.normalize(f64::from(x));
        let mut code = round_half_away(scaled);
        if let QuantScheme::NormalFloat { .. } = self.scheme {
            // The clamped endpoints T[0], T[max] sit exactly on a rounding
            // midpoint; resolve midpoints by distance in value space,
            // preferring the larger code on equal distance.
            let frac = scaled - scaled.floor();
            if (frac - 0.5).abs() < TIE_BAND {
                let lo = scaled.floor();
                let hi = lo + 1.0;
                let x = f64::from(x);
                let dlo = (x - f64::from(self.codebook.values[lo as usize])).abs();
                let dhi = (x - f64::from(self.codebook.values[hi as usize])).abs();
                code = if dlo < dhi { lo } else { hi };
            }
        }
        Ok(code as u8)
    }
}

pub fn quantize_scalar(x: f32, scheme: &QuantScheme) -> Result<u8> {
    Quantizer::new(*scheme)?.code(x)
}

/// Integer codes plus the scheme and codebook that decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    scheme: QuantScheme,
    codebook: Codebook,
}

impl QuantizedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn bits(&self) -> u8 {
        self.scheme.bits()
    }

    /// Bytes: `[kind u8][bits u8][rows u32][cols u32][2 × param f32]`,
    /// then the codebook as f32, then codes packed low bits first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let (kind, p0, p1) = match self.scheme {
            QuantScheme::UniformInt { min, max, .. } => (0u8, min, max),
            QuantScheme::NormalFloat { sigma, delta, .. } => (1u8, sigma, delta),
        };
        out.push(kind);
        out.push(self.bits());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&p0.to_le_bytes());
        out.extend_from_slice(&p1.to_le_bytes());
        for v in &self.codebook.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(pack_codes(&self.codes, self.bits()));
        out
    }

    /// Parses one matrix from the front of `bytes`; returns it and the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader::new(bytes);
        let kind = r.u8()?;
        let bits = r.u8()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let p0 = r.f32()?;
        let p1 = r.f32()?;
        let scheme = match kind {
            0 => QuantScheme::UniformInt { bits, min: p0, max: p1 },
            1 => QuantScheme::NormalFloat { bits, sigma: p0, delta: p1 },
            k => return Err(Error::Format(format!("unknown scheme kind {k}"))),
        };
        scheme.validate().map_err(|e| Error::Format(e.to_string()))?;
        let values = (0..scheme.levels()).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let codebook = Codebook::from_values(values, bits)?;
        let n = rows * cols;
        let packed = r.take(packed_len(n, bits))?;
        let codes = unpack_codes(packed, bits, n);
        Ok((QuantizedMatrix { rows, cols, codes, scheme, codebook }, r.pos))
    }
}

fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let per_byte = 8 / bits as usize;
    codes
        .chunks(per_byte)
        .map(|chunk| chunk.iter().enumerate().fold(0u8, |acc, (i, &c)| acc | (c << (i * bits as usize))))
        .collect()
}

fn unpack_codes(packed: &[u8], bits: u8, n: usize) -> Vec<u8> {
    let per_byte = 8 / bits as usize;
    let mask = ((1u16 << bits) - 1) as u8;
    (0..n).map(|i| (packed[i / per_byte] >> ((i % per_byte) * bits as usize)) & mask).collect()
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// `X^D = T[X^INT]`, reshaped to `(rows, cols)`.
pub fn dequantize(q: &QuantizedMatrix) -> Tensor {
    let data = q.codes.iter().map(|&c| q.codebook.lookup(c)).collect();
    Tensor::matrix(q.rows, q.cols, data).expect("codes match shape")
}

/// Fits a scheme of `format` and `bits` to `weights`.
pub fn fit_scheme(weights: &Tensor, format: QuantFormat, bits: u8) -> Result<QuantScheme> {
    fit_scheme_with(weights, format, bits, None)
}

/// [`fit_scheme`] with an explicit NormalFloat endpoint offset `δ`.
/// `delta` is ignored by the uniform formats.
pub fn fit_scheme_with(weights: &Tensor, format: QuantFormat, bits: u8, delta: Option<f32>) -> Result<QuantScheme> {
    let data = weights.data();
    if data.is_empty() {
        return Err(Error::input("cannot quantize an empty matrix"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("cannot quantize non-finite weights"));
    }
    match format {
        QuantFormat::Int => {
            let (min, max) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            QuantScheme::uniform(bits, min, max)
        }
        QuantFormat::Fp4 => {
            let absmax = data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            QuantScheme::uniform(4, -absmax, absmax)
        }
        QuantFormat::Nf => {
            let n = data.len() as f64;
            let mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let denom = if data.len() > 1 { n - 1.0 } else { 1.0 };
            let var = data.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / denom;
            let sigma = (var.sqrt() as f32).max(f32::MIN_POSITIVE);
            match delta {
                Some(d) => QuantScheme::normal_float_with_delta(bits, sigma, d),
                None => QuantScheme::normal_float(bits, sigma),
            }
        }
    }
}

/// Encodes every entry of `weights` with a fixed scheme.
pub fn quantize_with(weights: &Tensor, scheme: &QuantScheme) -> Result<QuantizedMatrix> {
    let (rows, cols) = weights.dims2()?;
    let quantizer = Quantizer::new(*scheme)?;
    let codes = weights.data().iter().map(|&x| quantizer.code(x)).collect::<Result<Vec<_>>>()?;
    Ok(QuantizedMatrix { rows, cols, codes, scheme: *scheme, codebook: quantizer.codebook })
}

/// Encodes each of `values` (row-major `rows × cols`) as the codebook entry
/// nearest in value; equal distances go to the larger code.
pub fn project_nearest(values: &[f64], rows: usize, cols: usize, scheme: &QuantScheme) -> Result<QuantizedMatrix> {
    if values.len() != rows * cols {
        return Err(Error::shape(format!("{} values for a {rows}x{cols} matrix", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("cannot quantize non-finite weights"));
    }
    let codebook = build_codebook(scheme)?;
    let table: Vec<f64> = codebook.values.iter().map(|&v| f64::from(v)).collect();
    let codes = values
        .iter()
        .map(|&x| {
            let hi = table.partition_point(|&t| t < x).min(table.len() - 1);
            if hi == 0 || (table[hi] - x).abs() <= (x - table[hi - 1]).abs() { hi as u8 } else { (hi - 1) as u8 }
        })
        .collect();
    Ok(QuantizedMatrix { rows, cols, codes, scheme: *scheme, codebook })
}

/// `q_N`: fit a per-tensor scheme, then encode. [`dequantize`] of the result
/// is the simulated high-precision matrix.
pub fn quantize_matrix(weights: &Tensor, format: QuantFormat, bits: u8) -> Result<QuantizedMatrix> {
    let scheme = fit_scheme(weights, format, bits)?;
    quantize_with(weights, &scheme)
}

/// `ceil(m·n·N/8)` code bytes + `2^N·4` codebook bytes + parameter overhead.
pub fn memory_bytes(q: &QuantizedMatrix) -> u64 {
    memory_bytes_for(q.rows, q.cols, q.bits())
}

pub fn memory_bytes_for(rows: usize, cols: usize, bits: u8) -> u64 {
    let code_bytes = ((rows * cols) as u64 * u64::from(bits)).div_ceil(8);
    code_bytes + (1u64 << bits) * 4 + PARAM_OVERHEAD_BYTES
}

/// Standard normal CDF via the error function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Φ⁻¹ by bisection on erf; independent of `erfc_inv`.
    fn quantile_by_bisection(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 0.5 * (1.0 + erf::erf(mid / std::f64::consts::SQRT_2)) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn uniform_two_bit_example() {
        let s = QuantScheme::uniform(2, 0.0, 1.0).unwrap();
        assert_eq!(quantize_scalar(0.5, &s).unwrap(), 2);
        assert_eq!(quantize_scalar(0.0, &s).unwrap(), 0);
        assert_eq!(quantize_scalar(1.0, &s).unwrap(), 3);
        let t = build_codebook(&s).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in t.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn boundaries_map_to_extreme_codes() {
        for bits in [2u8, 4, 8] {
            let s = QuantScheme::uniform(bits, -0.7, 1.3).unwrap();
            assert_eq!(quantize_scalar(-0.7, &s).unwrap(), 0);
            assert_eq!(quantize_scalar(1.3, &s).unwrap() as usize, (1 << bits) - 1);
        }
    }

    #[test]
    fn nf4_zero_maps_to_nearest_entry() {
        let s = QuantScheme::normal_float(4, 1.0).unwrap();
        let code = quantize_scalar(0.0, &s).unwrap();
        let t = build_codebook(&s).unwrap();
        let best = t.values().iter().map(|v| v.abs()).fold(f32::INFINITY, f32::min);
        assert_eq!(t.lookup(code).abs(), best);
        assert_eq!(code, 8);
    }

    #[test]
    fn nf4_first_entry_matches_bisection() {
        let s = QuantScheme::normal_float(4, 1.0).unwrap();
        let QuantScheme::NormalFloat { delta, .. } = s else { unreachable!() };
        assert!((delta - 1.0 / 30.0).abs() < 1e-9);
        let t = build_codebook(&s).unwrap();
        let oracle = quantile_by_bisection(1.0 / 30.0);
        assert!((f64::from(t.values()[0]) - oracle).abs() < 1e-6);
        assert!((oracle + 1.834).abs() < 1e-3);
    }

    #[test]
    fn nf_codebook_symmetric() {
        for bits in [2u8, 4, 8] {
            let t = build_codebook(&QuantScheme::normal_float(bits, 0.3).unwrap()).unwrap();
            let v = t.values();
            for i in 0..v.len() {
                assert!((v[i] + v[v.len() - 1 - i]).abs() < 1e-6, "bits {bits} i {i}");
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let s = QuantScheme::uniform(4, 0.0, 1.0).unwrap();
        assert!(matches!(quantize_scalar(f32::NAN, &s), Err(Error::Input(_))));
        assert!(matches!(quantize_scalar(f32::INFINITY, &s), Err(Error::Input(_))));
    }

    #[test]
    fn invalid_schemes() {
        assert!(QuantScheme::uniform(3, 0.0, 1.0).is_err());
        assert!(QuantScheme::uniform(4, 1.0, 0.0).is_err());
        assert!(QuantScheme::normal_float(4, 0.0).is_err());
        assert!(QuantScheme::normal_float_with_delta(4, 1.0, 0.5).is_err());
    }

    #[test]
    fn all_zero_codes_dequantize_to_first_entry() {
        let w = Tensor::from_fn(&[3, 4], |i| i as f32);
        let mut q = quantize_matrix(&w, QuantFormat::Int, 4).unwrap();
        q.codes.iter_mut().for_each(|c| *c = 0);
        let d = dequantize(&q);
        assert!(d.data().iter().all(|&v| v == q.codebook.values()[0]));
    }

    #[test]
    fn constant_matrix_is_exact() {
        let w = Tensor::filled(&[4, 5], 0.25);
        let q = quantize_matrix(&w, QuantFormat::Int, 4).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert!(dequantize(&q).bit_eq(&w));
    }

    #[test]
    fn empty_and_non_finite_matrices() {
        let mut w = Tensor::zeros(&[2, 2]);
        w.data_mut()[1] = f32::NAN;
        assert!(matches!(quantize_matrix(&w, QuantFormat::Nf, 4), Err(Error::Input(_))));
    }

    #[test]
    fn memory_examples() {
        assert_eq!(memory_bytes_for(128, 128, 4), 8192 + 64 + 16);
        let code4 = memory_bytes_for(128, 128, 4) - 64 - 16;
        let code8 = memory_bytes_for(128, 128, 8) - 1024 - 16;
        assert_eq!(code8, 2 * code4);
        assert_eq!(memory_bytes_for(3, 3, 4), 5 + 64 + 16);
    }

    #[test]
    fn fp4_is_symmetric_uniform() {
        let w = Tensor::vector(vec![-0.5, 0.2, 0.9]).unwrap().reshape(vec![1, 3]).unwrap();
        let s = fit_scheme(&w, QuantFormat::Fp4, 8).unwrap();
        assert_eq!(s, QuantScheme::UniformInt { bits: 4, min: -0.9, max: 0.9 });
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let w = Tensor::from_fn(&[5, 7], |i| ((i * 13) % 17) as f32 / 17.0 - 0.4);
        for format in [QuantFormat::Int, QuantFormat::Nf] {
            for bits in [2u8, 4, 8] {
                let q = quantize_matrix(&w, format, bits).unwrap();
                let bytes = q.to_bytes();
                let (back, used) = QuantizedMatrix::from_bytes(&bytes).unwrap();
                assert_eq!(used, bytes.len());
                assert_eq!(back.to_bytes(), bytes);
                assert_eq!(back, q);
            }
        }
    }

    #[test]
    fn four_bit_packing_is_low_nibble_first() {
        assert_eq!(pack_codes(&[0x1, 0xA, 0x3], 4), vec![0xA1, 0x03]);
        assert_eq!(unpack_codes(&[0xA1, 0x03], 4, 3), vec![0x1, 0xA, 0x3]);
    }

    #[test]
    fn truncated_bytes_rejected() {
        let q = quantize_matrix(&Tensor::identity(3), QuantFormat::Int, 4).unwrap();
        let bytes = q.to_bytes();
        assert!(matches!(QuantizedMatrix::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn nearest_projection_matches_linear_scan() {
        let scheme = QuantScheme::normal_float(4, 0.7).unwrap();
        let table = build_codebook(&scheme).unwrap();
        let values: Vec<f64> = (0..400).map(|i| (i as f64 - 200.0) / 70.0).collect();
        let q = project_nearest(&values, 20, 20, &scheme).unwrap();
        for (&x, &c) in values.iter().zip(q.codes()) {
            let best = table
                .values()
                .iter()
                .map(|&t| (x - f64::from(t)).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(((x - f64::from(table.lookup(c))).abs() - best).abs() < 1e-12);
        }
        assert!(project_nearest(&values, 3, 3, &scheme).is_err());
    }
}
