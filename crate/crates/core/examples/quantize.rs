//! Quantizes a random Gaussian matrix with each format and reports the error.
use prunequant::quant::{dequantize, memory_bytes, quantize_matrix, QuantFormat};
use prunequant::Tensor;
use rand_distr::{Distribution, Normal};

fn main() -> prunequant::Result<()> {
    let mut rng = prunequant::rng::rng(7);
    let normal = Normal::new(0.0f32, 0.05).unwrap();
    let w = Tensor::from_fn(&[64, 128], |_| normal.sample(&mut rng));
    println!("fp32: {} bytes", w.numel() * 4);
    for (format, bits) in [(QuantFormat::Int, 8), (QuantFormat::Int, 4), (QuantFormat::Nf, 4), (QuantFormat::Nf, 2), (QuantFormat::Fp4, 4)] {
        let q = quantize_matrix(&w, format, bits)?;
        let err = dequantize(&q).sub(&w)?.frobenius_sq() / w.frobenius_sq();
        println!("{:>4} {bits}-bit: {:>6} bytes, relative squared error {err:.2e}", format.name(), memory_bytes(&q));
    }
    Ok(())
}
