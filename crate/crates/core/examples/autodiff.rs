//! Fits a linear softmax classifier by hand with the tape.
use prunequant::autodiff::Tape;
use prunequant::Tensor;

fn main() -> prunequant::Result<()> {
    // two blobs in the plane
    let x = Tensor::matrix(4, 2, vec![1.0, 1.0, 1.2, 0.8, -1.0, -1.0, -0.9, -1.1])?;
    let labels = [0, 0, 1, 1];
    let mut w = Tensor::zeros(&[2, 2]);
    for step in 0..50 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(w.clone());
        let logits = tape.matmul(xv, wv)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(wv).expect("parameter gradient");
        for (wi, gi) in w.data_mut().iter_mut().zip(g) {
            *wi -= 0.5 * gi;
        }
        if step % 10 == 0 {
            println!("step {step:>2}: loss {:.4}", tape.value(loss).data()[0]);
        }
    }
    println!("weights {:?}", w.data());
    Ok(())
}
