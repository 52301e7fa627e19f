//! Builds a small graph on the tape, back-propagates, and compares the
//! result with central differences.

use pitvqa::gradcheck::{grad_check, DEFAULT_H};
use pitvqa::{Result, Tape, Tensor};

fn main() -> Result<()> {
    let mut tape = Tape::new();
    let x = tape.param(
        "x",
        Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?,
    );
    let w = tape.param(
        "w",
        Tensor::new([3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6])?,
    );
    let h = tape.matmul(x, w)?;
    let h = tape.gelu(h)?;
    let loss = tape.cross_entropy(h, &[1, 0])?;
    let grads = tape.backward(loss)?;

    println!("loss = {:.6}", tape.value(loss).item()?);
    for (name, g) in grads.named() {
        println!("d loss / d {name} = {:?}", g.data());
    }

    let w0 = tape.value(w).clone();
    let err = grad_check(
        |t, xv| {
            let wv = t.constant(w0.clone());
            let h = t.matmul(xv, wv)?;
            let h = t.gelu(h)?;
            t.cross_entropy(h, &[1, 0])
        },
        tape.value(x),
        DEFAULT_H,
    )?;
    println!("max relative error vs central differences: {err:.2e}");
    Ok(())
}
