//! Reverse-mode differentiation on the tape: a tiny softmax regression and
//! a comparison of its gradient with central differences.

use advshield::tensor::grad_check;
use advshield::{Tape, Tensor};

fn main() -> advshield::Result<()> {
    let w = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6])?;
    let x = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5])?;

    let tape = Tape::new();
    let wv = tape.param(&w);
    let logits = wv.matmul(&tape.constant(&x))?;
    let probs = logits.softmax(0)?;
    // negative log-probability of class 0
    let loss = probs.select(0)?.sum().scale(-1.0);
    tape.backward(loss)?;
    println!("probabilities: {:?}", probs.value().data());
    println!("dL/dW: {:?}", wv.grad().expect("W is a parameter").data());

    let x2 = x.clone();
    let outcome = grad_check(
        move |t: &Tape, w| {
            Ok(w.matmul(&t.constant(&x2))?
                .softmax(0)?
                .select(0)?
                .sum()
                .scale(-1.0))
        },
        &w,
        1e-5,
    )?;
    println!(
        "max relative error vs finite differences: {:.2e}",
        outcome.max_rel_error
    );
    Ok(())
}
