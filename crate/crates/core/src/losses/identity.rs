//! Identity-embedding dissimilarity.

use crate::models::ModelBundle;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::Result;

/// `a·b / (‖a‖ ‖b‖) - 1`, in `[-2, 0]`.
pub fn cosine_loss<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
    let dot = a.mul(&b)?.sum();
    let na = a.square().sum().sqrt();
    let nb = b.square().sum().sqrt();
    Ok(dot.div(&na.mul(&nb)?)?.add_scalar(-1.0))
}

/// Cosine loss of the perturbed embedding against a fixed clean embedding.
pub fn identity_term<'t>(tape: &'t Tape, embedding: Var<'t>, clean: &Tensor) -> Result<Var<'t>> {
    Ok(cosine_loss(embedding, tape.constant(clean))?)
}

pub fn loss_id(bundle: &ModelBundle, x: &Tensor, delta: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let xv = tape.constant(x);
    let clean = bundle.embed_identity(&tape, xv)?.value();
    let adv = bundle.embed_identity(&tape, xv.add(&tape.constant(delta))?)?;
    Ok(identity_term(&tape, adv, &clean)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antiparallel_and_parallel() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        assert!((cosine_loss(a, a.scale(-3.0)).unwrap().item() + 2.0).abs() < 1e-12);
        assert!(cosine_loss(a, a.scale(0.1)).unwrap().item().abs() < 1e-12);
    }
}
