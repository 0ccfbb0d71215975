//! Condition-token divergence.

use crate::models::ModelBundle;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// `-‖tokens' - tokens‖₁` against fixed clean tokens.
pub fn divergence<'t>(tape: &'t Tape, tokens: Var<'t>, clean: &Tensor) -> Result<Var<'t>> {
    Ok(tokens.sub(&tape.constant(clean))?.abs().sum().neg())
}

/// `-‖P(x + δ) - P(x)‖₁` as a plain value; never positive.
pub fn loss_proj(bundle: &ModelBundle, x: &Tensor, delta: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let xv = tape.constant(x);
    let clean = bundle.project_condition(&tape, xv)?.value();
    let tokens = bundle.project_condition(&tape, xv.add(&tape.constant(delta))?)?;
    Ok(divergence(&tape, tokens, &clean)?.item())
}
