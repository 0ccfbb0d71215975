use super::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    /// Max over coordinates of `|a - n| / max(1e-12, |a| + |n|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the tape gradient of scalar `f` at `x` against central differences.
///
/// `f` is called once on a tape where `x` is a parameter and then twice per
/// coordinate on fresh tapes where `x` is a constant.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckOutcome, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let input = tape.param(x);
    let loss = f(&tape, input)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(TensorError::NonFinite { index: 0, value });
    }
    tape.backward(loss)?;
    let analytic = input
        .grad()
        .expect("param has grad after backward")
        .into_data();
    compare_with_finite_differences(
        &analytic,
        |probe| {
            let tape = Tape::new();
            let v = tape.constant(probe);
            Ok(f(&tape, v)?.item())
        },
        x,
        eps,
    )
}

/// Compares a supplied analytic gradient with central differences of `f`.
pub fn compare_with_finite_differences<F>(
    analytic: &[f64],
    mut f: F,
    x: &Tensor,
    eps: f64,
) -> Result<GradCheckOutcome, TensorError>
where
    F: FnMut(&Tensor) -> Result<f64, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::invalid("grad_check", "eps must be positive"));
    }
    if analytic.len() != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "grad_check",
            lhs: vec![analytic.len()],
            rhs: x.shape().to_vec(),
        });
    }
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        for v in [up, down] {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { index: i, value: v });
            }
        }
        numeric.push((up - down) / (2.0 * eps));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| if e > best.1 { (i, e) } else { best },
        );
    Ok(GradCheckOutcome {
        max_rel_error,
        worst_index,
        analytic: analytic.to_vec(),
        numeric,
    })
}
