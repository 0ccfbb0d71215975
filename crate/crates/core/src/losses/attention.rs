//! Attention-variance disruption.
//!
//! Low-variance query positions of the clean image's attention map are
//! selected once; the loss then drives the perturbed image's variance at
//! those positions toward the largest variance a probability row can have.

use crate::models::ModelBundle;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Largest variance of a probability vector of length `seq`, attained by a one-hot row.
pub fn sigma_max(seq: usize) -> Result<f64> {
    if seq == 0 {
        return Err(Error::InvalidArgument("sigma_max: seq must be >= 1".into()));
    }
    let n = seq as f64;
    Ok(((1.0 - 1.0 / n).powi(2) + (n - 1.0) / (n * n)) / n)
}

/// Population variance over the token axis: `[h, res, seq]` → `[h, res]`.
pub fn attention_variance<'t>(a_map: Var<'t>) -> Result<Var<'t>, TensorError> {
    match a_map.shape().len() {
        3 => a_map.variance(2),
        r => Err(TensorError::InvalidAxis { axis: 2, rank: r }),
    }
}

/// Lower nearest-rank quantile: the `ceil(t * n)`-th smallest value.
pub fn nearest_rank_quantile(values: &[f64], t: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((t * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// `1` where `a_var <= quantile(a_var, t_var)`, else `0`.
pub fn build_var_mask(a_var: &Tensor, t_var: f64) -> Result<Tensor> {
    if !(t_var > 0.0 && t_var < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "t_var must lie in (0, 1), got {t_var}"
        )));
    }
    let threshold = nearest_rank_quantile(a_var.data(), t_var);
    Ok(a_var.map(|v| if v <= threshold { 1.0 } else { 0.0 }))
}

/// Attention-attack state. The query embedding and mask come from the clean
/// image and stay fixed for the whole optimisation.
#[derive(Clone, Debug)]
pub struct AttentionAttack {
    pub t_var: f64,
    pub sigma_max: f64,
    query: Option<Tensor>,
    mask: Option<Tensor>,
}

impl AttentionAttack {
    pub fn new(seq: usize, t_var: f64) -> Result<Self> {
        if !(t_var > 0.0 && t_var < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "t_var must lie in (0, 1), got {t_var}"
            )));
        }
        Ok(AttentionAttack {
            t_var,
            sigma_max: sigma_max(seq)?,
            query: None,
            mask: None,
        })
    }

    /// Computes `Q_x`, the clean attention variance and the low-variance mask.
    pub fn precompute(&mut self, bundle: &ModelBundle, x: &Tensor) -> Result<()> {
        let tape = Tape::new();
        let xv = tape.constant(x);
        let query = bundle.attention.query(&tape, xv)?;
        let tokens = bundle.project_condition(&tape, xv)?;
        let a_map = bundle.attention.attention_map(&tape, query, tokens)?;
        let a_var = attention_variance(a_map)?.value();
        self.mask = Some(build_var_mask(&a_var, self.t_var)?);
        self.query = Some(query.value());
        Ok(())
    }

    pub fn with_mask(mut self, query: Tensor, mask: Tensor) -> Self {
        self.query = Some(query);
        self.mask = Some(mask);
        self
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn query(&self) -> Option<&Tensor> {
        self.query.as_ref()
    }

    /// `A_var'` of the perturbed condition, `[h, res]`.
    pub fn perturbed_variance<'t>(
        &self,
        tape: &'t Tape,
        bundle: &ModelBundle,
        tokens: Var<'t>,
    ) -> Result<Var<'t>> {
        let query = self.query.as_ref().ok_or(Error::MaskNotPrecomputed)?;
        let a_map = bundle
            .attention
            .attention_map(tape, tape.constant(query), tokens)?;
        Ok(attention_variance(a_map)?)
    }

    /// `|| (sigma_max - A_var') ⊙ M_var ||²` given perturbed condition tokens.
    pub fn loss_from_tokens<'t>(
        &self,
        tape: &'t Tape,
        bundle: &ModelBundle,
        tokens: Var<'t>,
    ) -> Result<Var<'t>> {
        let mask = self.mask.as_ref().ok_or(Error::MaskNotPrecomputed)?;
        let a_var = self.perturbed_variance(tape, bundle, tokens)?;
        self.loss_from_variance(tape, a_var, mask)
    }

    pub(crate) fn loss_from_variance<'t>(
        &self,
        tape: &'t Tape,
        a_var: Var<'t>,
        mask: &Tensor,
    ) -> Result<Var<'t>> {
        let gap = a_var.neg().add_scalar(self.sigma_max);
        Ok(gap.mul(&tape.constant(mask))?.square().sum())
    }

    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        bundle: &ModelBundle,
        x_adv: Var<'t>,
    ) -> Result<Var<'t>> {
        if self.mask.is_none() {
            return Err(Error::MaskNotPrecomputed);
        }
        let tokens = bundle.project_condition(tape, x_adv)?;
        self.loss_from_tokens(tape, bundle, tokens)
    }

    /// Mean of `A_var'` over masked positions, as a plain value.
    pub fn masked_mean_variance(&self, bundle: &ModelBundle, x_adv: &Tensor) -> Result<f64> {
        let mask = self.mask.as_ref().ok_or(Error::MaskNotPrecomputed)?;
        let tape = Tape::new();
        let tokens = bundle.project_condition(&tape, tape.constant(x_adv))?;
        let a_var = self.perturbed_variance(&tape, bundle, tokens)?.value();
        let count = mask.sum();
        let total: f64 = a_var
            .data()
            .iter()
            .zip(mask.data())
            .map(|(v, m)| v * m)
            .sum();
        Ok(if count > 0.0 { total / count } else { 0.0 })
    }
}

/// Attention loss of `x + δ` as a plain value.
pub fn loss_attn(
    state: &AttentionAttack,
    bundle: &ModelBundle,
    x: &Tensor,
    delta: &Tensor,
) -> Result<f64> {
    let tape = Tape::new();
    let x_adv = tape.constant(x).add(&tape.constant(delta))?;
    Ok(state.loss(&tape, bundle, x_adv)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_max_values() {
        assert_eq!(sigma_max(1).unwrap(), 0.0);
        assert!((sigma_max(2).unwrap() - 0.25).abs() < 1e-15);
        assert!((sigma_max(4).unwrap() - 0.1875).abs() < 1e-15);
        assert!(sigma_max(0).is_err());
    }

    #[test]
    fn var_mask_examples() {
        let constant = Tensor::full(&[1, 6], 0.3);
        assert_eq!(build_var_mask(&constant, 0.25).unwrap().sum(), 6.0);
        let distinct = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            build_var_mask(&distinct, 0.5).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0]
        );
        assert!(build_var_mask(&distinct, 1.0).is_err());
    }

    #[test]
    fn uniform_and_one_hot_variance() {
        let tape = Tape::new();
        let uniform = tape.constant(&Tensor::full(&[1, 2, 4], 0.25));
        let v = attention_variance(uniform).unwrap().value();
        assert!(v.data().iter().all(|&x| x == 0.0));
        let mut hot = Tensor::zeros(&[1, 2, 4]);
        hot.data_mut()[1] = 1.0;
        hot.data_mut()[7] = 1.0;
        let v = attention_variance(tape.constant(&hot)).unwrap().value();
        for x in v.data() {
            assert!((x - sigma_max(4).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_requires_precomputed_mask() {
        let bundle = crate::models::init_models(1);
        let state = AttentionAttack::new(4, 0.5).unwrap();
        let x = Tensor::full(&[3, 32, 32], 0.5);
        assert!(matches!(
            loss_attn(&state, &bundle, &x, &Tensor::zeros(&[3, 32, 32])),
            Err(Error::MaskNotPrecomputed)
        ));
    }
}
