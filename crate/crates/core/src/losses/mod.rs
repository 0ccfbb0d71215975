//! Adversarial objectives and the weighted total the optimiser descends.
//!
//! Four terms are combined:
//!
//! | term      | drives                                             | weight sign |
//! |-----------|----------------------------------------------------|-------------|
//! | projector | condition tokens away from the clean tokens        | ≤ 0         |
//! | attention | low-variance attention rows toward one-hot rows    | ≥ 0         |
//! | detector  | confident P-Net cells toward "no face"             | ≥ 0         |
//! | identity  | the identity embedding away from the clean one     | ≤ 0         |
//!
//! The projector and identity terms are already written so that smaller
//! means more divergent, and the weight sign only labels a term as a
//! divergence term. The optimiser therefore descends `Σ |λ_i| · L_i`
//! ([`descent_objective`]), while [`loss_total`] reports the signed sum.

mod attention;
mod detector;
mod identity;
mod projector;

pub use attention::{
    attention_variance, build_var_mask, loss_attn, nearest_rank_quantile, sigma_max,
    AttentionAttack,
};
pub use detector::{
    bilinear_resize_path, build_prob_mask, loss_mtcnn, robust_resize, scaled_side, select_scales,
    DetectorAttack, DetectorLoss, ResizePath,
};
pub use identity::{cosine_loss, identity_term, loss_id};
pub use projector::{divergence, loss_proj};

use serde::{Deserialize, Serialize};

use crate::models::ModelBundle;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Term weights. The projector and identity weights must be non-positive,
/// the attention and detector weights non-negative, and at least one nonzero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub proj: f64,
    pub attn: f64,
    pub mtcnn: f64,
    pub id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            proj: -1.0,
            attn: 1.0,
            mtcnn: 1.0,
            id: -1.0,
        }
    }
}

impl LossWeights {
    pub fn new(proj: f64, attn: f64, mtcnn: f64, id: f64) -> Result<Self> {
        let w = LossWeights {
            proj,
            attn,
            mtcnn,
            id,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.proj, self.attn, self.mtcnn, self.id];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite: {self:?}"
            )));
        }
        if self.proj > 0.0 || self.id > 0.0 || self.attn < 0.0 || self.mtcnn < 0.0 {
            return Err(Error::Config(format!(
                "loss weight signs violated (proj <= 0, attn >= 0, mtcnn >= 0, id <= 0): {self:?}"
            )));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.proj, self.attn, self.mtcnn, self.id]
    }
}

/// `λ · components` for components ordered `(proj, attn, mtcnn, id)`.
pub fn loss_total(weights: &LossWeights, components: [f64; 4]) -> f64 {
    weights
        .as_array()
        .iter()
        .zip(components)
        .map(|(w, c)| w * c)
        .sum()
}

/// `Σ |λ_i| · L_i`: the value the optimiser descends.
pub fn descent_objective(weights: &LossWeights, components: [f64; 4]) -> f64 {
    weights
        .as_array()
        .iter()
        .zip(components)
        .map(|(w, c)| w.abs() * c)
        .sum()
}

/// Hyper-parameters of the objective, independent of the optimiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub t_var: f64,
    pub t_prob: f64,
    pub beta: f64,
    /// Pyramid factor between consecutive detector scales.
    pub k: f64,
    pub d_cell: f64,
    pub d_min: f64,
    /// Face landmark box size in pixels; a quarter of the image height when unset.
    pub d_land: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            t_var: 0.5,
            t_prob: 0.6,
            beta: 0.3,
            k: 0.709,
            d_cell: 12.0,
            d_min: 12.0,
            d_land: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        unit("t_var", self.t_var)?;
        unit("t_prob", self.t_prob)?;
        unit("beta", self.beta)?;
        unit("k", self.k)?;
        if self.t_prob - self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "t_prob - beta must be positive, got {}",
                self.t_prob - self.beta
            )));
        }
        Ok(())
    }

    pub fn scales_for(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        let d_land = self.d_land.unwrap_or(h as f64 / 4.0);
        select_scales(d_land, self.d_cell, self.d_min, h.min(w) as f64, self.k)
    }
}

/// Per-term values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub proj: f64,
    pub attn: f64,
    pub mtcnn: f64,
    pub id: f64,
    /// Signed weighted sum.
    pub total: f64,
    /// Descended value, `Σ |λ_i| · L_i`.
    pub objective: f64,
    /// Detector cells above the probability threshold, over all scales and paths.
    pub active_cells: usize,
}

impl LossValues {
    pub fn components(&self) -> [f64; 4] {
        [self.proj, self.attn, self.mtcnn, self.id]
    }

    pub fn all_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Loss terms as tape variables.
pub struct LossTerms<'t> {
    pub proj: Var<'t>,
    pub attn: Var<'t>,
    pub mtcnn: Var<'t>,
    pub id: Var<'t>,
    pub total: Var<'t>,
    pub objective: Var<'t>,
    pub active_cells: usize,
}

impl LossTerms<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            proj: self.proj.item(),
            attn: self.attn.item(),
            mtcnn: self.mtcnn.item(),
            id: self.id.item(),
            total: self.total.item(),
            objective: self.objective.item(),
            active_cells: self.active_cells,
        }
    }
}

/// The full objective for one clean image. Everything derived from the clean
/// image (tokens, embedding, attention query and mask, detector scales) is
/// fixed at construction.
#[derive(Clone, Debug)]
pub struct Objective {
    pub weights: LossWeights,
    pub attention: AttentionAttack,
    pub detector: DetectorAttack,
    clean_tokens: Tensor,
    clean_embedding: Tensor,
    warnings: Vec<String>,
}

impl Objective {
    pub fn prepare(bundle: &ModelBundle, x: &Tensor, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let (_, h, w) = x.chw()?;
        let mut attention = AttentionAttack::new(bundle.projector.seq, cfg.t_var)?;
        attention.precompute(bundle, x)?;
        let scales = cfg.scales_for(h, w)?;
        let mut warnings = Vec::new();
        if scales.is_empty() {
            warnings.push(format!(
                "no detector scale satisfies the size constraints for a {h}x{w} image; detector loss is zero"
            ));
        }
        let detector = DetectorAttack::new(scales, cfg.t_prob, cfg.beta)?;
        let tape = Tape::new();
        let xv = tape.constant(x);
        let clean_tokens = bundle.project_condition(&tape, xv)?.value();
        let clean_embedding = bundle.embed_identity(&tape, xv)?.value();
        Ok(Objective {
            weights: cfg.weights,
            attention,
            detector,
            clean_tokens,
            clean_embedding,
            warnings,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn clean_tokens(&self) -> &Tensor {
        &self.clean_tokens
    }

    pub fn clean_embedding(&self) -> &Tensor {
        &self.clean_embedding
    }

    /// Builds all four terms and their weighted total for `x_adv` on `tape`.
    pub fn terms<'t>(
        &self,
        tape: &'t Tape,
        bundle: &ModelBundle,
        x_adv: Var<'t>,
    ) -> Result<LossTerms<'t>> {
        let tokens = bundle.project_condition(tape, x_adv)?;
        let proj = divergence(tape, tokens, &self.clean_tokens)?;
        let attn = self.attention.loss_from_tokens(tape, bundle, tokens)?;
        let det = self.detector.loss(tape, bundle, x_adv)?;
        let emb = bundle.embed_identity(tape, x_adv)?;
        let id = identity_term(tape, emb, &self.clean_embedding)?;
        let weighted = |w: [f64; 4]| -> Result<Var<'t>> {
            Ok(proj
                .scale(w[0])
                .add(&attn.scale(w[1]))?
                .add(&det.loss.scale(w[2]))?
                .add(&id.scale(w[3]))?)
        };
        let w = self.weights.as_array();
        let total = weighted(w)?;
        let objective = weighted(w.map(f64::abs))?;
        Ok(LossTerms {
            proj,
            attn,
            mtcnn: det.loss,
            id,
            total,
            objective,
            active_cells: det.active_cells,
        })
    }

    pub fn values(&self, bundle: &ModelBundle, x: &Tensor, delta: &Tensor) -> Result<LossValues> {
        let tape = Tape::new();
        let x_adv = tape.constant(x).add(&tape.constant(delta))?;
        Ok(self.terms(&tape, bundle, x_adv)?.values())
    }

    /// Loss values and the gradient of the descended objective with respect to `δ`.
    pub fn value_and_grad(
        &self,
        bundle: &ModelBundle,
        x: &Tensor,
        delta: &Tensor,
    ) -> Result<(LossValues, Tensor)> {
        let tape = Tape::new();
        let d = tape.param(delta);
        let x_adv = tape.constant(x).add(&d)?;
        let terms = self.terms(&tape, bundle, x_adv)?;
        let values = terms.values();
        tape.backward(terms.objective)?;
        let grad = d.grad().unwrap_or_else(|| Tensor::zeros(delta.shape()));
        Ok((values, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_signs() {
        assert!(LossWeights::new(-1.0, 1.0, 1.0, -1.0).is_ok());
        assert!(LossWeights::new(1.0, 1.0, 1.0, -1.0).is_err());
        assert!(LossWeights::new(-1.0, -1.0, 1.0, -1.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 2.0, 0.0).is_ok());
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::new(0.0, 0.0, 2.0, 0.0).unwrap();
        assert_eq!(loss_total(&w, [5.0, 6.0, 7.0, 8.0]), 14.0);
        let w = LossWeights::default();
        assert_eq!(loss_total(&w, [1.0, 2.0, 3.0, 4.0]), -1.0 + 2.0 + 3.0 - 4.0);
        assert_eq!(
            descent_objective(&w, [-1.0, 2.0, 3.0, -0.5]),
            -1.0 + 2.0 + 3.0 - 0.5
        );
    }

    #[test]
    fn default_scales_for_64() {
        let scales = LossConfig::default().scales_for(64, 64).unwrap();
        let sides: Vec<usize> = scales.iter().map(|&s| scaled_side(64, s)).collect();
        assert_eq!(sides, vec![45, 32, 22, 16]);
    }

    #[test]
    fn zero_perturbation_terms() {
        let bundle = crate::models::init_models(5);
        let x = Tensor::from_fn(&[3, 32, 32], |i| ((i * 37) % 101) as f64 / 101.0);
        let obj = Objective::prepare(&bundle, &x, &LossConfig::default()).unwrap();
        let v = obj
            .values(&bundle, &x, &Tensor::zeros(&[3, 32, 32]))
            .unwrap();
        assert_eq!(v.proj, 0.0);
        assert!(v.id.abs() < 1e-12);
        assert!(v.attn >= 0.0 && v.mtcnn >= 0.0);
    }
}
