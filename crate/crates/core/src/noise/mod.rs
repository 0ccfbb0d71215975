//! Sign-gradient PGD with edge-masked smoothing and low-pass projection.
//!
//! One step of [`protect`]:
//!
//! 1. evaluate the objective and its gradient at `x + δ`
//! 2. `δ ← clip(δ − γ · sign(∇), −η, η)`, then keep `x + δ` inside `[0, 1]`
//! 3. optionally blend a Gaussian-blurred copy of `δ` in along Sobel edges
//! 4. optionally project `δ` onto the low-frequency DCT band
//! 5. re-project onto the budget and image range
//!
//! The attention mask and the clean-image references are fixed before the
//! first step; the detector masks are rebuilt at every evaluation.

mod codec;
mod refine;

pub use codec::{dct_patchify, dct_unpatchify, PerturbationCodec};
pub use refine::{gaussian_blur_refine, gaussian_kernel, sobel_magnitude, sobel_mask};

use crate::losses::{LossConfig, LossValues, Objective};
use crate::metrics::frequency_rate;
use crate::models::ModelBundle;
use crate::synth::uniform_noise;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BlurConfig {
    pub enabled: bool,
    /// Relative Sobel threshold.
    pub tau: f64,
    /// Side of the square structuring element used to thicken the edge mask.
    pub dilation: usize,
    pub kernel: usize,
    pub sigma: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig {
            enabled: true,
            tau: 0.25,
            dilation: 9,
            kernel: 5,
            sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowpassConfig {
    pub enabled: bool,
    pub patch: usize,
    pub threshold: u16,
}

impl Default for LowpassConfig {
    fn default() -> Self {
        LowpassConfig {
            enabled: true,
            patch: 8,
            threshold: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// ℓ∞ budget.
    pub eta: f64,
    /// Step size.
    pub gamma: f64,
    pub steps: usize,
    /// Half-width of the uniform random start as a fraction of `eta`; zero starts at `δ = 0`.
    pub random_start: f64,
    /// Seed for the random start.
    pub seed: u64,
    pub blur: BlurConfig,
    pub lowpass: LowpassConfig,
    pub loss: LossConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eta: 12.0 / 255.0,
            gamma: 1.0 / 255.0,
            steps: 30,
            random_start: 0.02,
            seed: 0,
            blur: BlurConfig::default(),
            lowpass: LowpassConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= self.eta) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, eta], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.random_start) {
            return Err(Error::Config(format!(
                "random_start must lie in [0, 1], got {}",
                self.random_start
            )));
        }
        let b = &self.blur;
        if b.kernel.is_multiple_of(2) || b.dilation.is_multiple_of(2) {
            return Err(Error::Config(
                "blur kernel and dilation sizes must be odd".into(),
            ));
        }
        // negated so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(b.sigma > 0.0) || !(b.tau >= 0.0 && b.tau < 1.0) {
            return Err(Error::Config(format!(
                "blur sigma must be positive and tau in [0, 1), got {} and {}",
                b.sigma, b.tau
            )));
        }
        PerturbationCodec::new(self.lowpass.patch, self.lowpass.threshold)?;
        self.loss.validate()
    }
}

/// Clamps `δ` to `[−η, η]` and then so that `x + δ` lies in `[0, 1]`,
/// nudging by one ulp where rounding would leave the sum just outside.
pub fn project(delta: &mut Tensor, x: &Tensor, eta: f64) {
    for (d, &xv) in delta.data_mut().iter_mut().zip(x.data()) {
        let mut v = d.clamp(-eta, eta).clamp(-xv, 1.0 - xv);
        while xv + v > 1.0 {
            v = v.next_down();
        }
        while xv + v < 0.0 {
            v = v.next_up();
        }
        *d = v;
    }
}

/// `clip(δ − γ · sign(grad), −η, η)` followed by the image-range clamp.
pub fn pgd_step(delta: &Tensor, grad: &Tensor, x: &Tensor, eta: f64, gamma: f64) -> Result<Tensor> {
    if delta.shape() != grad.shape() || delta.shape() != x.shape() {
        return Err(crate::TensorError::ShapeMismatch {
            op: "pgd_step",
            lhs: delta.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        }
        .into());
    }
    if let Some((index, &value)) = grad.data().iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(crate::TensorError::NonFinite { index, value }.into());
    }
    let mut next = delta.zip_map(grad, |d, g| {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        d - gamma * s
    })?;
    project(&mut next, x, eta);
    Ok(next)
}

/// One row of the optimisation trace. Loss values are measured at the
/// perturbation produced by this step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: usize,
    pub losses: LossValues,
    pub linf: f64,
    /// Frequency rate of `δ`; infinite when no energy remains outside the low band.
    pub fr: f64,
    /// Largest coordinate change made by the final re-projection.
    pub reproj: f64,
}

impl StepRecord {
    pub const CSV_HEADER: [&'static str; 11] = [
        "step",
        "loss_proj",
        "loss_attn",
        "loss_mtcnn",
        "loss_id",
        "loss_total",
        "objective",
        "active_cells",
        "linf",
        "fr",
        "reproj",
    ];
}

#[derive(Clone, Debug)]
pub struct ProtectReport {
    /// Losses at the starting perturbation.
    pub initial: LossValues,
    pub trace: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

impl ProtectReport {
    /// Losses of the returned image.
    pub fn final_losses(&self) -> LossValues {
        self.trace.last().map_or(self.initial, |r| r.losses)
    }
}

#[derive(Clone, Debug)]
pub struct Protected {
    pub image: Tensor,
    pub delta: Tensor,
    pub report: ProtectReport,
}

/// Runs the attack; see the module docs for the step order.
pub fn protect(x: &Tensor, bundle: &ModelBundle, cfg: &AttackConfig) -> Result<Protected> {
    protect_observed(x, bundle, cfg, |_, _| {})
}

/// As [`protect`], calling `observe` with each trace row and the
/// perturbation it describes as soon as the row is final. Rows already
/// observed survive a later numeric failure.
pub fn protect_observed(
    x: &Tensor,
    bundle: &ModelBundle,
    cfg: &AttackConfig,
    mut observe: impl FnMut(&StepRecord, &Tensor),
) -> Result<Protected> {
    cfg.validate()?;
    let (c, _, _) = x.chw()?;
    if c != 3 || x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "protect expects a 3-channel image with values in [0, 1]".into(),
        ));
    }
    let objective = Objective::prepare(bundle, x, &cfg.loss)?;
    let codec = PerturbationCodec::new(cfg.lowpass.patch, cfg.lowpass.threshold)?;
    let mut delta = if cfg.random_start > 0.0 && cfg.steps > 0 {
        uniform_noise(cfg.seed, x.shape(), cfg.random_start * cfg.eta)
    } else {
        Tensor::zeros(x.shape())
    };
    project(&mut delta, x, cfg.eta);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut initial = None;

    let check = |step: usize, v: &LossValues| -> Result<()> {
        if v.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step,
                what: "loss".into(),
            })
        }
    };

    for step in 1..=cfg.steps {
        let (values, grad) = objective.value_and_grad(bundle, x, &delta)?;
        check(step - 1, &values)?;
        if !grad.all_finite() {
            return Err(Error::NonFinite {
                step,
                what: "gradient".into(),
            });
        }
        match trace.last_mut() {
            None => initial = Some(values),
            Some(prev) => {
                let prev: &mut StepRecord = prev;
                prev.losses = values;
                observe(prev, &delta);
            }
        }

        delta = pgd_step(&delta, &grad, x, cfg.eta, cfg.gamma)?;
        if cfg.blur.enabled {
            let mask = sobel_mask(&delta, cfg.blur.tau, cfg.blur.dilation)?;
            delta = gaussian_blur_refine(&delta, &mask, cfg.blur.kernel, cfg.blur.sigma)?;
        }
        if cfg.lowpass.enabled {
            delta = codec.low_pass_filter(&delta)?;
        }
        let before = delta.clone();
        project(&mut delta, x, cfg.eta);
        let reproj = before.sub(&delta)?.max_abs();
        trace.push(StepRecord {
            step,
            losses: LossValues::default(),
            linf: delta.max_abs(),
            fr: frequency_rate(&delta, &codec)?,
            reproj,
        });
    }

    let last = objective.values(bundle, x, &delta)?;
    check(cfg.steps, &last)?;
    match trace.last_mut() {
        None => initial = Some(last),
        Some(rec) => {
            rec.losses = last;
            observe(rec, &delta);
        }
    }

    let image = x.add(&delta)?;
    Ok(Protected {
        image,
        delta,
        report: ProtectReport {
            initial: initial.expect("set on the first evaluation"),
            trace,
            warnings: objective.warnings().to_vec(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_step_and_zero_gradient() {
        let x = Tensor::full(&[3, 4, 4], 0.5);
        let d = Tensor::zeros(&[3, 4, 4]);
        let g = Tensor::full(&[3, 4, 4], 1.0);
        let out = pgd_step(&d, &g, &x, 12.0 / 255.0, 1.0 / 255.0).unwrap();
        assert!(out.data().iter().all(|&v| v == -1.0 / 255.0));
        let same = pgd_step(
            &out,
            &Tensor::zeros(&[3, 4, 4]),
            &x,
            12.0 / 255.0,
            1.0 / 255.0,
        )
        .unwrap();
        assert_eq!(same, out);
    }

    #[test]
    fn image_range_clamp() {
        let x = Tensor::new(vec![3, 1, 1], vec![0.0, 1.0, 0.999]).unwrap();
        let d = Tensor::zeros(&[3, 1, 1]);
        let g = Tensor::new(vec![3, 1, 1], vec![1.0, -1.0, -1.0]).unwrap();
        let out = pgd_step(&d, &g, &x, 0.05, 0.01).unwrap();
        for (xv, dv) in x.data().iter().zip(out.data()) {
            let y = xv + dv;
            assert!((0.0..=1.0).contains(&y));
        }
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let x = Tensor::full(&[3, 2, 2], 0.5);
        let mut g = Tensor::zeros(&[3, 2, 2]);
        g.data_mut()[5] = f64::NAN;
        let err = pgd_step(&Tensor::zeros(&[3, 2, 2]), &g, &x, 0.1, 0.01).unwrap_err();
        assert!(matches!(
            err,
            Error::Tensor(crate::TensorError::NonFinite { index: 5, .. })
        ));
    }

    #[test]
    fn zero_steps_is_identity() {
        let bundle = crate::models::init_models(1);
        let x = Tensor::from_fn(&[3, 32, 32], |i| ((i * 7) % 255) as f64 / 255.0);
        let cfg = AttackConfig {
            steps: 0,
            ..AttackConfig::default()
        };
        let out = protect(&x, &bundle, &cfg).unwrap();
        assert_eq!(out.image, x);
        assert!(out.report.trace.is_empty());
    }
}
