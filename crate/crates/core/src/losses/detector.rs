//! Multi-scale attack on the proposal network.

use crate::models::ModelBundle;
use crate::tensor::{ResizeMode, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Pyramid scales `s_i = (d_cell / d_min) * k^(i-1)`, `i >= 1`, that satisfy
/// `s_i * d_land <= d_cell` and `s_i * d_adv >= d_min`, in decreasing order.
pub fn select_scales(d_land: f64, d_cell: f64, d_min: f64, d_adv: f64, k: f64) -> Result<Vec<f64>> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "scale factor k must lie in (0, 1), got {k}"
        )));
    }
    if !(d_land >= 1.0 && d_adv >= 1.0 && d_cell > 0.0 && d_min > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid sizes d_land={d_land} d_cell={d_cell} d_min={d_min} d_adv={d_adv}"
        )));
    }
    let mut scales = Vec::new();
    let mut s = d_cell / d_min;
    while s * d_adv >= d_min {
        if s * d_land <= d_cell {
            scales.push(s);
        }
        s *= k;
    }
    Ok(scales)
}

/// `floor(s * side)`, tolerant of products that land a rounding error below an integer.
pub fn scaled_side(side: usize, s: f64) -> usize {
    (s * side as f64 + 1e-9).floor() as usize
}

fn scaled_hw(x: &Var<'_>, s: f64) -> Result<(usize, usize), TensorError> {
    let (h, w) = match x.shape()[..] {
        [_, h, w] => (h, w),
        ref sh => {
            return Err(TensorError::invalid(
                "resize",
                format!("expected [c, h, w], got {sh:?}"),
            ))
        }
    };
    let (th, tw) = (scaled_side(h, s), scaled_side(w, s));
    if th == 0 || tw == 0 {
        return Err(TensorError::invalid(
            "robust_resize",
            format!("scale {s} maps {h}x{w} to an empty image"),
        ));
    }
    Ok((th, tw))
}

/// Nearest upscaling to `(h * ⌊s·h⌋, w * ⌊s·w⌋)` followed by `h×w` average
/// pooling, evaluated as exact footprint averaging. Integer downscale factors
/// go through `pool_avg` directly.
pub fn robust_resize<'t>(x: Var<'t>, s: f64) -> Result<Var<'t>, TensorError> {
    let (th, tw) = scaled_hw(&x, s)?;
    let shape = x.shape();
    let (h, w) = (shape[1], shape[2]);
    if h % th == 0 && w % tw == 0 {
        let k = (h / th, w / tw);
        return x.pool_avg(k, k);
    }
    x.resize((th, tw), ResizeMode::Area)
}

/// Direct bilinear scaling to `(⌊s·h⌋, ⌊s·w⌋)`.
pub fn bilinear_resize_path<'t>(x: Var<'t>, s: f64) -> Result<Var<'t>, TensorError> {
    let target = scaled_hw(&x, s)?;
    x.resize(target, ResizeMode::Bilinear)
}

/// `1` where `p_t > t_prob` (strict), else `0`.
pub fn build_prob_mask(p_t: &Tensor, t_prob: f64) -> Tensor {
    p_t.map(|v| if v > t_prob { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizePath {
    Area,
    Bilinear,
}

impl ResizePath {
    pub const BOTH: [ResizePath; 2] = [ResizePath::Area, ResizePath::Bilinear];

    pub fn apply<'t>(self, x: Var<'t>, s: f64) -> Result<Var<'t>, TensorError> {
        match self {
            ResizePath::Area => robust_resize(x, s),
            ResizePath::Bilinear => bilinear_resize_path(x, s),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectorAttack {
    pub scales: Vec<f64>,
    pub t_prob: f64,
    pub beta: f64,
}

/// Detector loss plus bookkeeping for reports.
pub struct DetectorLoss<'t> {
    pub loss: Var<'t>,
    /// Masked cells summed over scales and resize paths.
    pub active_cells: usize,
    /// Set when no scale satisfies the constraints; `loss` is then zero.
    pub no_scales: bool,
}

impl DetectorAttack {
    pub fn new(scales: Vec<f64>, t_prob: f64, beta: f64) -> Result<Self> {
        if !(t_prob > 0.0 && t_prob < 1.0) || !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "t_prob and beta must lie in (0, 1), got {t_prob}, {beta}"
            )));
        }
        if t_prob - beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "t_prob - beta must be positive, got {}",
                t_prob - beta
            )));
        }
        Ok(DetectorAttack {
            scales,
            t_prob,
            beta,
        })
    }

    /// Target `(P_F, P_T)`: non-face probability up, face probability down.
    pub fn p_gt(&self) -> (f64, f64) {
        (self.t_prob + self.beta, self.t_prob - self.beta)
    }

    /// Masked squared error against `p_gt` for one detector output `[2, h', w']`.
    pub fn cell_loss<'t>(&self, tape: &'t Tape, probs: Var<'t>) -> Result<(Var<'t>, usize)> {
        let shape = probs.shape();
        let cells = shape[1] * shape[2];
        let values = probs.value();
        let p_t = &values.data()[cells..];
        let mask_t = build_prob_mask(&Tensor::new(vec![cells], p_t.to_vec())?, self.t_prob);
        let active = mask_t.sum() as usize;
        let (pf, pt) = self.p_gt();
        let target = Tensor::from_fn(&shape, |i| if i < cells { pf } else { pt });
        let mask = Tensor::from_fn(&shape, |i| mask_t.data()[i % cells]);
        let diff = probs.sub(&tape.constant(&target))?;
        Ok((diff.mul(&tape.constant(&mask))?.square().sum(), active))
    }

    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        bundle: &ModelBundle,
        x_adv: Var<'t>,
    ) -> Result<DetectorLoss<'t>> {
        let mut total = tape.scalar(0.0);
        let mut active_cells = 0;
        let shape = x_adv.shape();
        for &s in &self.scales {
            // at full size both paths are the identity, so one forward pass serves both
            let identity =
                scaled_side(shape[1], s) == shape[1] && scaled_side(shape[2], s) == shape[2];
            let mut shared = None;
            for path in ResizePath::BOTH {
                let (term, active) = match shared {
                    Some(done) => done,
                    None => {
                        let probs = bundle.pnet.forward(tape, path.apply(x_adv, s)?)?;
                        self.cell_loss(tape, probs)?
                    }
                };
                if identity {
                    shared = Some((term, active));
                }
                total = total.add(&term)?;
                active_cells += active;
            }
        }
        Ok(DetectorLoss {
            loss: total,
            active_cells,
            no_scales: self.scales.is_empty(),
        })
    }

    /// Face probabilities of every cell at every scale and path, in loop order.
    pub fn face_probabilities(&self, bundle: &ModelBundle, x: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let xv = tape.constant(x);
        let mut out = Vec::new();
        for &s in &self.scales {
            for path in ResizePath::BOTH {
                let (_, p_t) = bundle.pnet_forward(&tape, path.apply(xv, s)?)?;
                out.extend_from_slice(p_t.value().data());
            }
        }
        Ok(out)
    }
}

/// Detector loss of `x + δ` as a plain value, with the active-cell count.
pub fn loss_mtcnn(
    state: &DetectorAttack,
    bundle: &ModelBundle,
    x: &Tensor,
    delta: &Tensor,
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let x_adv = tape.constant(x).add(&tape.constant(delta))?;
    let out = state.loss(&tape, bundle, x_adv)?;
    Ok((out.loss.item(), out.active_cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prob_mask_is_strict() {
        let p = Tensor::new(vec![3], vec![0.7, 0.6, 0.61]).unwrap();
        assert_eq!(build_prob_mask(&p, 0.6).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn scale_selection_edges() {
        // landmark box too large for every scale
        assert!(select_scales(100.0, 12.0, 12.0, 64.0, 0.709)
            .unwrap()
            .iter()
            .all(|s| s * 100.0 <= 12.0));
        assert_eq!(
            select_scales(12.0, 12.0, 12.0, 12.0, 0.709).unwrap(),
            vec![1.0]
        );
        assert!(select_scales(12.0, 12.0, 12.0, 64.0, 1.0).is_err());
        assert!(select_scales(12.0, 12.0, 12.0, 64.0, 0.0).is_err());
    }

    #[test]
    fn single_cell_mse() {
        let tape = Tape::new();
        let state = DetectorAttack::new(vec![], 0.6, 0.2).unwrap();
        let probs = tape.constant(&Tensor::new(vec![2, 1, 1], vec![0.3, 0.7]).unwrap());
        let (loss, active) = state.cell_loss(&tape, probs).unwrap();
        assert_eq!(active, 1);
        assert!((loss.item() - 0.34).abs() < 1e-12);

        let (pf, pt) = state.p_gt();
        let exact = tape.constant(&Tensor::new(vec![2, 1, 1], vec![pf, pt]).unwrap());
        // p_gt's face probability is below t_prob, so that cell is masked off anyway
        assert_eq!(state.cell_loss(&tape, exact).unwrap().0.item(), 0.0);
    }

    #[test]
    fn empty_scales_flag() {
        let bundle = crate::models::init_models(2);
        let state = DetectorAttack::new(vec![], 0.6, 0.3).unwrap();
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[3, 32, 32], 0.4));
        let out = state.loss(&tape, &bundle, x).unwrap();
        assert!(out.no_scales);
        assert_eq!(out.loss.item(), 0.0);
    }
}
