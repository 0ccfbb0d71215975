//! Image-quality and attack-efficacy metrics.

use serde::Serialize;

use crate::models::ModelBundle;
use crate::noise::PerturbationCodec;
use crate::tensor::{Tensor, TensorError};
use crate::Result;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 80.0;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    s / a.len() as f64
}

/// Root-mean-square difference.
pub fn l2_dist(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    same_shape("l2_dist", a, b)?;
    Ok(mse(a, b).sqrt())
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    same_shape("psnr", a, b)?;
    let m = mse(a, b);
    Ok(if m < 1e-8 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

/// Mean SSIM over every 8×8 window (stride 1) of every channel, with
/// population statistics.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    same_shape("ssim", a, b)?;
    let (c, h, w) = a.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TensorError::invalid(
            "ssim",
            format!("image sides must be at least {SSIM_WINDOW}, got {h}x{w}"),
        ));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    let row = (y + dy) * w + x;
                    for i in row..row + SSIM_WINDOW {
                        let (u, v) = (pa[i], pb[i]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Ratio of low-band to high-band DCT energy of a perturbation, using the
/// codec's partition. Infinite when the high band is empty (relative to the
/// total energy, below `1e-12`); NaN for an all-zero perturbation.
pub fn frequency_rate(delta: &Tensor, codec: &PerturbationCodec) -> Result<f64, TensorError> {
    let (low, high) = codec.band_energies(delta)?;
    let total = low + high;
    if total == 0.0 {
        return Ok(f64::NAN);
    }
    if high <= 1e-12 * total {
        return Ok(f64::INFINITY);
    }
    Ok(low / high)
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    same_shape("cosine", a, b)?;
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (a.sum_squares().sqrt() * b.sum_squares().sqrt()))
}

/// Identity similarity under the toy embedder.
pub fn ism_toy(bundle: &ModelBundle, src: &Tensor, out: &Tensor) -> Result<f64, TensorError> {
    cosine(&bundle.embedding(src)?, &bundle.embedding(out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub l2: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub fr: f64,
    pub ism_toy: f64,
}

impl MetricReport {
    /// All metrics of `protected` against `clean`; FR is taken of their difference.
    pub fn compute(bundle: &ModelBundle, clean: &Tensor, protected: &Tensor) -> Result<Self> {
        let delta = protected.sub(clean)?;
        Ok(MetricReport {
            l2: l2_dist(clean, protected)?,
            psnr: psnr(clean, protected)?,
            ssim: ssim(clean, protected)?,
            fr: frequency_rate(&delta, &PerturbationCodec::default())?,
            ism_toy: ism_toy(bundle, clean, protected)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| ((i * 29) % 97) as f64 / 97.0)
    }

    #[test]
    fn identical_images() {
        let a = ramp(3, 16, 16);
        assert_eq!(l2_dist(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), 80.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offsets_and_psnr_value() {
        let a = ramp(1, 8, 8);
        let b = a.map(|v| v + 0.1);
        assert!((l2_dist(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
    }

    #[test]
    fn frequency_rate_sentinels() {
        let codec = PerturbationCodec::default();
        assert!(frequency_rate(&Tensor::zeros(&[3, 8, 8]), &codec)
            .unwrap()
            .is_nan());
        let lp = codec.low_pass_filter(&ramp(3, 16, 16)).unwrap();
        assert_eq!(frequency_rate(&lp, &codec).unwrap(), f64::INFINITY);
        let mut coeffs = Tensor::zeros(&[1, 1, 1, 8, 8]);
        coeffs.data_mut()[63] = 1.0;
        let hf = crate::noise::dct_unpatchify(&coeffs, (8, 8)).unwrap();
        assert!(frequency_rate(&hf, &codec).unwrap() < 1e-20);
    }
}
