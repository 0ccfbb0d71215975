//! Purification simulators and the perturbation-survival harness.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::dct::{self, BLOCK, LUMINANCE_TABLE};
use crate::losses::{scaled_side, LossConfig, LossValues, Objective};
use crate::metrics::ism_toy;
use crate::models::ModelBundle;
use crate::tensor::{Resample2d, ResizeMode, Tensor, TensorError};
use crate::{Error, Result};

/// Standard JPEG chrominance table, used for the second and third channels
/// when [`JpegSim::chroma_table`] is set.
pub const CHROMINANCE_TABLE: [[u16; BLOCK]; BLOCK] = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
];

/// Block-DCT quantization round trip in RGB, 4:4:4, without entropy coding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JpegSim {
    pub quality: u8,
    pub chroma_table: bool,
}

/// The libjpeg quality rule applied to one table entry.
pub fn scaled_quant(q: u16, quality: u8) -> f64 {
    let quality = u32::from(quality);
    let scale = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    ((u32::from(q) * scale + 50) / 100).max(1) as f64
}

impl JpegSim {
    pub fn new(quality: u8) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(Error::InvalidArgument(format!(
                "JPEG quality must lie in [1, 100], got {quality}"
            )));
        }
        Ok(JpegSim {
            quality,
            chroma_table: false,
        })
    }

    pub fn table(&self, channel: usize) -> [[f64; BLOCK]; BLOCK] {
        let base = if self.chroma_table && channel > 0 {
            &CHROMINANCE_TABLE
        } else {
            &LUMINANCE_TABLE
        };
        let mut t = [[0.0; BLOCK]; BLOCK];
        for (u, row) in t.iter_mut().enumerate() {
            for (v, e) in row.iter_mut().enumerate() {
                *e = scaled_quant(base[u][v], self.quality);
            }
        }
        t
    }

    /// Quantizes each 8×8 block of each channel on the 0–255 scale, with
    /// round-half-up and edge replication for partial blocks. The output is
    /// clamped to `[0, 1]` but not rounded to 8 bits.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (c, h, w) = x.chw()?;
        let mut out = x.map(|v| v * 255.0 - 128.0);
        for ch in 0..c {
            let table = self.table(ch);
            let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
            dct::for_each_block(
                plane,
                h,
                w,
                |p, y, xx| p[y.min(h - 1) * w + xx.min(w - 1)],
                |b| {
                    let mut coeffs = dct::forward(b);
                    for (u, row) in coeffs.iter_mut().enumerate() {
                        for (v, e) in row.iter_mut().enumerate() {
                            let q = table[u][v];
                            *e = (*e / q + 0.5).floor() * q;
                        }
                    }
                    *b = dct::inverse(&coeffs);
                },
            );
        }
        Ok(out.map(|v| ((v + 128.0) / 255.0).clamp(0.0, 1.0)))
    }
}

pub fn jpeg_compress(x: &Tensor, quality: u8) -> Result<Tensor> {
    Ok(JpegSim::new(quality)?.apply(x)?)
}

/// `round(x · (2ᵇ − 1)) / (2ᵇ − 1)` with round-half-up.
pub fn bit_reduce(x: &Tensor, bits: u8) -> Result<Tensor> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit depth must lie in [1, 8], got {bits}"
        )));
    }
    let levels = f64::from((1u16 << bits) - 1);
    Ok(x.map(|v| (v * levels + 0.5).floor() / levels))
}

/// Downscale by `factor` with `mode`, then bilinear back to the original size.
pub fn purify_resize(x: &Tensor, factor: f64, mode: ResizeMode) -> Result<Tensor> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "resize factor must lie in (0, 1], got {factor}"
        )));
    }
    let (_, h, w) = x.chw()?;
    let small = (scaled_side(h, factor), scaled_side(w, factor));
    let down = Resample2d::new(mode, (h, w), small)?.apply(x)?;
    Ok(Resample2d::new(ResizeMode::Bilinear, small, (h, w))?.apply(&down)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Purifier {
    Identity,
    Jpeg(u8),
    Bits(u8),
    Resize(f64, ResizeMode),
}

impl Purifier {
    /// JPEG 90/75/50, 8- and 3-bit reduction, and 75 % / 50 % resizing with
    /// both downscaling filters.
    pub fn standard_grid() -> Vec<Purifier> {
        let mut grid = vec![
            Purifier::Jpeg(90),
            Purifier::Jpeg(75),
            Purifier::Jpeg(50),
            Purifier::Bits(8),
            Purifier::Bits(3),
        ];
        for f in [0.75, 0.5] {
            for m in [ResizeMode::Bilinear, ResizeMode::Area] {
                grid.push(Purifier::Resize(f, m));
            }
        }
        grid
    }

    pub fn name(&self) -> &'static str {
        match self {
            Purifier::Identity => "identity",
            Purifier::Jpeg(_) => "jpeg",
            Purifier::Bits(_) => "bits",
            Purifier::Resize(..) => "resize",
        }
    }

    pub fn params(&self) -> String {
        match self {
            Purifier::Identity => String::new(),
            Purifier::Jpeg(q) => q.to_string(),
            Purifier::Bits(b) => b.to_string(),
            Purifier::Resize(f, m) => format!("{f}:{}", mode_name(*m)),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            Purifier::Identity => Ok(x.clone()),
            Purifier::Jpeg(q) => jpeg_compress(x, q),
            Purifier::Bits(b) => bit_reduce(x, b),
            Purifier::Resize(f, m) => purify_resize(x, f, m),
        }
    }

    /// Parses a comma-separated list such as `jpeg:75,bits:3,resize:0.5:area`.
    pub fn parse_list(s: &str) -> Result<Vec<Purifier>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

fn mode_name(m: ResizeMode) -> &'static str {
    match m {
        ResizeMode::Nearest => "nearest",
        ResizeMode::Bilinear => "bilinear",
        ResizeMode::Area => "area",
    }
}

impl fmt::Display for Purifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Purifier::Identity => f.write_str("identity"),
            _ => write!(f, "{}:{}", self.name(), self.params()),
        }
    }
}

impl FromStr for Purifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognised purifier '{s}'"));
        let parts: Vec<&str> = s.split(':').collect();
        let p = match parts[..] {
            ["identity"] => Purifier::Identity,
            ["jpeg", q] => Purifier::Jpeg(q.parse().map_err(|_| bad())?),
            ["bits", b] => Purifier::Bits(b.parse().map_err(|_| bad())?),
            ["resize", f] => Purifier::Resize(f.parse().map_err(|_| bad())?, ResizeMode::Bilinear),
            ["resize", f, m] => {
                let mode = match m {
                    "bilinear" => ResizeMode::Bilinear,
                    "area" => ResizeMode::Area,
                    _ => return Err(bad()),
                };
                Purifier::Resize(f.parse().map_err(|_| bad())?, mode)
            }
            _ => return Err(bad()),
        };
        // reject out-of-range parameters at parse time
        match p {
            Purifier::Jpeg(q) => {
                JpegSim::new(q)?;
            }
            Purifier::Bits(b) if !(1..=8).contains(&b) => return Err(bad()),
            Purifier::Resize(f, _) if !(f > 0.0 && f <= 1.0) => return Err(bad()),
            _ => {}
        }
        Ok(p)
    }
}

/// Survival of a perturbation under one purifier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRecord {
    pub purifier: String,
    pub params: String,
    /// `‖P(x + δ) − P(x)‖² / ‖δ‖²`.
    pub residual_energy: f64,
    /// Identity similarity of the purified protected image to the clean image.
    pub ism_toy: f64,
    /// Share of the clean image's detected cells that are no longer detected.
    pub detector_failure: f64,
    pub losses: LossValues,
}

/// `‖a' − b'‖² / ‖a − b‖²`; NaN when `a = b`.
pub fn residual_energy_fraction(
    clean: &Tensor,
    protected: &Tensor,
    purified_clean: &Tensor,
    purified_protected: &Tensor,
) -> Result<f64, TensorError> {
    let before = protected.sub(clean)?.sum_squares();
    let after = purified_protected.sub(purified_clean)?.sum_squares();
    Ok(if before == 0.0 {
        f64::NAN
    } else {
        after / before
    })
}

/// Share of cells above `t_prob` in `clean_probs` that fall to or below it
/// in `probs`; NaN when the clean image has no detected cell.
pub fn detector_failure_rate(clean_probs: &[f64], probs: &[f64], t_prob: f64) -> f64 {
    let (mut detected, mut failed) = (0usize, 0usize);
    for (&c, &p) in clean_probs.iter().zip(probs) {
        if c > t_prob {
            detected += 1;
            if p <= t_prob {
                failed += 1;
            }
        }
    }
    if detected == 0 {
        f64::NAN
    } else {
        failed as f64 / detected as f64
    }
}

/// Applies every purifier to both images and measures what survives.
pub fn evaluate_robustness(
    clean: &Tensor,
    protected: &Tensor,
    bundle: &ModelBundle,
    purifiers: &[Purifier],
    loss_cfg: &LossConfig,
) -> Result<Vec<RobustnessRecord>> {
    if clean.shape() != protected.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "evaluate_robustness",
            lhs: clean.shape().to_vec(),
            rhs: protected.shape().to_vec(),
        }
        .into());
    }
    let objective = Objective::prepare(bundle, clean, loss_cfg)?;
    let clean_probs = objective.detector.face_probabilities(bundle, clean)?;
    purifiers
        .iter()
        .map(|p| {
            let pc = p.apply(clean)?;
            let pp = p.apply(protected)?;
            let probs = objective.detector.face_probabilities(bundle, &pp)?;
            Ok(RobustnessRecord {
                purifier: p.name().to_string(),
                params: p.params(),
                residual_energy: residual_energy_fraction(clean, protected, &pc, &pp)?,
                ism_toy: ism_toy(bundle, clean, &pp)?,
                detector_failure: detector_failure_rate(&clean_probs, &probs, loss_cfg.t_prob),
                losses: objective.values(bundle, clean, &pp.sub(clean)?)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_rule() {
        assert_eq!(scaled_quant(16, 50), 16.0);
        assert_eq!(scaled_quant(99, 100), 1.0);
        assert_eq!(scaled_quant(16, 75), 8.0);
        assert_eq!(scaled_quant(16, 10), 80.0);
        assert!(JpegSim::new(0).is_err());
        assert!(JpegSim::new(101).is_err());
    }

    #[test]
    fn bit_reduce_examples() {
        let x = Tensor::full(&[1, 1, 1], 0.5);
        assert!((bit_reduce(&x, 3).unwrap().data()[0] - 4.0 / 7.0).abs() < 1e-15);
        let grid = Tensor::from_fn(&[3, 4, 4], |i| (i * 5 % 256) as f64 / 255.0);
        assert_eq!(bit_reduce(&grid, 8).unwrap(), grid);
        let one = bit_reduce(&grid, 1).unwrap();
        assert!(one.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn constant_image_survives_jpeg() {
        let x = Tensor::full(&[3, 12, 12], 100.0 / 255.0);
        for q in [10, 50, 75, 100] {
            let y = jpeg_compress(&x, q).unwrap();
            let first = y.data()[0];
            assert!(y.data().iter().all(|&v| (v - first).abs() < 1e-9));
        }
    }

    #[test]
    fn area_resize_block_means() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 16.0);
        let y = purify_resize(&x, 1.0, ResizeMode::Area).unwrap();
        assert!(x.sub(&y).unwrap().max_abs() < 1e-12);
        let c = Tensor::full(&[3, 8, 8], 0.3);
        let y = purify_resize(&c, 0.5, ResizeMode::Area).unwrap();
        assert!(c.sub(&y).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn parse_round_trip() {
        let list = Purifier::parse_list(
            "jpeg:90,jpeg:75,jpeg:50,bits:8,bits:3,resize:0.75:bilinear,resize:0.5:area",
        )
        .unwrap();
        assert_eq!(list.len(), 7);
        for p in &list {
            assert_eq!(&p.to_string().parse::<Purifier>().unwrap(), p);
        }
        assert!("jpeg:0".parse::<Purifier>().is_err());
        assert!("resize:0.5:cubic".parse::<Purifier>().is_err());
        assert!("blur:3".parse::<Purifier>().is_err());
        assert_eq!(Purifier::standard_grid().len(), 9);
    }
}
