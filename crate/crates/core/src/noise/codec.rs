//! Patchified DCT and the low-frequency projection.

use crate::dct::{self, BLOCK, LUMINANCE_TABLE};
use crate::tensor::{Tensor, TensorError};
use crate::{Error, Result};

/// Orthonormal DCT-II of every 8×8 patch of every channel:
/// `[c, h, w]` → `[c, ⌈h/8⌉, ⌈w/8⌉, 8, 8]`, zero-padding partial patches.
pub fn dct_patchify(x: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = x.chw()?;
    let (ph, pw) = (h.div_ceil(BLOCK), w.div_ceil(BLOCK));
    let mut out = Tensor::zeros(&[c, ph, pw, BLOCK, BLOCK]);
    let data = out.data_mut();
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for py in 0..ph {
            for px in 0..pw {
                let mut b = [[0.0; BLOCK]; BLOCK];
                for (dy, row) in b.iter_mut().enumerate() {
                    for (dx, v) in row.iter_mut().enumerate() {
                        let (y, xx) = (py * BLOCK + dy, px * BLOCK + dx);
                        if y < h && xx < w {
                            *v = plane[y * w + xx];
                        }
                    }
                }
                let coeffs = dct::forward(&b);
                let base = ((ch * ph + py) * pw + px) * BLOCK * BLOCK;
                for (i, v) in coeffs.iter().flatten().enumerate() {
                    data[base + i] = *v;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`dct_patchify`], cropping to `(h, w)`.
pub fn dct_unpatchify(coeffs: &Tensor, hw: (usize, usize)) -> Result<Tensor, TensorError> {
    let (c, ph, pw) = match coeffs.shape()[..] {
        [c, ph, pw, BLOCK, BLOCK] => (c, ph, pw),
        ref s => {
            return Err(TensorError::invalid(
                "dct_unpatchify",
                format!("expected [c, ph, pw, 8, 8], got {s:?}"),
            ))
        }
    };
    let (h, w) = hw;
    if h == 0 || w == 0 || h.div_ceil(BLOCK) != ph || w.div_ceil(BLOCK) != pw {
        return Err(TensorError::invalid(
            "dct_unpatchify",
            format!("{h}x{w} does not match a {ph}x{pw} patch grid"),
        ));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let data = out.data_mut();
    for ch in 0..c {
        for py in 0..ph {
            for px in 0..pw {
                let base = ((ch * ph + py) * pw + px) * BLOCK * BLOCK;
                let mut b = [[0.0; BLOCK]; BLOCK];
                for (i, v) in b.iter_mut().flatten().enumerate() {
                    *v = coeffs.data()[base + i];
                }
                let pixels = dct::inverse(&b);
                for (dy, row) in pixels.iter().enumerate() {
                    for (dx, &v) in row.iter().enumerate() {
                        let (y, x) = (py * BLOCK + dy, px * BLOCK + dx);
                        if y < h && x < w {
                            data[(ch * h + y) * w + x] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Low-pass projection over the patch DCT.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationCodec {
    pub threshold: u16,
    mask: [[bool; BLOCK]; BLOCK],
}

impl Default for PerturbationCodec {
    fn default() -> Self {
        Self::new(BLOCK, 40).expect("default codec parameters are valid")
    }
}

impl PerturbationCodec {
    /// Keeps coefficient `(u, v)` iff the luminance table entry is below `threshold`.
    pub fn new(patch: usize, threshold: u16) -> Result<Self> {
        if patch != BLOCK {
            return Err(Error::Config(format!(
                "patch size must be {BLOCK} to match the quantization table, got {patch}"
            )));
        }
        if threshold <= LUMINANCE_TABLE[0][0] {
            return Err(Error::Config(format!(
                "low-pass threshold {threshold} would discard the DC coefficient"
            )));
        }
        let mut mask = [[false; BLOCK]; BLOCK];
        for (u, row) in mask.iter_mut().enumerate() {
            for (v, m) in row.iter_mut().enumerate() {
                *m = LUMINANCE_TABLE[u][v] < threshold;
            }
        }
        Ok(PerturbationCodec { threshold, mask })
    }

    pub fn keeps(&self, u: usize, v: usize) -> bool {
        self.mask[u][v]
    }

    /// `M_lp` as an 8×8 tensor of zeros and ones.
    pub fn mask(&self) -> Tensor {
        Tensor::from_fn(&[BLOCK, BLOCK], |i| {
            if self.mask[i / BLOCK][i % BLOCK] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn kept_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    /// `(E_low, E_high)`: coefficient energy inside and outside the mask.
    pub fn band_energies(&self, delta: &Tensor) -> Result<(f64, f64), TensorError> {
        let coeffs = dct_patchify(delta)?;
        let (mut low, mut high) = (0.0, 0.0);
        for (i, v) in coeffs.data().iter().enumerate() {
            let k = i % (BLOCK * BLOCK);
            if self.mask[k / BLOCK][k % BLOCK] {
                low += v * v;
            } else {
                high += v * v;
            }
        }
        Ok((low, high))
    }

    /// `IDCT(DCT(δ) ⊙ M_lp)` with padding stripped.
    pub fn low_pass_filter(&self, delta: &Tensor) -> Result<Tensor, TensorError> {
        let (_, h, w) = delta.chw()?;
        let mut coeffs = dct_patchify(delta)?;
        for (i, v) in coeffs.data_mut().iter_mut().enumerate() {
            let k = i % (BLOCK * BLOCK);
            if !self.mask[k / BLOCK][k % BLOCK] {
                *v = 0.0;
            }
        }
        dct_unpatchify(&coeffs, (h, w))
    }
}
