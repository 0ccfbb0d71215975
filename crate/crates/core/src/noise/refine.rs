//! Edge-masked Gaussian smoothing of the perturbation.

use crate::tensor::{Tensor, TensorError};

/// Mirror index into `0..n` without repeating the edge sample (`-1 → 1`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Correlates one plane with an odd square kernel under reflect padding.
pub(crate) fn correlate_reflect(
    plane: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    k: usize,
) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k {
                let sy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..k {
                    let sx = reflect(x as isize + kx as isize - r, w);
                    acc += kernel[ky * k + kx] * plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-pixel Sobel gradient magnitude, maximised over channels: `[h, w]`.
///
/// Each response is formed from pairwise differences, so flat regions give
/// exactly zero.
pub fn sobel_magnitude(delta: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = delta.chw()?;
    let mut g = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = &delta.data()[ch * h * w..(ch + 1) * h * w];
        let at = |y: isize, x: isize| plane[reflect(y, h) * w + reflect(x, w)];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = (at(y - 1, x + 1) - at(y - 1, x - 1))
                    + 2.0 * (at(y, x + 1) - at(y, x - 1))
                    + (at(y + 1, x + 1) - at(y + 1, x - 1));
                let gy = (at(y + 1, x - 1) - at(y - 1, x - 1))
                    + 2.0 * (at(y + 1, x) - at(y - 1, x))
                    + (at(y + 1, x + 1) - at(y - 1, x + 1));
                let i = y as usize * w + x as usize;
                g[i] = g[i].max((gx * gx + gy * gy).sqrt());
            }
        }
    }
    Tensor::new(vec![h, w], g)
}

/// Binary `[h, w]` edge mask: magnitude above `tau · max`, dilated by a
/// `dilation × dilation` square. Empty when the perturbation has no edges.
pub fn sobel_mask(delta: &Tensor, tau: f64, dilation: usize) -> Result<Tensor, TensorError> {
    let g = sobel_magnitude(delta)?;
    let (h, w) = (g.shape()[0], g.shape()[1]);
    let peak = g.data().iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(Tensor::zeros(&[h, w]));
    }
    let edges: Vec<bool> = g.data().iter().map(|&v| v > tau * peak).collect();
    let r = dilation / 2;
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let hit = (y.saturating_sub(r)..(y + r + 1).min(h))
            .any(|sy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|sx| edges[sy * w + sx]));
        if hit {
            1.0
        } else {
            0.0
        }
    }))
}

/// Normalised `size × size` Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// `G(δ) ⊙ M + δ ⊙ (1 − M)` with the mask shared across channels.
pub fn gaussian_blur_refine(
    delta: &Tensor,
    mask: &Tensor,
    size: usize,
    sigma: f64,
) -> Result<Tensor, TensorError> {
    let (c, h, w) = delta.chw()?;
    if mask.shape() != [h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "gaussian_blur_refine",
            lhs: delta.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let mut out = delta.clone();
    if mask.data().iter().all(|&m| m == 0.0) {
        return Ok(out);
    }
    let kernel = gaussian_kernel(size, sigma);
    for ch in 0..c {
        let range = ch * h * w..(ch + 1) * h * w;
        let blurred = correlate_reflect(&delta.data()[range.clone()], h, w, &kernel, size);
        for (i, v) in out.data_mut()[range].iter_mut().enumerate() {
            let m = mask.data()[i];
            *v = blurred[i] * m + *v * (1.0 - m);
        }
    }
    Ok(out)
}
