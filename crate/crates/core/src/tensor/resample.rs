use super::TensorError;

/// Interpolation used by [`crate::tensor::Var::resize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    /// `src = floor(dst * in / out)`.
    Nearest,
    /// Half-pixel centres (align-corners = false), indices clamped at the edges.
    Bilinear,
    /// Exact footprint averaging: each output cell averages the source pixels
    /// it covers, weighted by covered length.
    Area,
}

/// Sparse 1-D linear map: `out[o] = sum(w * in[i] for (i, w) in taps[o])`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    pub input_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    pub fn output_len(&self) -> usize {
        self.taps.len()
    }

    pub fn new(mode: ResizeMode, input_len: usize, output_len: usize) -> Self {
        match mode {
            ResizeMode::Nearest => Self::nearest(input_len, output_len),
            ResizeMode::Bilinear => Self::bilinear(input_len, output_len),
            ResizeMode::Area => Self::area(input_len, output_len),
        }
    }

    pub fn nearest(input_len: usize, output_len: usize) -> Self {
        let taps = (0..output_len)
            .map(|o| vec![(o * input_len / output_len, 1.0)])
            .collect();
        AxisMap { input_len, taps }
    }

    pub fn bilinear(input_len: usize, output_len: usize) -> Self {
        let ratio = input_len as f64 / output_len as f64;
        let taps = (0..output_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input_len - 1);
                let i1 = (i0 + 1).min(input_len - 1);
                let frac = src - i0 as f64;
                if i0 == i1 || frac == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            })
            .collect();
        AxisMap { input_len, taps }
    }

    /// Overlap of output cell `o` (spanning `[o*n, (o+1)*n)` on a lattice of
    /// `n*m` sub-pixels) with source pixel `i` (spanning `[i*m, (i+1)*m)`),
    /// divided by `n`. This is nearest-upscaling to `n*m` followed by average
    /// pooling with kernel `n`, without materialising the upscaled signal.
    pub fn area(input_len: usize, output_len: usize) -> Self {
        let (n, m) = (input_len, output_len);
        let taps = (0..m)
            .map(|o| {
                let (lo, hi) = (o * n, (o + 1) * n);
                (lo / m..=(hi - 1) / m)
                    .filter_map(|i| {
                        let overlap = hi.min((i + 1) * m) - lo.max(i * m);
                        (overlap > 0).then(|| (i, overlap as f64 / n as f64))
                    })
                    .collect()
            })
            .collect();
        AxisMap { input_len, taps }
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * input[i]).sum())
            .collect()
    }
}

/// Separable 2-D resampling applied independently to every channel of a
/// `[c, h, w]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample2d {
    pub rows: AxisMap,
    pub cols: AxisMap,
}

impl Resample2d {
    pub fn new(
        mode: ResizeMode,
        (in_h, in_w): (usize, usize),
        (out_h, out_w): (usize, usize),
    ) -> Result<Self, TensorError> {
        if out_h == 0 || out_w == 0 || in_h == 0 || in_w == 0 {
            return Err(TensorError::invalid(
                "resize",
                format!("degenerate resize {in_h}x{in_w} -> {out_h}x{out_w}"),
            ));
        }
        Ok(Resample2d {
            rows: AxisMap::new(mode, in_h, out_h),
            cols: AxisMap::new(mode, in_w, out_w),
        })
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.rows.input_len, self.cols.input_len)
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.rows.output_len(), self.cols.output_len())
    }

    /// Resamples a `[c, h, w]` tensor outside any tape.
    pub fn apply(&self, x: &super::Tensor) -> Result<super::Tensor, TensorError> {
        let (c, h, w) = x.chw()?;
        if (h, w) != self.input_hw() {
            return Err(TensorError::ShapeMismatch {
                op: "resample",
                lhs: x.shape().to_vec(),
                rhs: vec![c, self.rows.input_len, self.cols.input_len],
            });
        }
        let (oh, ow) = self.output_hw();
        super::Tensor::new(vec![c, oh, ow], self.forward(c, x.data()))
    }

    pub(crate) fn forward(&self, channels: usize, x: &[f64]) -> Vec<f64> {
        let (h, w) = self.input_hw();
        let (oh, ow) = self.output_hw();
        let mut tmp = vec![0.0; channels * h * ow];
        for c in 0..channels {
            for i in 0..h {
                let src = &x[(c * h + i) * w..(c * h + i + 1) * w];
                let dst = &mut tmp[(c * h + i) * ow..(c * h + i + 1) * ow];
                for (q, taps) in self.cols.taps.iter().enumerate() {
                    dst[q] = taps.iter().map(|&(j, wt)| wt * src[j]).sum();
                }
            }
        }
        let mut out = vec![0.0; channels * oh * ow];
        for c in 0..channels {
            for (o, taps) in self.rows.taps.iter().enumerate() {
                let dst = &mut out[(c * oh + o) * ow..(c * oh + o + 1) * ow];
                for &(i, wt) in taps {
                    let src = &tmp[(c * h + i) * ow..(c * h + i + 1) * ow];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, channels: usize, g: &[f64]) -> Vec<f64> {
        let (h, w) = self.input_hw();
        let (oh, ow) = self.output_hw();
        let mut gtmp = vec![0.0; channels * h * ow];
        for c in 0..channels {
            for (o, taps) in self.rows.taps.iter().enumerate() {
                let src = &g[(c * oh + o) * ow..(c * oh + o + 1) * ow];
                for &(i, wt) in taps {
                    let dst = &mut gtmp[(c * h + i) * ow..(c * h + i + 1) * ow];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        let mut gx = vec![0.0; channels * h * w];
        for c in 0..channels {
            for i in 0..h {
                let src = &gtmp[(c * h + i) * ow..(c * h + i + 1) * ow];
                let dst = &mut gx[(c * h + i) * w..(c * h + i + 1) * w];
                for (q, taps) in self.cols.taps.iter().enumerate() {
                    for &(j, wt) in taps {
                        dst[j] += wt * src[q];
                    }
                }
            }
        }
        gx
    }
}
