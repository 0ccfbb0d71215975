//! 8×8 block DCT shared by the low-pass codec, the JPEG simulator and the
//! frequency-rate metric.

use std::sync::OnceLock;

pub const BLOCK: usize = 8;

/// Standard JPEG luminance quantization table (quality 50), row-major by
/// vertical then horizontal frequency.
pub const LUMINANCE_TABLE: [[u16; BLOCK]; BLOCK] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

pub type Block = [[f64; BLOCK]; BLOCK];

/// Orthonormal DCT-II basis: `C[u][x] = α(u) cos((2x + 1) u π / 16)`.
fn basis() -> &'static Block {
    static C: OnceLock<Block> = OnceLock::new();
    C.get_or_init(|| {
        let n = BLOCK as f64;
        let mut c = [[0.0; BLOCK]; BLOCK];
        for (u, row) in c.iter_mut().enumerate() {
            let alpha = if u == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2.0 * n)).cos();
            }
        }
        c
    })
}

/// `C · b · Cᵀ`.
pub fn forward(b: &Block) -> Block {
    let c = basis();
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for u in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[u][x] = (0..BLOCK).map(|y| c[u][y] * b[y][x]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u][v] = (0..BLOCK).map(|x| tmp[u][x] * c[v][x]).sum();
        }
    }
    out
}

/// `Cᵀ · b · C`.
pub fn inverse(b: &Block) -> Block {
    let c = basis();
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for y in 0..BLOCK {
        for v in 0..BLOCK {
            tmp[y][v] = (0..BLOCK).map(|u| c[u][y] * b[u][v]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y][x] = (0..BLOCK).map(|v| tmp[y][v] * c[v][x]).sum();
        }
    }
    out
}

/// Applies `f` to every 8×8 block of one `h × w` plane, padding partial
/// blocks through `pad(y, x)` and writing back only in-bounds pixels.
pub(crate) fn for_each_block(
    plane: &mut [f64],
    h: usize,
    w: usize,
    pad: impl Fn(&[f64], usize, usize) -> f64,
    mut f: impl FnMut(&mut Block),
) {
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            let mut b = [[0.0; BLOCK]; BLOCK];
            for (dy, row) in b.iter_mut().enumerate() {
                for (dx, v) in row.iter_mut().enumerate() {
                    let (y, x) = (by + dy, bx + dx);
                    *v = if y < h && x < w {
                        plane[y * w + x]
                    } else {
                        pad(plane, y, x)
                    };
                }
            }
            f(&mut b);
            for (dy, row) in b.iter().enumerate() {
                for (dx, &v) in row.iter().enumerate() {
                    let (y, x) = (by + dy, bx + dx);
                    if y < h && x < w {
                        plane[y * w + x] = v;
                    }
                }
            }
        }
    }
}
