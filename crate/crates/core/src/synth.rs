//! Seeded synthetic face-like images.
//!
//! A smooth background, a skin-toned ellipse with hair, eyes, brows, nose
//! and mouth, plus mild per-pixel texture. Every value lies on the 8-bit
//! grid, so saving and reloading an image is lossless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Side of the default synthetic image.
pub const DEFAULT_SIDE: usize = 64;

fn smoothstep(edge: f64, v: f64) -> f64 {
    // 1 inside (v < 0), 0 outside, over a band of width `edge`
    (0.5 - v / edge).clamp(0.0, 1.0)
}

/// `side × side` RGB face image determined by `seed`.
pub fn synth_face(seed: u64, side: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side as f64;
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let bg_a = [u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)];
    let bg_b = [u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)];
    let tone = u(0.35, 0.95);
    let skin = [tone, tone * u(0.7, 0.85), tone * u(0.55, 0.7)];
    let hair_level = u(0.05, 0.5);
    let hair = [
        hair_level,
        hair_level * u(0.6, 1.0),
        hair_level * u(0.4, 0.9),
    ];
    let (cx, cy) = (n * u(0.45, 0.55), n * u(0.5, 0.58));
    let (rx, ry) = (n * u(0.26, 0.32), n * u(0.34, 0.4));
    let eye_dx = rx * u(0.35, 0.45);
    let eye_y = cy - ry * u(0.1, 0.25);
    let eye_r = n * u(0.035, 0.05);
    let mouth_y = cy + ry * u(0.45, 0.6);
    let mouth_w = rx * u(0.35, 0.55);
    let lip = [u(0.4, 0.7), u(0.1, 0.3), u(0.15, 0.3)];
    let texture_seed: u64 = rng.random();

    let mut tex_rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let mut img = Tensor::zeros(&[3, side, side]);
    let soft = 1.5;
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = fy / n;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
            }
            // hair: a larger ellipse behind the face, cut off below the eyes
            let hd =
                ((fx - cx) / (rx * 1.15)).powi(2) + ((fy - cy + ry * 0.12) / (ry * 1.05)).powi(2);
            let hair_a = smoothstep(0.08, hd.sqrt() - 1.0) * smoothstep(soft, fy - eye_y);
            let fd = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
            let face_a = smoothstep(0.08, fd.sqrt() - 1.0);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - hair_a) + hair[c] * hair_a;
                px[c] = px[c] * (1.0 - face_a) + skin[c] * face_a;
            }
            let mut dark = 0.0f64;
            for side_sign in [-1.0, 1.0] {
                let ex = cx + side_sign * eye_dx;
                let ed = ((fx - ex).powi(2) + ((fy - eye_y) * 1.6).powi(2)).sqrt();
                dark = dark.max(smoothstep(soft, ed - eye_r) * 0.85);
                let bd = ((fx - ex) / (eye_r * 1.6)).powi(2)
                    + ((fy - (eye_y - eye_r * 2.2)) / (eye_r * 0.45)).powi(2);
                dark = dark.max(smoothstep(0.3, bd.sqrt() - 1.0) * 0.6);
            }
            let nd = ((fx - cx) / (eye_r * 0.6)).powi(2)
                + ((fy - (eye_y + mouth_y) / 2.0) / (eye_r * 1.6)).powi(2);
            dark = dark.max(smoothstep(0.4, nd.sqrt() - 1.0) * 0.25);
            px.iter_mut().for_each(|p| *p *= 1.0 - dark);
            let md = ((fx - cx) / mouth_w).powi(2) + ((fy - mouth_y) / (eye_r * 0.9)).powi(2);
            let mouth_a = smoothstep(0.3, md.sqrt() - 1.0) * face_a;
            for (p, l) in px.iter_mut().zip(lip) {
                *p = *p * (1.0 - mouth_a) + l * mouth_a;
            }
            let grain = tex_rng.random_range(-0.02..0.02);
            for (c, p) in px.iter().enumerate() {
                let v = (p + grain).clamp(0.0, 1.0);
                img.data_mut()[(c * side + y) * side + x] = (v * 255.0).round() / 255.0;
            }
        }
    }
    img
}

/// Uniform noise in `[-amplitude, amplitude]`, seeded.
pub fn uniform_noise(seed: u64, shape: &[usize], amplitude: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-amplitude..=amplitude))
}
