//! Renders a seeded synthetic face and writes it as PNG and PPM.
//!
//! `cargo run --example synth_sample -- [seed] [side] [out_stem]`
//! The bundled `assets/sample_face.*` files are seed 0 at 64×64.

use advshield::image_io::save_image;
use advshield::synth::{synth_face, DEFAULT_SIDE};

fn main() -> advshield::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args
        .next()
        .map_or(0, |s| s.parse().expect("seed must be an integer"));
    let side = args.next().map_or(DEFAULT_SIDE, |s| {
        s.parse().expect("side must be an integer")
    });
    let stem = args.next().unwrap_or_else(|| "sample_face".into());
    let face = synth_face(seed, side);
    for ext in ["png", "ppm"] {
        let path = format!("{stem}.{ext}");
        save_image(&path, &face)?;
        println!("wrote {path} ({side}x{side}, seed {seed})");
    }
    Ok(())
}
