//! Image-quality and identity metrics for a few distortions of the sample face.

use advshield::metrics::MetricReport;
use advshield::models::init_models;
use advshield::noise::project;
use advshield::purify::jpeg_compress;
use advshield::synth::{synth_face, uniform_noise};

fn main() -> advshield::Result<()> {
    let bundle = init_models(7);
    let clean = synth_face(0, 64);
    let mut noise = uniform_noise(1, clean.shape(), 8.0 / 255.0);
    project(&mut noise, &clean, 8.0 / 255.0);
    let candidates = [
        ("identical", clean.clone()),
        ("uniform noise 8/255", clean.add(&noise)?),
        ("jpeg 50", jpeg_compress(&clean, 50)?),
        ("brighter", clean.map(|v| (v + 0.05).min(1.0))),
    ];
    println!(
        "{:<20} {:>8} {:>8} {:>8} {:>10} {:>8}",
        "image", "l2", "psnr", "ssim", "fr", "ism_toy"
    );
    for (name, img) in candidates {
        let m = MetricReport::compute(&bundle, &clean, &img)?;
        println!(
            "{name:<20} {:>8.3} {:>8.3} {:>8.4} {:>10.3} {:>8.5}",
            m.l2, m.psnr, m.ssim, m.fr, m.ism_toy
        );
    }
    Ok(())
}
