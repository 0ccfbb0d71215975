//! Effect of the two post-step refinements on where the perturbation's
//! energy sits: the frequency rate (low-band over high-band energy) and the
//! share of energy that survives JPEG at quality 75.

use advshield::metrics::frequency_rate;
use advshield::models::init_models;
use advshield::noise::{protect, AttackConfig, PerturbationCodec};
use advshield::purify::{jpeg_compress, residual_energy_fraction};
use advshield::synth::synth_face;

fn main() -> advshield::Result<()> {
    let bundle = init_models(7);
    let x = synth_face(3, 64);
    let codec = PerturbationCodec::default();
    let jx = jpeg_compress(&x, 75)?;
    println!(
        "{:<18} {:>12} {:>16}",
        "refinements", "fr", "jpeg75 residual"
    );
    for (label, blur, lowpass) in [
        ("none", false, false),
        ("blur", true, false),
        ("lowpass", false, true),
        ("blur + lowpass", true, true),
    ] {
        let mut cfg = AttackConfig::default();
        cfg.blur.enabled = blur;
        cfg.lowpass.enabled = lowpass;
        let p = protect(&x, &bundle, &cfg)?;
        let fr = frequency_rate(&p.delta, &codec)?;
        let residual = residual_energy_fraction(&x, &p.image, &jx, &jpeg_compress(&p.image, 75)?)?;
        println!("{label:<18} {fr:>12.3} {residual:>16.4}");
    }
    Ok(())
}
