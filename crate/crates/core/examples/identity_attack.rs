//! Identity-only attack: pushes the toy identity embedding away from the
//! clean one and reports the cosine similarity before and after.

use advshield::losses::{LossConfig, LossWeights};
use advshield::metrics::ism_toy;
use advshield::models::init_models;
use advshield::noise::{protect, AttackConfig};
use advshield::synth::synth_face;

fn main() -> advshield::Result<()> {
    let bundle = init_models(7);
    let cfg = AttackConfig {
        loss: LossConfig {
            weights: LossWeights::new(0.0, 0.0, 0.0, -1.0)?,
            ..LossConfig::default()
        },
        ..AttackConfig::default()
    };
    println!("{:>5} {:>10}", "seed", "ism_toy");
    for seed in 0..6 {
        let x = synth_face(seed, 64);
        let p = protect(&x, &bundle, &cfg)?;
        println!("{seed:>5} {:>10.4}", ism_toy(&bundle, &x, &p.image)?);
    }
    Ok(())
}
