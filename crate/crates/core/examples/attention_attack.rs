//! Attention-only attack: sharpens the low-variance attention rows of the
//! cross-attention block, raising their mean variance.

use advshield::losses::{LossConfig, LossWeights, Objective};
use advshield::models::init_models;
use advshield::noise::{protect, AttackConfig};
use advshield::synth::synth_face;

fn main() -> advshield::Result<()> {
    let bundle = init_models(7);
    let cfg = AttackConfig {
        loss: LossConfig {
            weights: LossWeights::new(0.0, 1.0, 0.0, 0.0)?,
            ..LossConfig::default()
        },
        ..AttackConfig::default()
    };
    println!("{:>5} {:>12} {:>12}", "seed", "var before", "var after");
    for seed in 0..6 {
        let x = synth_face(seed, 64);
        let objective = Objective::prepare(&bundle, &x, &cfg.loss)?;
        let before = objective.attention.masked_mean_variance(&bundle, &x)?;
        let p = protect(&x, &bundle, &cfg)?;
        let after = objective
            .attention
            .masked_mean_variance(&bundle, &p.image)?;
        println!("{seed:>5} {before:>12.3e} {after:>12.3e}");
    }
    Ok(())
}
