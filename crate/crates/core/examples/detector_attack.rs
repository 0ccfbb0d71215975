//! Detector-only attack: drives confident P-Net cells toward "no face" and
//! reports how many cells stay above the detection threshold.

use advshield::losses::Objective;
use advshield::losses::{LossConfig, LossWeights};
use advshield::models::init_models;
use advshield::noise::{protect, AttackConfig};
use advshield::purify::detector_failure_rate;
use advshield::synth::synth_face;

fn main() -> advshield::Result<()> {
    let bundle = init_models(7);
    let cfg = AttackConfig {
        loss: LossConfig {
            weights: LossWeights::new(0.0, 0.0, 1.0, 0.0)?,
            ..LossConfig::default()
        },
        ..AttackConfig::default()
    };
    println!(
        "{:>5} {:>9} {:>9} {:>8}",
        "seed", "detected", "remaining", "failure"
    );
    for seed in 0..6 {
        let x = synth_face(seed, 64);
        let objective = Objective::prepare(&bundle, &x, &cfg.loss)?;
        let before = objective.detector.face_probabilities(&bundle, &x)?;
        let p = protect(&x, &bundle, &cfg)?;
        let after = objective.detector.face_probabilities(&bundle, &p.image)?;
        let count = |v: &[f64]| v.iter().filter(|&&q| q > cfg.loss.t_prob).count();
        let rate = detector_failure_rate(&before, &after, cfg.loss.t_prob);
        println!(
            "{seed:>5} {:>9} {:>9} {:>8.3}",
            count(&before),
            count(&after),
            rate
        );
    }
    Ok(())
}
