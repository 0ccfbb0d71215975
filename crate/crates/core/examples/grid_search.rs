//! Ranks a small grid of loss weights on the sample face by how much each
//! combination lowers every loss.

use advshield::cli::{cmd_grid, expand_grid, format_grid};
use advshield::models::init_models;
use advshield::noise::AttackConfig;
use advshield::synth::synth_face;

fn main() -> advshield::Result<()> {
    let bundle = init_models(7);
    let x = synth_face(0, 64);
    let base = AttackConfig {
        steps: 10,
        ..AttackConfig::default()
    };
    let combos = expand_grid("proj=-1,-0.5;mtcnn=0.5,1,2", &base.loss.weights)?;
    let rows = cmd_grid(&x, &bundle, &base, &combos)?;
    print!("{}", format_grid(&rows));
    Ok(())
}
