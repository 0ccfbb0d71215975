//! Generates the seeded toy networks, writes the weight file and prints its
//! digest and layer inventory.
//!
//! `cargo run --example gen_weights -- [seed] [out]`

use advshield::models::{init_models, ModelBundle};

fn main() -> advshield::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args
        .next()
        .map_or(7, |s| s.parse().expect("seed must be an integer"));
    let out = args
        .next()
        .unwrap_or_else(|| format!("weights_seed{seed}.bin"));

    let bundle = init_models(seed);
    let digest = bundle.save(&out)?;
    println!("wrote {out}");
    println!("sha256 {digest}");
    println!("{} parameters", bundle.parameter_count());
    for (network, layers) in bundle.layer_table() {
        for (name, t) in layers {
            println!("  {network:<10} {name:<12} {:?}", t.shape());
        }
    }

    let reloaded = ModelBundle::load(&out)?;
    assert_eq!(reloaded.digest(), digest);
    println!("reload digest matches");
    Ok(())
}
