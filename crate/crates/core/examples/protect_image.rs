//! Protects the bundled sample face with the default attack and writes the
//! result next to a per-step trace.
//!
//! `cargo run --example protect_image -- [input] [out_dir]`

use advshield::cli::protect_file;
use advshield::models::init_models;
use advshield::noise::AttackConfig;

fn main() -> advshield::Result<()> {
    let mut args = std::env::args().skip(1);
    let input = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/assets/sample_face.png").into());
    let out_dir = args.next().unwrap_or_else(|| "protected".into());
    std::fs::create_dir_all(&out_dir).expect("output directory");

    let bundle = init_models(7);
    let cfg = AttackConfig::default();
    let out = protect_file(input.as_ref(), &bundle, &cfg, out_dir.as_ref())?;

    let (first, last) = (out.report.initial, out.report.final_losses());
    println!("{:>8} {:>10} {:>10}", "loss", "start", "end");
    for (name, a, b) in [
        ("proj", first.proj, last.proj),
        ("attn", first.attn, last.attn),
        ("mtcnn", first.mtcnn, last.mtcnn),
        ("id", first.id, last.id),
        ("descent", first.objective, last.objective),
    ] {
        println!("{name:>8} {a:>10.5} {b:>10.5}");
    }
    let last_step = out
        .report
        .trace
        .last()
        .expect("default config runs 30 steps");
    println!(
        "steps {}  linf {:.5} (budget {:.5})",
        last_step.step, last_step.linf, cfg.eta
    );
    println!(
        "image {}\ntrace {}",
        out.image.display(),
        out.trace.display()
    );
    Ok(())
}
