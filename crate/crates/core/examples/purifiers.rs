//! Applies each purification simulator to the sample face and prints the
//! PSNR of the result against the input.

use advshield::metrics::psnr;
use advshield::purify::Purifier;
use advshield::synth::synth_face;

fn main() -> advshield::Result<()> {
    let x = synth_face(0, 64);
    let mut list = vec![Purifier::Identity];
    list.extend(Purifier::standard_grid());
    list.push("jpeg:10".parse()?);
    for p in list {
        let y = p.apply(&x)?;
        println!("{:<22} psnr {:>7.3}", p.to_string(), psnr(&x, &y)?);
    }
    Ok(())
}
