//! The 8×8 DCT low-pass codec: which coefficients it keeps, and how it
//! splits the energy of random noise.

use advshield::noise::PerturbationCodec;
use advshield::synth::uniform_noise;

fn main() -> advshield::Result<()> {
    let codec = PerturbationCodec::default();
    println!("kept coefficients ({} of 64):", codec.kept_count());
    for u in 0..8 {
        let row: String = (0..8)
            .map(|v| if codec.keeps(u, v) { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }
    let noise = uniform_noise(0, &[3, 32, 32], 0.05);
    let (low, high) = codec.band_energies(&noise)?;
    let filtered = codec.low_pass_filter(&noise)?;
    let (flow, fhigh) = codec.band_energies(&filtered)?;
    println!("noise    low {low:.4}  high {high:.4}");
    println!("filtered low {flow:.4}  high {fhigh:.2e}");
    Ok(())
}
