//! Turns a standard transformer encoder into a hierarchical one by
//! relabelling its layers. With the FULL scheme and no shared layers the
//! converted encoder computes exactly what the original did.
//!
//! `cargo run --example convert_encoder`

use htenc::autograd::Tape;
use htenc::encoder::{convert_standard_encoder, encode, StandardEncoderConfig};
use htenc::masking::{build_layout, CtScheme};
use htenc::params::ParameterStore;
use htenc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> htenc::Result<()> {
    let standard = StandardEncoderConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        embed: 8,
        ffn_inner: 16,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParameterStore::new();
    standard.init_params(&mut store, &mut rng)?;

    let layout = build_layout(&[3, 2, 4])?;
    let input = Tensor::matrix(layout.len(), 8, (0..layout.len() * 8).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let mut tape = Tape::new();
    let x = tape.constant(input.clone())?;
    let y = standard.forward(&mut tape, &store, x, None)?;
    let before = tape.value(y).clone();

    for (m, n, scheme) in [(0, 2, CtScheme::Full), (1, 1, CtScheme::Hier)] {
        let (cfg, converted) = convert_standard_encoder(&standard, store.clone(), m, n, scheme)?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone())?;
        let out = encode(&mut tape, &converted, &cfg, x, &layout)?;
        let after = tape.value(out.hidden);
        let dev = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("M={m} N={n} {scheme:<8} max |Δ| against the standard encoder = {dev:.3e}");
    }
    Ok(())
}
