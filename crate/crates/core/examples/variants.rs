//! Encoder and decoder shape of every model variant at its preset size.
//!
//! `cargo run --example variants`

use htenc::models::{build_model, ModelConfig, ModelVariant};

fn main() -> htenc::Result<()> {
    println!("{:<10} {:>3} {:>3} {:>3} {:>4} {:>3} {:>4} {:<9} {:>10}", "variant", "M", "N", "dec", "H", "A", "E", "scheme", "params");
    for v in ModelVariant::ALL {
        let cfg = ModelConfig::preset(v, 1505);
        let e = &cfg.encoder;
        let model = build_model(cfg.clone(), 0, false)?;
        println!(
            "{:<10} {:>3} {:>3} {:>3} {:>4} {:>3} {:>4} {:<9} {:>10}",
            v.name(),
            e.m_shared,
            e.n_context,
            cfg.decoder_layers,
            e.hidden,
            e.heads,
            e.embed,
            e.ct_scheme.name(),
            model.params.num_scalars()
        );
    }
    Ok(())
}
