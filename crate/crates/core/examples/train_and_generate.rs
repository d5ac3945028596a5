//! End to end on a synthetic corpus: train a tiny HIER model, save and
//! reload the checkpoint, decode the validation dialogs and score them.
//!
//! `cargo run --release --example train_and_generate`

use htenc::checkpoint;
use htenc::cli::config::RunConfig;
use htenc::cli::{evaluate_records, generate_records};
use htenc::corpus::synth::{generate_synthetic_corpus, GrammarConfig};
use htenc::decoding::BeamConfig;
use htenc::models::ModelVariant;
use htenc::train::train;

fn main() -> htenc::Result<()> {
    let dialogs = generate_synthetic_corpus(1, 200, &GrammarConfig::default())?;
    let mut cfg = RunConfig::tiny(ModelVariant::Hier, 16);
    cfg.lr = 3e-3;
    cfg.batch_size = 8;
    cfg.epochs = 15;
    let out = train(&cfg, &dialogs, |e| {
        println!("epoch {:>2} train {:.4} valid {:.4}", e.epoch, e.train_loss, e.valid_loss.unwrap_or(f64::NAN))
    })?;

    let path = std::env::temp_dir().join("htenc-example.ckpt");
    checkpoint::save(&path, &out.model, &out.vocab, out.act_vocab.as_ref())?;
    let ck = checkpoint::load(&path)?;

    let records = generate_records(&ck, &out.valid_dialogs, &BeamConfig::default(), 4)?;
    println!("\n{}", records[0].hypotheses[0].tokens.join(" "));
    print!("\n{}", evaluate_records(&records, &out.valid_dialogs)?);
    Ok(())
}
