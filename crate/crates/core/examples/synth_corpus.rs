//! Generates a small synthetic corpus and prints one dialog.
//!
//! `cargo run --example synth_corpus`

use htenc::corpus::synth::{generate_synthetic_corpus, GrammarConfig};
use htenc::corpus::build_vocab;

fn main() -> htenc::Result<()> {
    let dialogs = generate_synthetic_corpus(3, 50, &GrammarConfig::default())?;
    let vocab = build_vocab(&dialogs, 1505)?;
    println!("{} dialogs, vocabulary {}", dialogs.len(), vocab.len());
    let d = &dialogs[0];
    println!("\n{}", d.id);
    for t in &d.turns {
        println!("{:>4}: {}", format!("{:?}", t.spk).to_lowercase(), t.text.join(" "));
        if let Some(b) = &t.belief {
            println!("      belief {}", b.join(" "));
        }
    }
    println!("goal entities {:?}", d.goal_entities());
    println!("requested     {:?}", d.requested());
    Ok(())
}
