//! The masked utterance phase equals encoding every utterance on its own.
//! A corrupted mask is reported as a large deviation.
//!
//! `cargo run --release --example hierarchical_equivalence`

use htenc::equiv::{run_equivalence, Fault};

fn main() -> htenc::Result<()> {
    let ok = run_equivalence(7, 50, Fault::None)?;
    println!("{} random cases, max |Δ| = {:.3e}", ok.cases, ok.max_deviation);
    let bad = run_equivalence(7, 50, Fault::LeakUtteranceMask)?;
    println!("leaky mask:     max |Δ| = {:.3e}", bad.max_deviation);
    Ok(())
}
