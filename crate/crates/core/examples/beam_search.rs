//! Greedy and beam decoding over a fixed next-token table. Beam search
//! finds the sequence greedy decoding misses.
//!
//! `cargo run --example beam_search`

use htenc::corpus::EOS;
use htenc::decoding::{beam_search, greedy_decode, BeamConfig, StepModel};

/// Tokens 5 and 6 after SOS; greedy picks 5, whose continuation is flat.
struct Toy;

impl StepModel for Toy {
    fn vocab_size(&self) -> usize {
        7
    }

    fn log_probs(&self, prefix: &[usize]) -> htenc::Result<Vec<f64>> {
        let mut p = [1e-6; 7];
        match prefix {
            [_] => {
                p[5] = 0.55;
                p[6] = 0.45;
            }
            [_, 5] => p[5..7].fill(0.5),
            _ => p[EOS] = 1.0,
        }
        let z: f64 = p.iter().sum();
        Ok(p.iter().map(|x| (x / z).ln()).collect())
    }
}

fn main() -> htenc::Result<()> {
    let g = greedy_decode(&Toy, 5)?;
    println!("greedy  {:?} log p = {:.4}", g.tokens, g.log_prob);
    let cfg = BeamConfig {
        width: 3,
        max_len: 5,
        ..BeamConfig::default()
    };
    for h in beam_search(&Toy, &cfg)? {
        println!("beam    {:?} log p = {:.4}", h.tokens, h.log_prob);
    }
    Ok(())
}
