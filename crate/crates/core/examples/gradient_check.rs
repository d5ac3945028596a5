//! Finite-difference gradient checks of every model variant at tiny size.
//!
//! `cargo run --release --example gradient_check`

use htenc::equiv::variant_gradcheck;
use htenc::models::ModelVariant;

fn main() -> htenc::Result<()> {
    for v in ModelVariant::ALL {
        let r = variant_gradcheck(v, 0, 50, 1e-5)?;
        println!("{:<10} max relative error {:.3e}", v.name(), r.max_rel_error);
    }
    Ok(())
}
