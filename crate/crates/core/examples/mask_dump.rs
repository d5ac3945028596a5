//! Utterance layout, UT-Mask and the three CT-Mask schemes for a small
//! context.
//!
//! `cargo run --example mask_dump`

use htenc::masking::{build_ct_mask, build_layout, build_ut_mask, CtScheme};

fn main() -> htenc::Result<()> {
    let layout = build_layout(&[2, 3, 1])?;
    println!("utterance index {:?}", layout.utterance_index());
    println!("local position  {:?}", layout.local_position());
    println!("\nUT-Mask\n{}", build_ut_mask(&layout));
    for scheme in [CtScheme::Hier, CtScheme::HierCls, CtScheme::Full] {
        println!("CT-Mask {scheme}\n{}", build_ct_mask(&layout, scheme)?);
    }
    Ok(())
}
