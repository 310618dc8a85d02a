//! Exports axial slices of a phantom with the deformed grid of its true
//! field overlaid, as PGM images.
//!
//! cargo run --release --example slices [OUT_DIR]

use std::path::PathBuf;

use tetranet::cli::write_slices;
use tetranet::data::{generate_phantom, PhantomSpec};

fn main() -> tetranet::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tetranet-slices"));
    let p = generate_phantom(&PhantomSpec {
        seed: 2,
        ..Default::default()
    })?;
    let n = write_slices(&p.moving, Some(&p.true_field), 0, 4, &out)?;
    println!("wrote {n} slices and grids to {}", out.display());
    Ok(())
}
