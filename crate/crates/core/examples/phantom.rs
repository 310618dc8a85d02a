//! Generates one synthetic phantom pair, writes it to disk and checks that
//! the ground-truth field registers it.
//!
//! cargo run --release --example phantom [OUT_DIR]

use std::path::PathBuf;

use tetranet::data::{generate_phantom, PhantomSpec};
use tetranet::metrics::{jacobian_nonpositive_fraction, mean_dice};
use tetranet::warp::warp_labels;

fn main() -> tetranet::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tetranet-phantom"));
    let spec = PhantomSpec {
        seed: 7,
        ..Default::default()
    };
    let p = generate_phantom(&spec)?;
    std::fs::create_dir_all(&out).map_err(|e| tetranet::Error::io(&out, e))?;
    p.fixed.write(&out.join("fixed"))?;
    p.moving.write(&out.join("moving"))?;
    p.fixed_labels.write(&out.join("fixed_labels"))?;
    p.moving_labels.write(&out.join("moving_labels"))?;
    p.true_field.write(&out.join("true_field"))?;

    let before = mean_dice(&p.fixed_labels, &p.moving_labels)?.mean;
    let after = mean_dice(&p.fixed_labels, &warp_labels(&p.moving_labels, &p.true_field)?)?.mean;
    println!("dims {:?}, largest displacement {:.3} voxels", spec.dims, p.true_field.max_abs());
    println!("folding fraction of true field: {}", jacobian_nonpositive_fraction(&p.true_field, None)?);
    println!("mean dice: unregistered {before:.4}, warped by true field {after:.4}");
    println!("wrote {}", out.display());
    Ok(())
}
