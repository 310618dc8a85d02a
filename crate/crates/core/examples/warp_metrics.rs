//! Warps images and label maps with analytic fields and reports overlap
//! and folding.
//!
//! cargo run --release --example warp_metrics

use tetranet::data::{LabelMap, Volume};
use tetranet::metrics::{jacobian_nonpositive_fraction, mean_dice, MetricReport};
use tetranet::warp::{warp_labels, warp_volume, DeformationField};

fn main() -> tetranet::Result<()> {
    let dims = [24, 24, 24];
    let c = 11.5;
    let ball = |p: [usize; 3], r: f64| p.iter().map(|&x| (x as f64 - c).powi(2)).sum::<f64>() < r * r;
    let labels = LabelMap::new(
        dims,
        (0..24 * 24 * 24)
            .map(|i| {
                let p = [i / 576, (i / 24) % 24, i % 24];
                if ball(p, 5.0) {
                    2
                } else if ball(p, 9.0) {
                    1
                } else {
                    0
                }
            })
            .collect(),
    )?;
    let image = Volume::from_fn(dims, |p| if ball(p, 9.0) { 1.0 } else { 0.0 });

    // A sub-voxel translation and a gentle bulge.
    let shift = DeformationField::from_fn(dims, |_| [0.0, 1.5, -0.5]);
    let bulge = DeformationField::from_fn(dims, |p| {
        let d = p.map(|x| x as f64 - c);
        let s = 0.8 * (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / 50.0).exp();
        d.map(|x| -s * x / 4.0)
    });
    for (name, field) in [("shift", &shift), ("bulge", &bulge)] {
        let warped = warp_labels(&labels, field)?;
        let report = MetricReport::compute(&labels, &warped, field)?;
        let moved = warp_volume(&image, field)?;
        let mass: f64 = moved.data.iter().sum::<f64>() / image.data.iter().sum::<f64>();
        println!(
            "{name}: mean dice {:.4}, folding fraction {}, relative intensity mass {mass:.4}",
            report.mean_dice, report.nonpositive_jacobian_fraction
        );
    }

    let fold = DeformationField::from_fn(dims, |p| [-1.5 * p[0] as f64, 0.0, 0.0]);
    println!("compressive fold: folding fraction {}", jacobian_nonpositive_fraction(&fold, None)?);
    println!("identity: mean dice {}", mean_dice(&labels, &warp_labels(&labels, &DeformationField::zeros(dims))?)?.mean);
    Ok(())
}
