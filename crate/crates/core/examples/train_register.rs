//! Trains a small two-level network on 16³ phantoms, saves a checkpoint,
//! reloads it and registers a held-out pair.
//!
//! cargo run --release --example train_register [OUT_DIR]

use std::path::PathBuf;

use tetranet::arch::ModelConfig;
use tetranet::data::{generate_phantoms, Dataset, PhantomSpec};
use tetranet::metrics::MetricReport;
use tetranet::train::{evaluate, Checkpoint, TrainConfig, TrainOutput, Trainer};
use tetranet::warp::{warp_labels, warp_volume, DeformationField};

fn main() -> tetranet::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tetranet-train"));
    let spec = PhantomSpec {
        dims: [16, 16, 16],
        field_amplitude: 3.0,
        field_smoothness: 3.0,
        seed: 3,
        ..Default::default()
    };
    let phantoms = generate_phantoms(&spec, 6)?;
    let data = Dataset::from_phantoms(&phantoms[..5], &phantoms[5..]);

    let model = ModelConfig {
        decoder_levels: 2,
        ..ModelConfig::with_widths(&[4, 8, 8])
    };
    let cfg = TrainConfig {
        epochs: 30,
        lr: 3e-3,
        val_every: 10,
        ..Default::default()
    };
    let mut trainer = Trainer::from_configs(&model, &cfg)?;
    trainer.train(&data, &TrainOutput { dir: Some(out.clone()), verbose: true })?;

    let net = Checkpoint::load(&out.join("final"))?.model()?;
    let pair = &data.val[0];
    let field = DeformationField::from_tensor(&net.predict(&pair.fixed.to_tensor(), &pair.moving.to_tensor())?)?;
    let warped = warp_volume(&pair.moving, &field)?;
    warped.write(&out.join("warped"))?;
    field.write(&out.join("field"))?;
    let (fl, ml) = (pair.fixed_labels.as_ref().unwrap(), pair.moving_labels.as_ref().unwrap());
    let report = MetricReport::compute(fl, &warp_labels(ml, &field)?, &field)?;
    let e = evaluate(&net, &data.val)?;
    println!("held-out pair: dice {:.4} -> {:.4}, folding fraction {}", e.dice_before, report.mean_dice, report.nonpositive_jacobian_fraction);
    println!("checkpoint and outputs in {}", out.display());
    Ok(())
}
