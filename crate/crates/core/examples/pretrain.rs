//! Two-stage training: a one-level network first, then the two-level
//! network started from its encoder and first decoder.
//!
//! cargo run --release --example pretrain

use tetranet::arch::ModelConfig;
use tetranet::data::{generate_phantoms, Dataset, PhantomSpec};
use tetranet::train::{evaluate, pretrain_then_extend, TrainConfig, TrainOutput};

fn main() -> tetranet::Result<()> {
    let spec = PhantomSpec {
        dims: [16, 16, 16],
        field_amplitude: 2.0,
        field_smoothness: 3.0,
        seed: 5,
        ..Default::default()
    };
    let phantoms = generate_phantoms(&spec, 5)?;
    let data = Dataset::from_phantoms(&phantoms[..4], &phantoms[4..]);
    let model = ModelConfig {
        decoder_levels: 2,
        ..ModelConfig::with_widths(&[4, 8, 8])
    };
    let cfg = TrainConfig {
        epochs: 8,
        pretrain_epochs: Some(6),
        lr: 1e-3,
        ..Default::default()
    };
    let r = pretrain_then_extend(&data, &model, &cfg, &TrainOutput { dir: None, verbose: true })?;
    let stage1 = evaluate(&r.stage1.model, &data.val)?;
    let stage2 = evaluate(&r.stage2.model, &data.val)?;
    println!("unregistered dice       {:.4}", stage1.dice_before);
    println!("stage 1 (one level)     {:.4}", stage1.dice_after);
    println!("fresh two-level model   {:.4}", r.untrained.dice_after);
    println!("after weight transfer   {:.4}", r.stage2_start.dice_after);
    println!("stage 2 (two levels)    {:.4}", stage2.dice_after);
    Ok(())
}
