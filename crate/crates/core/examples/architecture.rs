//! Builds every second-level decoder variant at one to four decoder levels
//! and prints parameter counts and the stage wiring of a two-level model.
//!
//! cargo run --release --example architecture

use tetranet::arch::{build_model, wiring, Dec2Variant, ModelConfig};
use tetranet::data::Volume;

fn main() -> tetranet::Result<()> {
    let widths = [8, 16, 16, 32];
    let fixed = Volume::from_fn([16; 3], |p| (p[0] * p[1] % 7) as f64 / 7.0).to_tensor();
    let moving = Volume::from_fn([16; 3], |p| (p[1] * p[2] % 5) as f64 / 5.0).to_tensor();
    println!("{:<10} {:>10} {:>10} {:>10} {:>10}", "variant", "levels 1", "levels 2", "levels 3", "levels 4");
    for variant in Dec2Variant::ALL {
        let mut row = format!("{:<10}", variant.name());
        for levels in 1..=4 {
            let cfg = ModelConfig {
                decoder_levels: levels,
                dec2_variant: variant,
                ..ModelConfig::with_widths(&widths)
            };
            let net = build_model(&cfg, 0)?;
            assert_eq!(net.predict(&fixed, &moving)?.shape(), [1, 3, 16, 16, 16]);
            row += &format!(" {:>10}", net.param_count());
        }
        println!("{row}");
    }

    for variant in Dec2Variant::ALL {
        let cfg = ModelConfig {
            decoder_levels: 2,
            dec2_variant: variant,
            ..ModelConfig::with_widths(&widths)
        };
        println!("\n{} second level:", variant.name());
        for s in &wiring(&cfg)?.levels[1] {
            let fused: Vec<String> = s.fused.iter().map(|e| format!("{:?}", e.source)).collect();
            let direct: Vec<String> = s.direct.iter().map(|e| format!("{:?}", e.source)).collect();
            println!(
                "  stage {} scale {}: fused [{}] direct [{}] -> {} channels",
                s.stage,
                s.scale,
                fused.join(", "),
                direct.join(", "),
                s.out_channels
            );
        }
    }
    Ok(())
}
