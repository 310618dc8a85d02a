//! Runs the decoder-level and encoder-skip ablation suites on a small
//! phantom set and prints the tables as CSV.
//!
//! cargo run --release --example ablation

use tetranet::arch::ModelConfig;
use tetranet::data::{generate_phantoms, Dataset, PhantomSpec};
use tetranet::train::{run_ablation, AblationSuite, TrainConfig, TrainOutput};

fn main() -> tetranet::Result<()> {
    let spec = PhantomSpec {
        dims: [8, 8, 8],
        field_amplitude: 1.0,
        field_smoothness: 2.0,
        seed: 1,
        ..Default::default()
    };
    let phantoms = generate_phantoms(&spec, 4)?;
    let data = Dataset::from_phantoms(&phantoms[..3], &phantoms[3..]);
    let base = ModelConfig::with_widths(&[3, 4]);
    let cfg = TrainConfig {
        epochs: 4,
        lr: 1e-3,
        ..Default::default()
    };
    let quiet = TrainOutput { dir: None, verbose: false };
    for suite in [AblationSuite::Levels, AblationSuite::EncSkips] {
        println!("# {suite:?}");
        run_ablation(suite, &data, &base, &cfg, &quiet)?.write_csv(std::io::stdout())?;
    }
    Ok(())
}
