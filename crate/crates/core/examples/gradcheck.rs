//! Finite-difference checks of every differentiable operator and of the
//! full registration loss of a small network.
//!
//! cargo run --release --example gradcheck

use tetranet::gradcheck::{network_check, operator_suite, GradCheckConfig, NETWORK_STEP};

fn main() -> tetranet::Result<()> {
    let mut ok = true;
    for report in operator_suite(&GradCheckConfig::default())? {
        ok &= report.passed();
        println!("{report}");
    }
    let cfg = GradCheckConfig {
        step: NETWORK_STEP,
        tolerance: 1e-4,
        max_checks_per_input: Some(6),
        ..Default::default()
    };
    let net = network_check(8, &cfg)?;
    ok &= net.passed();
    println!("{net}");
    println!("{}", if ok { "all checks passed" } else { "some checks failed" });
    Ok(())
}
