//! Space-time self-convergence of the 1D bar.
//!
//! Runs the driven bar on a hierarchy of meshes and time grids, doubling
//! both per level, and measures L2 errors at the final time against a much
//! finer reference run of the same problem. The observed rates for stress
//! and velocity sit near first order, matching the backward-Euler, P0/P1
//! discretization.

use rateplast::scenario::{convergence_study, ConvergenceConfig};

fn main() -> rateplast::Result<()> {
    // Desk-scale study; the shipped configs/converge.toml doubles everything
    // once more and uses a deeper reference.
    let cfg = ConvergenceConfig {
        base_space: 16,
        base_time: 10,
        levels: 3,
        reference_level: 5,
        ..ConvergenceConfig::default()
    };
    cfg.validate()?;

    let table = convergence_study(&cfg)?;
    print!("{}", table.csv());

    println!();
    for (i, rate) in table.rate_stress.iter().enumerate() {
        println!(
            "level {} -> {}: stress rate {:.2}, velocity rate {:.2}",
            i + 1,
            i + 2,
            rate,
            table.rate_velocity[i]
        );
    }
    Ok(())
}
