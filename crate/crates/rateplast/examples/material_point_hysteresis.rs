//! Single material point driven through a closed strain cycle.
//!
//! Integrates the rate law under each regularized gate profile and compares
//! the stress path against the ideal elastic-perfectly-plastic response. The
//! smoothed gates overshoot the yield stress by an amount controlled by the
//! width; the tanh profile violates the bound the least.

use rateplast::constitutive::{RegularizationConfig, RegularizationVariant};
use rateplast::material_point::{ideal_elastoplastic_oracle, integrate_rate_law, StrainPath};
use rateplast::scenario::bump;

fn main() -> rateplast::Result<()> {
    let e_modulus = 1e4;
    let kappa = 80.0;
    let amplitude = 0.2;
    let n_steps = 10_000;

    let path = StrainPath::sample(|t| bump(t, amplitude), 0.0, 1.0, n_steps)?;
    let ideal = ideal_elastoplastic_oracle(&path, e_modulus, kappa, 0.0)?;

    println!("strain cycle: eps(t) = bump(t) * {amplitude}, {n_steps} steps");
    println!("yield stress kappa = {kappa}, Young modulus E = {e_modulus}");
    println!();
    println!("{:<8} {:>10} {:>14} {:>16}", "variant", "epsilon", "peak stress", "sup |sigma-ideal|");

    for variant in [
        RegularizationVariant::Sqrt,
        RegularizationVariant::Tanh,
        RegularizationVariant::Atan,
    ] {
        for epsilon in [100.0, 10.0, 1.0] {
            let cfg = RegularizationConfig::new(variant, epsilon);
            let sigma = integrate_rate_law(&path, e_modulus, kappa, &cfg, 0.0)?;
            let peak = sigma.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
            let sup = sigma
                .iter()
                .zip(&ideal)
                .map(|(s, i)| (s - i).abs())
                .fold(0.0_f64, f64::max);
            println!("{:<8} {:>10} {:>14.4} {:>16.4}", format!("{variant:?}"), epsilon, peak, sup);
        }
    }

    println!();
    println!("overshoot above kappa shrinks with the width; at any fixed width the");
    println!("tanh profile stays closest to the ideal path.");
    Ok(())
}
