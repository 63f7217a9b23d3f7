//! Zero-dimensional integration of the scalar rate-type law
//!
//! ```text
//!   dsigma/dt = E [1 - H(sigma deps/dt) H_eps(sigma^2 - kappa^2)] deps/dt
//! ```
//!
//! together with the closed-form ideal elastic/perfectly-plastic response it
//! approaches as the gate sharpens. The oracle is the ground truth against
//! which the finite-element hysteresis runs are checked.

use crate::constitutive::{
    heaviside_reg, heaviside_reg_deriv, loading_gate, loading_gate_deriv, RegularizationConfig,
};
use crate::error::{Error, Result};

/// Piecewise-linear strain history `eps(t)` given by samples at strictly
/// increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct StrainPath {
    pub times: Vec<f64>,
    pub strains: Vec<f64>,
}

impl StrainPath {
    pub fn new(times: Vec<f64>, strains: Vec<f64>) -> Result<Self> {
        let path = StrainPath { times, strains };
        path.validate()?;
        Ok(path)
    }

    /// Sample `eps = f(t)` at `n_steps + 1` uniformly spaced times.
    pub fn sample<F: Fn(f64) -> f64>(f: F, t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t1 > t0) || n_steps == 0 {
            return Err(Error::invalid(format!(
                "strain path sampling needs t1 > t0 and at least one step, got [{t0}, {t1}] with {n_steps} steps"
            )));
        }
        let dt = (t1 - t0) / n_steps as f64;
        let times: Vec<f64> = (0..=n_steps).map(|i| t0 + i as f64 * dt).collect();
        let strains = times.iter().map(|&t| f(t)).collect();
        Self::new(times, strains)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.strains.len() {
            return Err(Error::invalid(format!(
                "strain path has {} times but {} strains",
                self.times.len(),
                self.strains.len()
            )));
        }
        if self.times.is_empty() {
            return Err(Error::invalid("strain path must contain at least one sample"));
        }
        for (i, w) in self.times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::invalid(format!(
                    "strain path times must be strictly increasing, violated at index {}",
                    i + 1
                )));
            }
        }
        if self.times.iter().chain(self.strains.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("strain path contains a non-finite value"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Instantaneous state of the material point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialPointState {
    pub sigma: f64,
    pub epsilon: f64,
}

impl MaterialPointState {
    pub fn new(sigma: f64, epsilon: f64) -> Result<Self> {
        if !sigma.is_finite() || !epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "material point state must be finite, got sigma = {sigma}, epsilon = {epsilon}"
            )));
        }
        Ok(MaterialPointState { sigma, epsilon })
    }

    /// Advance the state by one strain increment over `dt`.
    pub fn advance(
        &mut self,
        d_eps: f64,
        dt: f64,
        e_modulus: f64,
        kappa: f64,
        cfg: &RegularizationConfig,
    ) -> Result<()> {
        self.sigma = implicit_stress_update(self.sigma, d_eps, dt, e_modulus, kappa, cfg)?;
        self.epsilon += d_eps;
        Ok(())
    }
}

/// Implicit-Euler integration of the rate-type law along `path`, starting
/// from `sigma0`. Returns one stress per path sample (the first entry is
/// `sigma0` itself).
pub fn integrate_rate_law(
    path: &StrainPath,
    e_modulus: f64,
    kappa: f64,
    cfg: &RegularizationConfig,
    sigma0: f64,
) -> Result<Vec<f64>> {
    path.validate()?;
    cfg.validate()?;
    check_material(e_modulus, kappa)?;
    if !sigma0.is_finite() {
        return Err(Error::invalid(format!("initial stress must be finite, got {sigma0}")));
    }
    let mut out = Vec::with_capacity(path.len());
    out.push(sigma0);
    let mut sigma = sigma0;
    for i in 1..path.len() {
        let dt = path.times[i] - path.times[i - 1];
        let d_eps = path.strains[i] - path.strains[i - 1];
        sigma = implicit_stress_update(sigma, d_eps, dt, e_modulus, kappa, cfg)?;
        out.push(sigma);
    }
    Ok(out)
}

/// Exact sharp-gate evolution for a piecewise-monotone strain path: per
/// interval the stress follows Hooke's line and is clamped to [-kappa,
/// kappa]. Requires the start inside the elastic range.
pub fn ideal_elastoplastic_oracle(
    path: &StrainPath,
    e_modulus: f64,
    kappa: f64,
    sigma0: f64,
) -> Result<Vec<f64>> {
    path.validate()?;
    check_material(e_modulus, kappa)?;
    if !sigma0.is_finite() || sigma0.abs() > kappa {
        return Err(Error::invalid(format!(
            "initial stress {sigma0} lies outside the elastic range [-{kappa}, {kappa}]"
        )));
    }
    let mut out = Vec::with_capacity(path.len());
    out.push(sigma0);
    let mut sigma = sigma0;
    for w in path.strains.windows(2) {
        sigma = (sigma + e_modulus * (w[1] - w[0])).clamp(-kappa, kappa);
        out.push(sigma);
    }
    Ok(out)
}

/// Solve the scalar implicit-Euler update
///
/// ```text
///   s = sigma_old + E deps [1 - G(s deps/dt) H_eps(s^2 - kappa^2)]
/// ```
///
/// for the new stress `s`. The right-hand side is monotone in `s`, so the
/// root is bracketed by the old stress and the elastic trial
/// `sigma_old + E deps`; a Newton iteration safeguarded by bisection on that
/// bracket always converges.
pub fn implicit_stress_update(
    sigma_old: f64,
    d_eps: f64,
    dt: f64,
    e_modulus: f64,
    kappa: f64,
    cfg: &RegularizationConfig,
) -> Result<f64> {
    if d_eps == 0.0 {
        return Ok(sigma_old);
    }
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("time increment must be positive, got {dt}")));
    }
    let rate = d_eps / dt;
    let k2 = kappa * kappa;
    let elastic = e_modulus * d_eps;
    let residual = |s: f64| -> f64 {
        let g = loading_gate(cfg, s * rate);
        s - sigma_old - elastic * (1.0 - g * heaviside_reg(cfg.variant, s * s - k2, cfg.epsilon))
    };
    let slope = |s: f64| -> f64 {
        let y = s * s - k2;
        let g = loading_gate(cfg, s * rate);
        let gp = loading_gate_deriv(cfg, s * rate) * rate;
        let h = heaviside_reg(cfg.variant, y, cfg.epsilon);
        let hp = heaviside_reg_deriv(cfg.variant, y, cfg.epsilon) * 2.0 * s;
        1.0 + elastic * (gp * h + g * hp)
    };

    let trial = sigma_old + elastic;
    let (mut lo, mut hi) = if d_eps > 0.0 { (sigma_old, trial) } else { (trial, sigma_old) };
    let scale = 1.0_f64.max(sigma_old.abs()).max(trial.abs());
    let ftol = 1e-12 * scale;

    let flo = residual(lo);
    let fhi = residual(hi);
    if flo.abs() <= ftol {
        return Ok(lo);
    }
    if fhi.abs() <= ftol {
        return Ok(hi);
    }
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::Numerical(format!(
            "stress update lost its bracket: f({lo}) = {flo}, f({hi}) = {fhi}"
        )));
    }

    let mut x = trial;
    let mut f = if d_eps > 0.0 { fhi } else { flo };
    for _ in 0..200 {
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= f64::EPSILON * scale {
            // The bracket has collapsed to machine precision. With a sharp
            // loading gate the residual can jump across zero (the update has
            // no exact root there); the collapse point is the generalized
            // solution.
            return Ok(0.5 * (lo + hi));
        }
        let fp = slope(x);
        let newton = x - f / fp;
        x = if fp > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        f = residual(x);
        if f.abs() <= ftol {
            return Ok(x);
        }
    }
    Err(Error::Numerical(format!(
        "stress update did not converge: bracket [{lo}, {hi}], residual {f}"
    )))
}

fn check_material(e_modulus: f64, kappa: f64) -> Result<()> {
    if !(e_modulus > 0.0) || !e_modulus.is_finite() {
        return Err(Error::invalid(format!("Young's modulus must be positive, got {e_modulus}")));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::invalid(format!("yield stress must be positive, got {kappa}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::RegularizationVariant;
    use crate::scenario::bump;
    use proptest::prelude::*;

    const E: f64 = 1e4;
    const KAPPA: f64 = 80.0;

    fn sqrt_cfg(eps: f64) -> RegularizationConfig {
        RegularizationConfig::new(RegularizationVariant::Sqrt, eps)
    }

    fn ramp_path(target: f64, n: usize) -> StrainPath {
        StrainPath::sample(|t| target * t, 0.0, 1.0, n).unwrap()
    }

    fn bump_path(amplitude: f64, n: usize) -> StrainPath {
        StrainPath::sample(|t| bump(t, amplitude), 0.0, 1.0, n).unwrap()
    }

    #[test]
    fn path_validation_rejects_bad_data() {
        assert!(StrainPath::new(vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(StrainPath::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(StrainPath::new(vec![0.0, -1.0], vec![0.0, 1.0]).is_err());
        assert!(StrainPath::new(vec![0.0, 1.0], vec![0.0, f64::NAN]).is_err());
        assert!(StrainPath::new(vec![], vec![]).is_err());
        assert!(StrainPath::new(vec![0.0, 1.0], vec![0.0, 0.5]).is_ok());
    }

    #[test]
    fn zero_strain_path_keeps_stress() {
        let path = StrainPath::new(vec![0.0, 0.5, 2.0], vec![0.03, 0.03, 0.03]).unwrap();
        let sig = integrate_rate_law(&path, E, KAPPA, &sqrt_cfg(6.4), 42.0).unwrap();
        assert_eq!(sig, vec![42.0, 42.0, 42.0]);
        let ora = ideal_elastoplastic_oracle(&path, E, KAPPA, 42.0).unwrap();
        assert_eq!(ora, vec![42.0, 42.0, 42.0]);
    }

    #[test]
    fn elastic_regime_follows_hooke_line() {
        // kappa so large the gate never opens: pure Hooke response
        let kappa = 1e7;
        let path = ramp_path(0.2, 1000);
        let cfg = sqrt_cfg(1e-3 * kappa * kappa);
        let sig = integrate_rate_law(&path, E, kappa, &cfg, 0.0).unwrap();
        for (s, eps) in sig.iter().zip(&path.strains) {
            assert!((s - E * eps).abs() < 0.01, "sigma {s} vs Hooke {}", E * eps);
        }
        assert!((sig.last().unwrap() - 2000.0).abs() < 0.01);
    }

    #[test]
    fn monotone_loading_saturates_at_yield() {
        let path = ramp_path(0.2, 4000);
        let mut overshoots = Vec::new();
        for eps in [6.4, 1.6, 0.4] {
            let sig = integrate_rate_law(&path, E, KAPPA, &sqrt_cfg(eps), 0.0).unwrap();
            let terminal = *sig.last().unwrap();
            assert!(terminal >= KAPPA - 1e-9, "eps {eps}: terminal {terminal}");
            assert!(terminal <= KAPPA + 2.0, "eps {eps}: terminal {terminal}");
            overshoots.push(terminal - KAPPA);
        }
        // overshoot shrinks as the regularization sharpens
        assert!(overshoots[1] <= overshoots[0] + 1e-12);
        assert!(overshoots[2] <= overshoots[1] + 1e-12);
    }

    #[test]
    fn tanh_variant_overshoots_least() {
        let path = bump_path(0.2, 2000);
        let mut max_abs = |variant: RegularizationVariant| -> f64 {
            let cfg = RegularizationConfig::new(variant, 1e-3 * KAPPA * KAPPA);
            integrate_rate_law(&path, E, KAPPA, &cfg, 0.0)
                .unwrap()
                .iter()
                .fold(0.0, |m, s| s.abs().max(m))
        };
        let sqrt = max_abs(RegularizationVariant::Sqrt);
        let tanh = max_abs(RegularizationVariant::Tanh);
        let atan = max_abs(RegularizationVariant::Atan);
        assert!(sqrt >= KAPPA && tanh >= KAPPA && atan >= KAPPA);
        assert!(tanh <= sqrt + 1e-12, "tanh {tanh} vs sqrt {sqrt}");
        assert!(tanh <= atan + 1e-12, "tanh {tanh} vs atan {atan}");
    }

    #[test]
    fn oracle_clamps_then_unloads_elastically() {
        let path =
            StrainPath::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.02, 0.019]).unwrap();
        let sig = ideal_elastoplastic_oracle(&path, E, KAPPA, 0.0).unwrap();
        assert_eq!(sig[1], KAPPA); // trial 200 clamped to the yield stress
        assert!((sig[2] - (KAPPA - E * 0.001)).abs() < 1e-10); // elastic unloading slope E
        assert!(ideal_elastoplastic_oracle(&path, E, KAPPA, 90.0).is_err());
        assert!(ideal_elastoplastic_oracle(&path, E, KAPPA, -90.0).is_err());
    }

    #[test]
    fn sharp_integrator_is_rate_independent() {
        let path = bump_path(0.03, 400);
        let slowed = StrainPath::new(
            path.times.iter().map(|t| 7.25 * t).collect(),
            path.strains.clone(),
        )
        .unwrap();
        let fast = integrate_rate_law(&path, E, KAPPA, &sqrt_cfg(6.4), 0.0).unwrap();
        let slow = integrate_rate_law(&slowed, E, KAPPA, &sqrt_cfg(6.4), 0.0).unwrap();
        assert_eq!(fast, slow); // the sharp gate only sees the sign of the rate
    }

    #[test]
    fn oracle_is_rate_independent() {
        let path = bump_path(0.05, 300);
        let slowed = StrainPath::new(
            path.times.iter().map(|t| 0.1 + 3.0 * t).collect(),
            path.strains.clone(),
        )
        .unwrap();
        assert_eq!(
            ideal_elastoplastic_oracle(&path, E, KAPPA, 10.0).unwrap(),
            ideal_elastoplastic_oracle(&slowed, E, KAPPA, 10.0).unwrap()
        );
    }

    #[test]
    fn integrator_converges_to_oracle_on_the_bump_cycle() {
        // halve (eps, dt) together: sup-norm distance to the oracle halves
        // within a factor in [1.5, 3]
        let mut errors = Vec::new();
        for level in 0..3 {
            let n = 1000 << level;
            let eps = 6.4 / (1 << level) as f64;
            let path = bump_path(0.2, n);
            let sig = integrate_rate_law(&path, E, KAPPA, &sqrt_cfg(eps), 0.0).unwrap();
            let ora = ideal_elastoplastic_oracle(&path, E, KAPPA, 0.0).unwrap();
            let err = sig
                .iter()
                .zip(&ora)
                .fold(0.0_f64, |m, (s, o)| (s - o).abs().max(m));
            errors.push(err);
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.5..=3.0).contains(&ratio), "errors {errors:?}, ratio {ratio}");
        }
    }

    #[test]
    fn sub_yield_cycle_closes() {
        // strain excursion stays below the yield strain kappa/E = 0.008
        let cycle = |t: f64| 0.005 * (std::f64::consts::TAU * t).sin();
        let path = StrainPath::sample(cycle, 0.0, 1.0, 1000).unwrap();
        let sig = integrate_rate_law(&path, E, KAPPA, &sqrt_cfg(6.4), 0.0).unwrap();
        assert!(sig.last().unwrap().abs() < 0.01, "residual stress {}", sig.last().unwrap());
    }

    #[test]
    fn plastic_cycles_stabilize() {
        // two identical full load/reverse cycles: the integrator returns to
        // the same stress after each, up to the regularization overshoot
        let a = 0.015;
        let cycle = |t: f64| a * (std::f64::consts::TAU * t).sin();
        let two = StrainPath::sample(cycle, 0.0, 2.0, 4000).unwrap();
        let sig = integrate_rate_law(&two, E, KAPPA, &sqrt_cfg(6.4), 0.0).unwrap();
        let mid = sig[2000];
        let end = sig[4000];
        assert!((mid - end).abs() < 1.0, "cycle ends {mid} vs {end}");
        let ora = ideal_elastoplastic_oracle(&two, E, KAPPA, 0.0).unwrap();
        assert!((ora[2000] - ora[4000]).abs() < 1e-9);
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let path = ramp_path(0.01, 10);
        let cfg = sqrt_cfg(6.4);
        assert!(integrate_rate_law(&path, -1.0, KAPPA, &cfg, 0.0).is_err());
        assert!(integrate_rate_law(&path, E, 0.0, &cfg, 0.0).is_err());
        assert!(integrate_rate_law(&path, E, KAPPA, &cfg, f64::NAN).is_err());
        assert!(integrate_rate_law(&path, E, KAPPA, &sqrt_cfg(-1.0), 0.0).is_err());
    }

    #[test]
    fn eta_regularized_gate_still_tracks_the_oracle() {
        let mut cfg = sqrt_cfg(0.64);
        cfg.eta = 1e-3;
        let path = bump_path(0.2, 4000);
        let sig = integrate_rate_law(&path, E, KAPPA, &cfg, 0.0).unwrap();
        let ora = ideal_elastoplastic_oracle(&path, E, KAPPA, 0.0).unwrap();
        let err = sig
            .iter()
            .zip(&ora)
            .fold(0.0_f64, |m, (s, o)| (s - o).abs().max(m));
        assert!(err < 2.0, "sup error {err}");
    }

    proptest! {
        #[test]
        fn monotone_loading_is_monotone_and_hooke_bounded(
            target in 1e-4_f64..0.3,
            n in 3_usize..60,
            eps in 0.05_f64..50.0,
        ) {
            let path = ramp_path(target, n);
            let sig = integrate_rate_law(&path, E, KAPPA, &sqrt_cfg(eps), 0.0).unwrap();
            for (w, e) in sig.windows(2).zip(path.strains.windows(2)) {
                prop_assert!(w[1] >= w[0] - 1e-12);
                // each increment is at most the elastic one
                prop_assert!(w[1] - w[0] <= E * (e[1] - e[0]) + 1e-9);
            }
        }

        #[test]
        fn oracle_never_leaves_the_elastic_range(
            amp in 0.0_f64..0.05,
            phase in 0.0_f64..1.0,
            sigma0 in -80.0_f64..80.0,
        ) {
            let f = |t: f64| amp * (std::f64::consts::TAU * (t + phase)).sin();
            let path = StrainPath::sample(f, 0.0, 1.0, 97).unwrap();
            let sig = ideal_elastoplastic_oracle(&path, E, KAPPA, sigma0).unwrap();
            for s in sig {
                prop_assert!(s.abs() <= KAPPA + 1e-12);
            }
        }
    }
}
