use std::time::Instant;

use rateplast::constitutive::{RegularizationVariant as V};
use rateplast::material_point::{ideal_elastoplastic_oracle, integrate_rate_law, StrainPath};
use rateplast::mesh::build_plate_with_hole;
use rateplast::scenario::*;

fn bar(kappa: f64, variant: V, eps: f64, tau: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::bar1d();
    cfg.mesh.n_cells = 256;
    cfg.material.kappa_star = kappa;
    cfg.regularization.variant = variant;
    cfg.regularization.epsilon = eps;
    cfg.time = TimeSettings { tau, t_end: 1.0 };
    cfg
}

fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in pts {
        sx += x; sy += y; sxx += x * x; sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn unloading_slope(s: &RunSummary, kappa: f64) -> (f64, usize) {
    let pts: Vec<(f64, f64)> = s.probe.iter()
        .filter(|r| r.t > 0.5 && r.stress.abs() <= 0.7 * kappa)
        .map(|r| (r.strain, r.stress))
        .collect();
    (fit_slope(&pts), pts.len())
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let want = |s: &str| args.is_empty() || args.iter().any(|a| a == s);

    if want("c6") {
        let t0 = Instant::now();
        let cfg6 = ConvergenceConfig::default();
        let table = convergence_study(&cfg6).unwrap();
        println!("c6 plastic (kappa=70 eps=200):\n{}  [{:?}]", table.csv(), t0.elapsed());
        let t0 = Instant::now();
        let mut cfg6e = ConvergenceConfig::default();
        cfg6e.material.kappa_star = 1e7;
        let te = convergence_study(&cfg6e).unwrap();
        println!("c6 elastic control:\n{}  [{:?}]", te.csv(), t0.elapsed());
    }

    if want("c1") {
        let t0 = Instant::now();
        let s = run_1d_bar(&bar(1e7, V::Sqrt, 10.0, 5e-4)).unwrap();
        let pts: Vec<(f64, f64)> = s.probe.iter().map(|r| (r.strain, r.stress)).collect();
        println!("c1: slope={:.2} peak={:.4} t_peak={} final={:.3e} [{:?}]",
            fit_slope(&pts), s.peak_max_abs_stress, s.t_at_peak, s.final_max_abs_stress, t0.elapsed());
    }

    if want("c2") {
        let mut overshoots = Vec::new();
        for (v, eps) in [(V::Sqrt, 10.0), (V::Sqrt, 100.0), (V::Sqrt, 200.0), (V::Tanh, 100.0)] {
            let t0 = Instant::now();
            let s = run_1d_bar(&bar(80.0, v, eps, 5e-4)).unwrap();
            let load_max = s.probe.iter().filter(|r| r.t <= 0.5 + 2.5e-4)
                .map(|r| r.max_abs_stress).fold(0.0_f64, f64::max);
            let (slope, npts) = unloading_slope(&s, 80.0);
            println!("c2 {v:?} eps={eps}: load_max={load_max:.4} overshoot={:.4} unload_slope={slope:.2} ({npts} pts) newton_tot={} max_iter={} [{:?}]",
                load_max - 80.0, s.total_newton_iterations, s.max_step_iterations, t0.elapsed());
            overshoots.push(load_max - 80.0);
        }
        println!("c2 ordering 10<100<200: {} {} ; tanh<=sqrt@100: {}",
            overshoots[0] < overshoots[1], overshoots[1] < overshoots[2], overshoots[3] <= overshoots[1]);
    }

    if want("c3") {
        let t0 = Instant::now();
        let eps3 = 1e-3 * 80.0_f64 * 80.0;
        let path = StrainPath::sample(|t| bump(t, 0.2), 0.0, 1.0, 10_000).unwrap();
        let cfg3 = rateplast::constitutive::RegularizationConfig::new(V::Tanh, eps3);
        let mp = integrate_rate_law(&path, 1e4, 80.0, &cfg3, 0.0).unwrap();
        let or = ideal_elastoplastic_oracle(&path, 1e4, 80.0, 0.0).unwrap();
        let sup_mp = mp.iter().zip(&or).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
        let s = run_1d_bar(&bar(80.0, V::Tanh, eps3, 5e-4)).unwrap();
        let fem_path = StrainPath::new(
            s.probe.iter().map(|r| r.t).collect(),
            s.probe.iter().map(|r| r.strain).collect()).unwrap();
        let or_fem = ideal_elastoplastic_oracle(&fem_path, 1e4, 80.0, 0.0).unwrap();
        let sup_fem = s.probe.iter().zip(&or_fem).map(|(r, b)| (r.stress - b).abs()).fold(0.0_f64, f64::max);
        println!("c3: sup_mp={:.4} ({:.3}% kappa) sup_fem={:.4} ({:.3}% kappa) [{:?}]",
            sup_mp, 100.0 * sup_mp / 80.0, sup_fem, 100.0 * sup_fem / 80.0, t0.elapsed());
    }

    if want("c4") {
        // ---- c4 + c7: plastic plate r=1 and elastic plate r=1
        let t0 = Instant::now();
        let mut pc = ScenarioConfig::plate2d();
        pc.mesh.refinement = 1;
        pc.time = TimeSettings { tau: 5e-4, t_end: 1.0 };
        let sp = run_2d_plate(&pc).unwrap();
        println!("c4 plastic plate: balance_ratio={:.3e} running={:.3e} peak_E={:.4} n_steps={} newton_tot={} max_iter={} [{:?}]",
            sp.max_balance_ratio, sp.max_balance_ratio_running, sp.peak_total_energy,
            sp.n_steps, sp.total_newton_iterations, sp.max_step_iterations, t0.elapsed());
        println!("c4 eta_accepted: {} steps, max width {:.3e}",
            sp.eta_accepted_steps.len(), sp.max_eta_accepted);

        // conditioned running ratio: ignore steps before the running peak
        // reaches 1e-3 of the final peak
        let tau = 5e-4;
        let mut running = 0.0_f64;
        let mut cond = 0.0_f64;
        for e in &sp.energy {
            running = running.max(e.e_kin + e.e_int + e.e_th);
            if running >= 1e-3 * sp.peak_total_energy {
                cond = cond.max(e.balance_residual.abs() * tau / running);
            }
        }
        println!("c4 conditioned running ratio (>=1e-3 peak): {cond:.3e}");

        let mesh = build_plate_with_hole(1.0, 1.0, 0.3, 0.5, 1).unwrap();
        let active: Vec<usize> = (0..mesh.n_cells()).filter(|&k| sp.max_gate_loading[k] >= 0.5).collect();
        println!("c7a: {} active cells of {}", active.len(), mesh.n_cells());
        let mut max_ay = 0.0_f64; let mut min_ax = f64::INFINITY; let mut max_ax = 0.0_f64;
        for &k in &active {
            let c = mesh.cell_centroid(k);
            max_ay = max_ay.max(c[1].abs());
            min_ax = min_ax.min(c[0].abs());
            max_ax = max_ax.max(c[0].abs());
        }
        println!("c7a: active |y| <= {max_ay:.4}, |x| in [{min_ax:.4}, {max_ax:.4}] (hole a=0.3, plate half 0.5)");
        // distance of active centroids to the hole boundary (ellipse sampled)
        let mut max_d = 0.0_f64;
        for &k in &active {
            let c = mesh.cell_centroid(k);
            let mut d = f64::INFINITY;
            for i in 0..2000 {
                let th = std::f64::consts::PI * 2.0 * i as f64 / 2000.0;
                let (ex, ey) = (0.3 * th.cos(), 0.5 * th.sin());
                d = d.min(((c[0] - ex).powi(2) + (c[1] - ey).powi(2)).sqrt());
            }
            max_d = max_d.max(d);
        }
        println!("c7a: max centroid distance to hole = {max_d:.4} (h={:.4})", 0.1166);

        println!("c7 plastic: final_max_strain={:.5} min_T={:.3e} max_T={:.3e}", sp.final_max_strain, sp.min_temperature, sp.max_temperature);
        // heating at 0.54 vs running max
        let mut run_max = 0.0_f64; let mut at_054 = f64::NAN;
        for h in &sp.heat_source {
            run_max = run_max.max(h.total);
            if (h.t - 0.54).abs() < 2.6e-4 { at_054 = h.total; }
        }
        println!("c7c: q_total(0.54)={:.3e} running_max={:.3e} ratio={:.3e}", at_054, run_max, at_054 / run_max);
        // theta positivity near active cells at final time
        let mut min_active_theta = f64::INFINITY; let mut min_theta_all = f64::INFINITY;
        for v in 0..mesh.n_vertices() { min_theta_all = min_theta_all.min(sp.final_temperature[v]); }
        for &k in &active {
            for &v in mesh.cell(k) { min_active_theta = min_active_theta.min(sp.final_temperature[v]); }
        }
        println!("c7c: min theta overall={:.3e} min theta on active cells={:.3e}", min_theta_all, min_active_theta);

        let t0 = Instant::now();
        let mut pe = pc.clone();
        pe.material.kappa_star = 1e7;
        let se = run_2d_plate(&pe).unwrap();
        println!("c7b: elastic final_max_strain={:.6} plastic/elastic={:.2} elastic_peak_dev={:.2} plastic_peak_dev={:.2} [{:?}]",
            se.final_max_strain, sp.final_max_strain / se.final_max_strain,
            se.peak_max_abs_stress, sp.peak_max_abs_stress, t0.elapsed());
    }

    if want("c5") {
        for tau in [1.6e-5, 8e-6] {
            let t0 = Instant::now();
            let mut c5 = ScenarioConfig::plate2d();
            c5.mesh.refinement = 0;
            c5.time = TimeSettings { tau, t_end: 0.25 };
            let s5 = run_2d_plate(&c5).unwrap();
            let lhs5 = s5.stability.max_velocity_sq + s5.stability.max_stress_sq
                + 2.0 * tau * s5.stability.dissipation_sum;
            println!("c5 tau={tau:.1e}: admissible={} (ratio {:.3e} bound {:.3e}) lhs5={:.6e} rhs={:.6e} lhs5/rhs={:.4} lhs_report={:.4e} [{:?}]",
                s5.tau_h.admissible, s5.tau_h.ratio, s5.tau_h.bound,
                lhs5, s5.stability.rhs, lhs5 / s5.stability.rhs, s5.stability.lhs, t0.elapsed());
        }
    }
}
