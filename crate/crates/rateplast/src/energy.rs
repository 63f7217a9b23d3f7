//! Energy bookkeeping: per-step balance audit and the a-priori stability
//! check.
//!
//! The discrete scheme satisfies, per accepted implicit step,
//!
//! ```text
//!   d_t (E_kin + E_int) + D_tau + P_plastic = P_ext + W_D,
//! ```
//!
//! where `D_tau` is the numerical dissipation of the implicit Euler method,
//! `P_plastic` the power drawn by the plastic gate, `P_ext` the power of the
//! applied loads and `W_D` the power transmitted through driven Dirichlet
//! boundaries (zero for homogeneous data). The thermal step converts
//! `P_plastic` into thermal energy exactly, so the three-field balance

//! drops the plastic term. [`audit_step`] evaluates the appropriate residual
//! from computed states; it should vanish to solver tolerance.

use crate::constitutive::{ncomp, norm_a_squared, norm_rho_squared, MaterialParams, RegularizationConfig};
use crate::error::{Error, Result};
use crate::mechanics::{load_vector, plastic_power, residual_full, DofMap, Loads, MechState};
use crate::mesh::{BoundaryTag, Mesh};
use crate::spaces::{strain_on_cell, sym_inner, NodalField};
use crate::thermal::ThermoState;

/// Per-step energy report; one CSV row per accepted step.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct EnergyReport {
    pub k: usize,
    pub t: f64,
    pub e_kin: f64,
    pub e_int: f64,
    pub e_th: f64,
    /// Power of the applied loads against the new velocity.
    pub p_ext: f64,
    /// Numerical dissipation of the implicit Euler step.
    pub d_tau: f64,
    /// `int g (T : eps(v))` with the run's gate.
    pub plastic_dissipation: f64,
    /// Power transmitted through driven Dirichlet boundaries (the momentum
    /// residual paired with the boundary velocity).
    pub boundary_work: f64,
    pub balance_residual: f64,
    /// Running stability-estimate sides (filled by the scenario driver).
    pub stability_lhs: f64,
    pub stability_rhs: f64,
}

impl EnergyReport {
    pub fn csv_header() -> &'static str {
        "k,t,e_kin,e_int,e_th,p_ext,d_tau,plastic_dissipation,boundary_work,balance_residual,stability_lhs,stability_rhs"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.t,
            self.e_kin,
            self.e_int,
            self.e_th,
            self.p_ext,
            self.d_tau,
            self.plastic_dissipation,
            self.boundary_work,
            self.balance_residual,
            self.stability_lhs,
            self.stability_rhs
        )
    }
}

/// Thermal energy `int rho c_v theta`, exact for P1 temperature.
pub fn thermal_energy(theta: &NodalField, p: &MaterialParams, mesh: &Mesh) -> f64 {
    let nv = mesh.dim + 1;
    let mut acc = 0.0;
    for k in 0..mesh.n_cells() {
        let sum: f64 = mesh.cell(k).iter().map(|&v| theta.value(v, 0)).sum();
        acc += p.rho(k) * p.c_v * mesh.cell_volume(k) * sum / nv as f64;
    }
    acc
}

/// Kinetic, internal and thermal energies of a state pair.
pub fn energies(
    mech: &MechState,
    thermo: &ThermoState,
    p: &MaterialParams,
    mesh: &Mesh,
) -> (f64, f64, f64) {
    (
        0.5 * norm_rho_squared(&mech.velocity, p, mesh),
        0.5 * norm_a_squared(&mech.stress, p, mesh),
        thermal_energy(&thermo.temperature, p, mesh),
    )
}

/// `(1/2 tau) ||v^k - v^{k-1}||^2_rho + (1/2 tau) ||T^k - T^{k-1}||^2_A`.
pub fn numerical_dissipation(
    curr: &MechState,
    prev: &MechState,
    p: &MaterialParams,
    mesh: &Mesh,
    tau: f64,
) -> f64 {
    let mut dv = curr.velocity.clone();
    for v in 0..mesh.n_vertices() {
        let row = dv.vertex_mut(v);
        for j in 0..mesh.dim {
            row[j] -= prev.velocity.value(v, j);
        }
    }
    let mut ds = curr.stress.clone();
    let nc = ncomp(mesh.dim);
    for k in 0..mesh.n_cells() {
        let row = ds.cell_mut(k);
        let prev_row = prev.stress.cell(k);
        for m in 0..nc {
            row[m] -= prev_row[m];
        }
    }
    (norm_rho_squared(&dv, p, mesh) + norm_a_squared(&ds, p, mesh)) / (2.0 * tau)
}

/// Power of the applied loads against the step's velocity.
pub fn external_power(
    mesh: &Mesh,
    p: &MaterialParams,
    loads: &Loads,
    state: &MechState,
) -> f64 {
    let map = DofMap::new(mesh);
    let f = load_vector(mesh, p, loads, state.t);
    let mut acc = 0.0;
    for v in 0..mesh.n_vertices() {
        for j in 0..mesh.dim {
            acc += f[map.velocity_dof(v, j)] * state.velocity.value(v, j);
        }
    }
    acc
}

/// Discrete energy-balance audit of one accepted implicit step.
///
/// With thermal states supplied the residual is
/// `d_t(E_kin + E_int + E_th) + D_tau - P_ext - W_D` (plastic power cancels
/// against the heat source); without them it is
/// `d_t(E_kin + E_int) + D_tau + P_plastic - P_ext - W_D`. Either way it
/// vanishes to solver tolerance for converged steps.
#[allow(clippy::too_many_arguments)]
pub fn audit_step(
    prev: &MechState,
    curr: &MechState,
    thermo: Option<(&ThermoState, &ThermoState)>,
    loads: &Loads,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    mesh: &Mesh,
) -> Result<EnergyReport> {
    let tau = curr.t - prev.t;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "audited step must advance in time: {} -> {}",
            prev.t, curr.t
        )));
    }
    let e_kin = 0.5 * norm_rho_squared(&curr.velocity, p, mesh);
    let e_int = 0.5 * norm_a_squared(&curr.stress, p, mesh);
    let e_kin_prev = 0.5 * norm_rho_squared(&prev.velocity, p, mesh);
    let e_int_prev = 0.5 * norm_a_squared(&prev.stress, p, mesh);
    let d_tau = numerical_dissipation(curr, prev, p, mesh, tau);
    let p_ext = external_power(mesh, p, loads, curr);
    let p_plastic = plastic_power(mesh, p, cfg, curr);

    // reaction power through driven Dirichlet rows
    let mut boundary_work = 0.0;
    if loads.dirichlet.is_some() {
        let map = DofMap::new(mesh);
        let res = residual_full(prev, curr, p, cfg, loads, mesh)?;
        for v in mesh.tagged_vertices(BoundaryTag::Dirichlet) {
            for j in 0..mesh.dim {
                let row = map.velocity_dof(v, j);
                boundary_work += res[row] * curr.velocity.value(v, j);
            }
        }
    }

    let (e_th, balance_residual) = match thermo {
        Some((tp, tc)) => {
            let e_th = thermal_energy(&tc.temperature, p, mesh);
            let e_th_prev = thermal_energy(&tp.temperature, p, mesh);
            let d_t = (e_kin + e_int + e_th - e_kin_prev - e_int_prev - e_th_prev) / tau;
            (e_th, d_t + d_tau - p_ext - boundary_work)
        }
        None => {
            let d_t = (e_kin + e_int - e_kin_prev - e_int_prev) / tau;
            (0.0, d_t + d_tau + p_plastic - p_ext - boundary_work)
        }
    };

    Ok(EnergyReport {
        k: curr.k,
        t: curr.t,
        e_kin,
        e_int,
        e_th,
        p_ext,
        d_tau,
        plastic_dissipation: p_plastic,
        boundary_work,
        balance_residual,
        stability_lhs: 0.0,
        stability_rhs: 0.0,
    })
}

/// The modified energy conserved exactly by the semi-implicit scheme in the
/// elastic, load-free case:
/// `1/2 ||v||^2_rho + 1/2 ||T||^2_A - (tau/2) int T : eps(v)`.
pub fn modified_energy_semi(
    state: &MechState,
    p: &MaterialParams,
    mesh: &Mesh,
    tau: f64,
) -> f64 {
    let nc = ncomp(mesh.dim);
    let mut eps_v = [0.0_f64; 3];
    let mut cross = 0.0;
    for k in 0..mesh.n_cells() {
        strain_on_cell(mesh, &state.velocity, k, &mut eps_v[..nc]);
        cross += mesh.cell_volume(k) * sym_inner(state.stress.cell(k), &eps_v[..nc], mesh.dim);
    }
    0.5 * norm_rho_squared(&state.velocity, p, mesh) + 0.5 * norm_a_squared(&state.stress, p, mesh)
        - 0.5 * tau * cross
}

/// Squared data norms entering the stability estimate at one time:
/// `||f(t)||^2_rho` (P1-interpolated body force) and the squared boundary
/// norm of the traction over `NEUMANN_TRACTION` facets.
pub fn load_data_norms(mesh: &Mesh, p: &MaterialParams, loads: &Loads, t: f64) -> (f64, f64) {
    let d = mesh.dim;
    let body = match &loads.body_force {
        Some(f) => {
            let mut field = NodalField::zeros(mesh, d);
            let mut val = vec![0.0; d];
            for v in 0..mesh.n_vertices() {
                f(t, mesh.vertex(v), &mut val);
                field.vertex_mut(v).copy_from_slice(&val);
            }
            norm_rho_squared(&field, p, mesh)
        }
        None => 0.0,
    };
    let mut traction = 0.0;
    if let Some(tr) = &loads.traction {
        let mut ta = vec![0.0; d];
        let mut tb = vec![0.0; d];
        for f in mesh.boundary_facets() {
            if f.tag != BoundaryTag::NeumannTraction {
                continue;
            }
            if d == 1 {
                tr(t, mesh.vertex(f.vertices[0]), &mut ta);
                traction += ta[0] * ta[0];
            } else {
                tr(t, mesh.vertex(f.vertices[0]), &mut ta);
                tr(t, mesh.vertex(f.vertices[1]), &mut tb);
                let len = mesh.facet_measure(f);
                for j in 0..d {
                    // exact edge integral of the square of a linear field
                    traction += len * (ta[j] * ta[j] + ta[j] * tb[j] + tb[j] * tb[j]) / 3.0;
                }
            }
        }
    }
    (body, traction)
}

/// Outcome of the a-priori stability check.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StabilityReport {
    /// `max_k ||v^k||^2_rho + max_k ||T^k||^2_A + sum_k tau D_tau^k`,
    /// maxima over computed steps (k >= 1).
    pub lhs: f64,
    /// `||v_0||^2_rho + ||T_0||^2_A + ||f||^2 + ||t_b||^2` with the data
    /// norms integrated over the run.
    pub rhs: f64,
    /// Raw comparison `lhs <= rhs`; the estimate's derivation carries
    /// untracked constants, so this is reported, not asserted.
    pub satisfied: bool,
    pub max_velocity_sq: f64,
    pub max_stress_sq: f64,
    pub dissipation_sum: f64,
}

/// Running accumulator for the two sides of the stability estimate, so long
/// runs do not need to retain their full state history.
#[derive(Clone, Debug)]
pub struct StabilityAccumulator {
    max_v_sq: f64,
    max_s_sq: f64,
    diss_sum: f64,
    data_sum: f64,
    init: Option<(f64, f64)>,
}

impl Default for StabilityAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl StabilityAccumulator {
    pub fn new() -> Self {
        StabilityAccumulator {
            max_v_sq: 0.0,
            max_s_sq: 0.0,
            diss_sum: 0.0,
            data_sum: 0.0,
            init: None,
        }
    }

    /// Record the initial state (contributes only to the right-hand side).
    pub fn push_initial(&mut self, state: &MechState, p: &MaterialParams, mesh: &Mesh) {
        self.init = Some((
            norm_rho_squared(&state.velocity, p, mesh),
            norm_a_squared(&state.stress, p, mesh),
        ));
    }

    /// Record one accepted step.
    pub fn push_step(
        &mut self,
        prev: &MechState,
        curr: &MechState,
        p: &MaterialParams,
        loads: &Loads,
        mesh: &Mesh,
    ) {
        let tau = curr.t - prev.t;
        self.max_v_sq = self.max_v_sq.max(norm_rho_squared(&curr.velocity, p, mesh));
        self.max_s_sq = self.max_s_sq.max(norm_a_squared(&curr.stress, p, mesh));
        self.diss_sum += tau * numerical_dissipation(curr, prev, p, mesh, tau);
        let (body, traction) = load_data_norms(mesh, p, loads, curr.t);
        self.data_sum += tau * (body + traction);
    }

    pub fn report(&self) -> StabilityReport {
        let (v0, s0) = self.init.unwrap_or((0.0, 0.0));
        let lhs = self.max_v_sq + self.max_s_sq + self.diss_sum;
        let rhs = v0 + s0 + self.data_sum;
        StabilityReport {
            lhs,
            rhs,
            satisfied: lhs <= rhs,
            max_velocity_sq: self.max_v_sq,
            max_stress_sq: self.max_s_sq,
            dissipation_sum: self.diss_sum,
        }
    }
}

/// Evaluate the stability estimate over a stored history
/// (`history[0]` is the initial state).
pub fn stability_check(
    history: &[MechState],
    p: &MaterialParams,
    loads: &Loads,
    mesh: &Mesh,
) -> Result<StabilityReport> {
    if history.is_empty() {
        return Err(Error::invalid("stability check needs at least the initial state"));
    }
    let mut acc = StabilityAccumulator::new();
    acc.push_initial(&history[0], p, mesh);
    for w in history.windows(2) {
        acc.push_step(&w[0], &w[1], p, loads, mesh);
    }
    Ok(acc.report())
}
