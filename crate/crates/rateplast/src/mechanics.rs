//! The coupled stress-velocity time step.
//!
//! One implicit-Euler step solves, for P0 symmetric-tensor stress `T` and P1
//! velocity `v`,
//!
//! ```text
//!   int A(d_t T) : S  =  int (1 - g) eps(v) : S        for all P0 tensors S,
//!   int rho d_t v . w + int T : eps(w) = loads(w)      for all P1 fields w,
//! ```
//!
//! with the plastic gate `g = H(T : eps(v)) H_eps(|dev T|^2 - kappa*^2)`
//! evaluated cellwise at the new state. The module provides the residual and
//! its semismooth Jacobian, a damped Newton solver with continuation rescue
//! in the gate width, the semi-implicit splitting, and the tau/h
//! admissibility check.

use std::sync::Arc;

use crate::constitutive::{
    compliance_apply, compliance_bounds, heaviside_reg, heaviside_reg_deriv, loading_gate,
    loading_gate_deriv, ncomp, stiffness_apply, yield_argument, yield_argument_gradient,
    yield_gate, MaterialParams, RegularizationConfig,
};
use crate::error::{Error, Result};
use crate::linalg::{LuFactor, SparseSystem};
use crate::mesh::{BoundaryTag, Mesh, MeshConstants};
use crate::spaces::{set_dirichlet_values, strain_on_cell, sym_inner, DirichletBc, NodalField, StressField};

/// Uniform time grid with step `tau` and `n_steps` steps; the final time is
/// `tau * n_steps` by construction.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    pub tau: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(tau: f64, n_steps: usize) -> Result<Self> {
        let grid = TimeGrid { tau, n_steps };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("time step must be positive, got {}", self.tau)));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        Ok(())
    }

    pub fn final_time(&self) -> f64 {
        self.tau * self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.tau * k as f64
    }
}

/// State of the mechanical fields after step `k` (time `t = k tau`).
#[derive(Clone, Debug)]
pub struct MechState {
    pub k: usize,
    pub t: f64,
    pub stress: StressField,
    pub velocity: NodalField,
}

impl MechState {
    pub fn zeros(mesh: &Mesh) -> Self {
        MechState {
            k: 0,
            t: 0.0,
            stress: StressField::zeros(mesh),
            velocity: NodalField::zeros(mesh, mesh.dim),
        }
    }
}

/// Space-time vector field callback: fills `out` (length = dim) with the
/// value at time `t` and position `x`.
pub type SpaceTimeFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Load data: body force (per unit mass), boundary traction on
/// `NEUMANN_TRACTION` facets, and Dirichlet velocity data.
#[derive(Clone, Default)]
pub struct Loads {
    pub body_force: Option<SpaceTimeFn>,
    pub traction: Option<SpaceTimeFn>,
    pub dirichlet: Option<DirichletBc>,
}

impl std::fmt::Debug for Loads {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Loads")
            .field("body_force", &self.body_force.as_ref().map(|_| ".."))
            .field("traction", &self.traction.as_ref().map(|_| ".."))
            .field("dirichlet", &self.dirichlet)
            .finish()
    }
}

impl Loads {
    /// No loads, no kinematic constraints.
    pub fn free() -> Self {
        Loads::default()
    }

    pub fn with_body_force(
        mut self,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.body_force = Some(Arc::new(f));
        self
    }

    pub fn with_traction(
        mut self,
        t: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.traction = Some(Arc::new(t));
        self
    }

    pub fn with_dirichlet(mut self, bc: DirichletBc) -> Self {
        self.dirichlet = Some(bc);
        self
    }
}

/// Global dof layout: stress components cell-major, then velocity components
/// vertex-major.
#[derive(Clone, Copy, Debug)]
pub struct DofMap {
    pub dim: usize,
    pub ncomp: usize,
    pub n_cells: usize,
    pub n_vertices: usize,
}

impl DofMap {
    pub fn new(mesh: &Mesh) -> Self {
        DofMap {
            dim: mesh.dim,
            ncomp: ncomp(mesh.dim),
            n_cells: mesh.n_cells(),
            n_vertices: mesh.n_vertices(),
        }
    }

    pub fn n_stress(&self) -> usize {
        self.n_cells * self.ncomp
    }

    pub fn n_total(&self) -> usize {
        self.n_stress() + self.n_vertices * self.dim
    }

    pub fn stress_dof(&self, cell: usize, comp: usize) -> usize {
        cell * self.ncomp + comp
    }

    pub fn velocity_dof(&self, vertex: usize, comp: usize) -> usize {
        self.n_stress() + vertex * self.dim + comp
    }
}

/// Duality weight of a stored stress component: off-diagonal components
/// represent two tensor entries.
fn comp_weight(m: usize, dim: usize) -> f64 {
    if m < dim {
        1.0
    } else {
        2.0
    }
}

/// Strain of the P1 basis field (vertex `i`, component `j`) on a cell with
/// gradients `grads`, in compact storage.
fn basis_strain(grads: &[[f64; 2]; 3], i: usize, j: usize, dim: usize, out: &mut [f64]) {
    out[..ncomp(dim)].fill(0.0);
    if dim == 1 {
        out[0] = grads[i][0];
    } else {
        match j {
            0 => {
                out[0] = grads[i][0];
                out[2] = 0.5 * grads[i][1];
            }
            _ => {
                out[1] = grads[i][1];
                out[2] = 0.5 * grads[i][0];
            }
        }
    }
}

/// `(T grad_i)_j` and its stress-component derivatives: row coupling of a
/// velocity test function to the stress.
fn stress_times_grad(sigma: &[f64], grad: &[f64; 2], j: usize, dim: usize) -> f64 {
    if dim == 1 {
        sigma[0] * grad[0]
    } else if j == 0 {
        sigma[0] * grad[0] + sigma[2] * grad[1]
    } else {
        sigma[2] * grad[0] + sigma[1] * grad[1]
    }
}

fn stress_times_grad_deriv(grad: &[f64; 2], j: usize, dim: usize, out: &mut [f64]) {
    out[..ncomp(dim)].fill(0.0);
    if dim == 1 {
        out[0] = grad[0];
    } else if j == 0 {
        out[0] = grad[0];
        out[2] = grad[1];
    } else {
        out[1] = grad[1];
        out[2] = grad[0];
    }
}

fn check_state_shapes(mesh: &Mesh, state: &MechState) -> Result<()> {
    if state.stress.n_cells() != mesh.n_cells()
        || state.velocity.n_vertices() != mesh.n_vertices()
        || state.velocity.ncomp != mesh.dim
    {
        return Err(Error::invalid(format!(
            "state shape ({} cells, {} vertices x {} comps) does not match mesh ({} cells, {} vertices, dim {})",
            state.stress.n_cells(),
            state.velocity.n_vertices(),
            state.velocity.ncomp,
            mesh.n_cells(),
            mesh.n_vertices(),
            mesh.dim
        )));
    }
    Ok(())
}

/// Velocity dofs constrained by Dirichlet data (empty when no data is set).
fn constrained_rows(mesh: &Mesh, loads: &Loads, map: &DofMap) -> Result<Vec<usize>> {
    let Some(_) = loads.dirichlet else { return Ok(Vec::new()) };
    let vertices = mesh.tagged_vertices(BoundaryTag::Dirichlet);
    if vertices.is_empty() {
        return Err(Error::Config(
            "Dirichlet data supplied but the mesh has no DIRICHLET-tagged facet".into(),
        ));
    }
    let mut rows = Vec::with_capacity(vertices.len() * map.dim);
    for v in vertices {
        for c in 0..map.dim {
            rows.push(map.velocity_dof(v, c));
        }
    }
    Ok(rows)
}

/// Discrete load functional at time `t`, indexed like the full dof vector
/// (stress rows zero): `int rho f . w + int_Neumann t_b . w` per velocity
/// test function.
pub fn load_vector(mesh: &Mesh, p: &MaterialParams, loads: &Loads, t: f64) -> Vec<f64> {
    let map = DofMap::new(mesh);
    let mut out = vec![0.0; map.n_total()];
    let d = mesh.dim;
    let nv = d + 1;
    if let Some(f) = &loads.body_force {
        // P1-interpolated body force integrated against P1 test functions
        let mut f_vals = vec![0.0; mesh.n_vertices() * d];
        let mut val = vec![0.0; d];
        for v in 0..mesh.n_vertices() {
            f(t, mesh.vertex(v), &mut val);
            f_vals[v * d..(v + 1) * d].copy_from_slice(&val);
        }
        let scale = 1.0 / ((nv * (nv + 1)) as f64);
        for k in 0..mesh.n_cells() {
            let cell = mesh.cell(k);
            let w = p.rho(k) * mesh.cell_volume(k) * scale;
            for (i, &vi) in cell.iter().enumerate() {
                for j in 0..d {
                    let mut acc = 0.0;
                    for (l, &vl) in cell.iter().enumerate() {
                        let m = if i == l { 2.0 } else { 1.0 };
                        acc += m * f_vals[vl * d + j];
                    }
                    out[map.velocity_dof(vi, j)] += w * acc;
                }
            }
        }
    }
    if let Some(tr) = &loads.traction {
        let mut ta = vec![0.0; d];
        let mut tb = vec![0.0; d];
        for f in mesh.boundary_facets() {
            if f.tag != BoundaryTag::NeumannTraction {
                continue;
            }
            if d == 1 {
                let v = f.vertices[0];
                tr(t, mesh.vertex(v), &mut ta);
                out[map.velocity_dof(v, 0)] += ta[0];
            } else {
                let [a, b] = [f.vertices[0], f.vertices[1]];
                let len = mesh.facet_measure(f);
                tr(t, mesh.vertex(a), &mut ta);
                tr(t, mesh.vertex(b), &mut tb);
                for j in 0..d {
                    out[map.velocity_dof(a, j)] += len * (ta[j] / 3.0 + tb[j] / 6.0);
                    out[map.velocity_dof(b, j)] += len * (tb[j] / 3.0 + ta[j] / 6.0);
                }
            }
        }
    }
    out
}

/// Residual of one implicit step at candidate state `cand` given `prev`.
/// With `mask_dirichlet` the constrained velocity rows are zeroed (the form
/// Newton drives to zero); without it they hold the raw momentum rows, whose
/// values at a solution are the discrete reaction forces.
pub fn assemble_residual(
    prev: &MechState,
    cand: &MechState,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    loads: &Loads,
    mesh: &Mesh,
    mask_dirichlet: bool,
) -> Result<Vec<f64>> {
    check_state_shapes(mesh, prev)?;
    check_state_shapes(mesh, cand)?;
    if p.dim != mesh.dim {
        return Err(Error::invalid(format!(
            "material dim {} does not match mesh dim {}",
            p.dim, mesh.dim
        )));
    }
    let tau = cand.t - prev.t;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "candidate time {} must lie after previous time {}",
            cand.t, prev.t
        )));
    }
    let map = DofMap::new(mesh);
    let d = mesh.dim;
    let nc = map.ncomp;
    let nv = d + 1;
    let mass_scale = 1.0 / ((nv * (nv + 1)) as f64);

    let mut out = load_vector(mesh, p, loads, cand.t);
    for v in out.iter_mut() {
        *v = -*v;
    }

    let mut eps_v = [0.0_f64; 3];
    let mut dsig = [0.0_f64; 3];
    let mut a_dsig = [0.0_f64; 3];
    for k in 0..mesh.n_cells() {
        let cell = mesh.cell(k);
        let vol = mesh.cell_volume(k);
        let grads = mesh.cell_gradients(k);
        strain_on_cell(mesh, &cand.velocity, k, &mut eps_v[..nc]);
        let sig = cand.stress.cell(k);
        let sig_prev = prev.stress.cell(k);
        for m in 0..nc {
            dsig[m] = (sig[m] - sig_prev[m]) / tau;
        }
        compliance_apply(p, &dsig[..nc], &mut a_dsig[..nc]);
        let g = yield_gate(p, cfg, sig, &eps_v[..nc]);

        for m in 0..nc {
            out[map.stress_dof(k, m)] =
                comp_weight(m, d) * vol * (a_dsig[m] - (1.0 - g) * eps_v[m]);
        }

        let w_mass = p.rho(k) * vol * mass_scale / tau;
        for (i, &vi) in cell.iter().enumerate() {
            for j in 0..d {
                let mut acc = 0.0;
                for (l, &vl) in cell.iter().enumerate() {
                    let m = if i == l { 2.0 } else { 1.0 };
                    acc += m * (cand.velocity.value(vl, j) - prev.velocity.value(vl, j));
                }
                out[map.velocity_dof(vi, j)] +=
                    w_mass * acc + vol * stress_times_grad(sig, &grads[i], j, d);
            }
        }
    }

    if mask_dirichlet {
        for row in constrained_rows(mesh, loads, &map)? {
            out[row] = 0.0;
        }
    }
    Ok(out)
}

/// Residual of the implicit step with Dirichlet-constrained velocity rows
/// zeroed (those dofs are imposed strongly).
pub fn residual(
    prev: &MechState,
    cand: &MechState,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    loads: &Loads,
    mesh: &Mesh,
) -> Result<Vec<f64>> {
    assemble_residual(prev, cand, p, cfg, loads, mesh, true)
}

/// Residual including the constrained rows; those entries are the discrete
/// reaction forces, used by the energy audit to account for the power drawn
/// through the Dirichlet boundary.
pub fn residual_full(
    prev: &MechState,
    cand: &MechState,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    loads: &Loads,
    mesh: &Mesh,
) -> Result<Vec<f64>> {
    assemble_residual(prev, cand, p, cfg, loads, mesh, false)
}

/// Exact derivative of [`residual`] with respect to the stress and velocity
/// dofs, except that the sharp loading gate is differentiated as zero (the
/// semismooth choice); with `eta > 0` the regularized gate is differentiated
/// exactly. No Dirichlet row replacement is applied here.
pub fn jacobian(
    prev: &MechState,
    cand: &MechState,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    mesh: &Mesh,
) -> Result<SparseSystem> {
    check_state_shapes(mesh, prev)?;
    check_state_shapes(mesh, cand)?;
    let tau = cand.t - prev.t;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "candidate time {} must lie after previous time {}",
            cand.t, prev.t
        )));
    }
    let map = DofMap::new(mesh);
    let d = mesh.dim;
    let nc = map.ncomp;
    let nv = d + 1;
    let mass_scale = 1.0 / ((nv * (nv + 1)) as f64);
    let mut sys = SparseSystem::new(map.n_total());

    let a = (1.0 + p.nu) / p.e_modulus;
    let b = p.nu / p.e_modulus;

    let mut eps_v = [0.0_f64; 3];
    let mut ygrad = [0.0_f64; 3];
    let mut e_basis = [0.0_f64; 3];
    let mut tg_deriv = [0.0_f64; 3];
    for k in 0..mesh.n_cells() {
        let cell = mesh.cell(k);
        let vol = mesh.cell_volume(k);
        let grads = mesh.cell_gradients(k);
        strain_on_cell(mesh, &cand.velocity, k, &mut eps_v[..nc]);
        let sig = cand.stress.cell(k);

        let load_arg = sym_inner(sig, &eps_v[..nc], d);
        let y = yield_argument(p, sig);
        let g_load = loading_gate(cfg, load_arg);
        let gp_load = loading_gate_deriv(cfg, load_arg);
        let h = heaviside_reg(cfg.variant, y, cfg.epsilon);
        let hp = heaviside_reg_deriv(cfg.variant, y, cfg.epsilon);
        let g = g_load * h;
        yield_argument_gradient(p, sig, &mut ygrad[..nc]);

        // dg/dsigma_n = G' * d(load_arg)/dsigma_n * H + G * H' * dy/dsigma_n
        let mut dg_dsig = [0.0_f64; 3];
        for n in 0..nc {
            dg_dsig[n] =
                gp_load * comp_weight(n, d) * eps_v[n] * h + g_load * hp * ygrad[n];
        }

        // stress rows
        for m in 0..nc {
            let row = map.stress_dof(k, m);
            let wm = comp_weight(m, d) * vol;
            for n in 0..nc {
                let a_mn = if m == n { a } else { 0.0 } - if m < d && n < d { b } else { 0.0 };
                sys.add(row, map.stress_dof(k, n), wm * (a_mn / tau + eps_v[m] * dg_dsig[n]));
            }
            for (i, &vi) in cell.iter().enumerate() {
                for j in 0..d {
                    basis_strain(&grads, i, j, d, &mut e_basis[..nc]);
                    // d(load_arg)/dv_(i,j) = sigma : eps(basis) = (sigma grad_i)_j
                    let dload = stress_times_grad(sig, &grads[i], j, d);
                    let dg_dv = gp_load * dload * h;
                    sys.add(
                        row,
                        map.velocity_dof(vi, j),
                        wm * (-(1.0 - g) * e_basis[m] + eps_v[m] * dg_dv),
                    );
                }
            }
        }

        // velocity rows
        let w_mass = p.rho(k) * vol * mass_scale / tau;
        for (i, &vi) in cell.iter().enumerate() {
            for j in 0..d {
                let row = map.velocity_dof(vi, j);
                stress_times_grad_deriv(&grads[i], j, d, &mut tg_deriv[..nc]);
                for n in 0..nc {
                    sys.add(row, map.stress_dof(k, n), vol * tg_deriv[n]);
                }
                for (l, &vl) in cell.iter().enumerate() {
                    let m = if i == l { 2.0 } else { 1.0 };
                    sys.add(row, map.velocity_dof(vl, j), w_mass * m);
                }
            }
        }
    }
    Ok(sys)
}

/// Newton solver options; the defaults mirror the nonlinear tolerances used
/// throughout (absolute and relative 1e-6).
#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    pub max_halvings: u32,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol_abs: 1e-6, tol_rel: 1e-6, max_iter: 50, max_halvings: 30 }
    }
}

/// Per-step solver diagnostics, one CSV row per accepted step.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct StepDiagnostics {
    pub iterations: usize,
    pub residual_norm: f64,
    pub halvings: usize,
    /// Gate width at which the step was finally accepted.
    pub epsilon_reached: f64,
    /// Loading-gate width of the system the returned state solves; zero for
    /// the sharp gate. Nonzero only when the homotopy fallback accepted a
    /// smoothed step because the sharp one would not converge.
    pub eta_reached: f64,
    /// Fraction of cells whose gate value is at least 1/2.
    pub gate_fraction: f64,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fraction of cells with gate value >= 1/2 at the given state.
pub fn gate_fraction(
    mesh: &Mesh,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    state: &MechState,
) -> f64 {
    let nc = ncomp(mesh.dim);
    let mut eps_v = [0.0_f64; 3];
    let mut active = 0usize;
    for k in 0..mesh.n_cells() {
        strain_on_cell(mesh, &state.velocity, k, &mut eps_v[..nc]);
        if yield_gate(p, cfg, state.stress.cell(k), &eps_v[..nc]) >= 0.5 {
            active += 1;
        }
    }
    active as f64 / mesh.n_cells() as f64
}

/// Cellwise gate values at a state.
pub fn gate_field(
    mesh: &Mesh,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    state: &MechState,
) -> Vec<f64> {
    let nc = ncomp(mesh.dim);
    let mut eps_v = [0.0_f64; 3];
    (0..mesh.n_cells())
        .map(|k| {
            strain_on_cell(mesh, &state.velocity, k, &mut eps_v[..nc]);
            yield_gate(p, cfg, state.stress.cell(k), &eps_v[..nc])
        })
        .collect()
}

/// Plastic power `int g (T : eps(v))` at a state, with the regularized gate.
pub fn plastic_power(
    mesh: &Mesh,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    state: &MechState,
) -> f64 {
    let nc = ncomp(mesh.dim);
    let mut eps_v = [0.0_f64; 3];
    let mut acc = 0.0;
    for k in 0..mesh.n_cells() {
        strain_on_cell(mesh, &state.velocity, k, &mut eps_v[..nc]);
        let sig = state.stress.cell(k);
        acc += mesh.cell_volume(k)
            * yield_gate(p, cfg, sig, &eps_v[..nc])
            * sym_inner(sig, &eps_v[..nc], mesh.dim);
    }
    acc
}

/// Initial guess for the step at `prev.t + tau`: the previous state with
/// Dirichlet velocities moved to the new time.
fn advance_guess(prev: &MechState, mesh: &Mesh, loads: &Loads, tau: f64) -> MechState {
    let mut cand = prev.clone();
    cand.k += 1;
    cand.t += tau;
    if let Some(bc) = &loads.dirichlet {
        set_dirichlet_values(&mut cand.velocity, mesh, bc, cand.t);
    }
    cand
}

fn apply_update(state: &mut MechState, base: &MechState, delta: &[f64], alpha: f64, map: &DofMap) {
    for k in 0..map.n_cells {
        let cell = state.stress.cell_mut(k);
        let src = base.stress.cell(k);
        for m in 0..map.ncomp {
            cell[m] = src[m] + alpha * delta[map.stress_dof(k, m)];
        }
    }
    for v in 0..map.n_vertices {
        let out = state.velocity.vertex_mut(v);
        let src = base.velocity.vertex(v);
        for j in 0..map.dim {
            out[j] = src[j] + alpha * delta[map.velocity_dof(v, j)];
        }
    }
}

fn newton_iterate(
    prev: &MechState,
    cand: &mut MechState,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    loads: &Loads,
    mesh: &Mesh,
    opts: &NewtonOptions,
) -> Result<(usize, f64, usize)> {
    let map = DofMap::new(mesh);
    let rows = constrained_rows(mesh, loads, &map)?;
    let pinned: Vec<(usize, f64)> = rows.iter().map(|&r| (r, 0.0)).collect();

    let mut res = residual(prev, cand, p, cfg, loads, mesh)?;
    let mut r_norm = norm2(&res);
    let tol = opts.tol_abs.max(opts.tol_rel * r_norm);
    let mut iterations = 0usize;
    let mut halvings_total = 0usize;
    let mut trial = cand.clone();
    while r_norm > tol {
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                residual_norm: r_norm,
                epsilon_reached: None,
            });
        }
        let mut sys = jacobian(prev, cand, p, cfg, mesh)?;
        for (i, &r) in res.iter().enumerate() {
            sys.add_rhs(i, -r);
        }
        sys.replace_rows_with_identity(&pinned);
        let delta = sys.solve()?;

        let mut alpha = 1.0;
        let mut halvings = 0u32;
        loop {
            apply_update(&mut trial, cand, &delta, alpha, &map);
            let res_trial = residual(prev, &trial, p, cfg, loads, mesh)?;
            let r_trial = norm2(&res_trial);
            if r_trial < r_norm {
                std::mem::swap(cand, &mut trial);
                res = res_trial;
                r_norm = r_trial;
                break;
            }
            if halvings >= opts.max_halvings {
                return Err(Error::NonConvergence {
                    iterations: iterations + 1,
                    residual_norm: r_norm,
                    epsilon_reached: None,
                });
            }
            alpha *= 0.5;
            halvings += 1;
        }
        halvings_total += halvings as usize;
        iterations += 1;
    }
    Ok((iterations, r_norm, halvings_total))
}

/// One implicit step by damped (line-searched) semismooth Newton, starting
/// from the previous state with updated Dirichlet data. Converged when the
/// residual norm drops below `max(tol_abs, tol_rel * initial residual)`.
pub fn newton_step_solve(
    prev: &MechState,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    loads: &Loads,
    mesh: &Mesh,
    tau: f64,
    opts: &NewtonOptions,
) -> Result<(MechState, StepDiagnostics)> {
    cfg.validate()?;
    let mut cand = advance_guess(prev, mesh, loads, tau);
    let (iterations, residual_norm, halvings) =
        newton_iterate(prev, &mut cand, p, cfg, loads, mesh, opts)?;
    let diag = StepDiagnostics {
        iterations,
        residual_norm,
        halvings,
        epsilon_reached: cfg.epsilon,
        eta_reached: cfg.eta,
        gate_fraction: gate_fraction(mesh, p, cfg, &cand),
    };
    Ok((cand, diag))
}

/// One implicit step solved through a decreasing sequence of gate widths
/// (continuation), each solve warm-starting the next; the returned state is
/// always the solution at the final scheduled width (= `cfg_target.epsilon`).
/// When a stage fails, the width decrement is bisected, up to 8 times per
/// stage.
pub fn continuation_in_epsilon(
    prev: &MechState,
    p: &MaterialParams,
    cfg_target: &RegularizationConfig,
    loads: &Loads,
    mesh: &Mesh,
    tau: f64,
    schedule: &[f64],
    opts: &NewtonOptions,
) -> Result<(MechState, StepDiagnostics)> {
    cfg_target.validate()?;
    if schedule.is_empty() {
        return Err(Error::invalid("continuation schedule must not be empty"));
    }
    for w in schedule.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "continuation schedule must be strictly decreasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    if !schedule.iter().all(|&e| e > 0.0 && e.is_finite()) {
        return Err(Error::invalid("continuation schedule entries must be positive"));
    }
    let last = *schedule.last().unwrap();
    if (last - cfg_target.epsilon).abs() > 1e-12 * cfg_target.epsilon {
        return Err(Error::invalid(format!(
            "continuation schedule must end at the target width {}, ends at {last}",
            cfg_target.epsilon
        )));
    }

    let mut cand = advance_guess(prev, mesh, loads, tau);
    let mut iterations = 0usize;
    let mut halvings = 0usize;
    let mut residual_norm = 0.0;
    let mut last_success: Option<f64> = None;

    for (si, &stage) in schedule.iter().enumerate() {
        // snap the final stage to the exact target width
        let stage = if si + 1 == schedule.len() { cfg_target.epsilon } else { stage };
        let mut bisections = 0u32;
        let mut pending = stage;
        loop {
            let cfg_stage = RegularizationConfig {
                variant: cfg_target.variant,
                epsilon: pending,
                eta: cfg_target.eta,
            };
            let mut attempt = cand.clone();
            match newton_iterate(prev, &mut attempt, p, &cfg_stage, loads, mesh, opts) {
                Ok((it, rn, hv)) => {
                    cand = attempt;
                    iterations += it;
                    halvings += hv;
                    residual_norm = rn;
                    last_success = Some(pending);
                    if pending == stage {
                        break;
                    }
                    pending = stage;
                }
                Err(err) => {
                    let Some(upper) = last_success else {
                        return Err(augment_epsilon(err, None));
                    };
                    if bisections >= 8 {
                        return Err(augment_epsilon(err, Some(upper)));
                    }
                    bisections += 1;
                    pending = 0.5 * (upper + pending);
                }
            }
        }
    }
    let diag = StepDiagnostics {
        iterations,
        residual_norm,
        halvings,
        epsilon_reached: cfg_target.epsilon,
        eta_reached: cfg_target.eta,
        gate_fraction: gate_fraction(mesh, p, cfg_target, &cand),
    };
    Ok((cand, diag))
}

fn augment_epsilon(err: Error, eps: Option<f64>) -> Error {
    match err {
        Error::NonConvergence { iterations, residual_norm, .. } => {
            Error::NonConvergence { iterations, residual_norm, epsilon_reached: eps }
        }
        other => other,
    }
}

/// Ratio of the accepted loading-gate width to the gate-argument scale below
/// which a smoothed step counts as converged (see [`solve_step_with_rescue`]).
pub const ETA_ACCEPT_RELATIVE: f64 = 1e-6;

/// One implicit step with the full rescue ladder: direct Newton, then
/// continuation from 16x the gate width, then a homotopy in the loading-gate
/// width `eta`. The returned state solves the step at exactly `cfg` whenever
/// that system has a reachable solution.
///
/// The sharp loading gate makes the stress equation discontinuous across the
/// loading/unloading switch, and a step can pin a cell exactly on the switch;
/// the sharp step then has no solution at all while the smoothed one is
/// solvable for every width. When every sharp attempt fails, the homotopy
/// walks the width down geometrically (each converged stage warm-starting the
/// next), tries once more to sharpen exactly, and otherwise accepts the
/// deepest smoothed solution provided its width is at most
/// [`ETA_ACCEPT_RELATIVE`] times the gate-argument scale. The accepted width
/// is reported in [`StepDiagnostics::eta_reached`] (zero on the sharp path);
/// downstream evaluation of the state stays sharp.
pub fn solve_step_with_rescue(
    prev: &MechState,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    loads: &Loads,
    mesh: &Mesh,
    tau: f64,
    opts: &NewtonOptions,
) -> Result<(MechState, StepDiagnostics)> {
    match newton_step_solve(prev, p, cfg, loads, mesh, tau, opts) {
        Ok(out) => return Ok(out),
        Err(Error::NonConvergence { .. }) => {}
        Err(other) => return Err(other),
    }
    let schedule: Vec<f64> =
        [16.0, 8.0, 4.0, 2.0, 1.0].iter().map(|s| s * cfg.epsilon).collect();
    match continuation_in_epsilon(prev, p, cfg, loads, mesh, tau, &schedule, opts) {
        Ok(out) => return Ok(out),
        Err(Error::NonConvergence { .. }) => {}
        Err(other) => return Err(other),
    }

    // Homotopy in the loading-gate width: smooth the sharp gate, then let it
    // sharpen again step by step, each solution warm-starting the next.
    let nc = ncomp(mesh.dim);
    let mut eps_v = [0.0_f64; 3];
    let mut scale = 0.0_f64;
    for k in 0..mesh.n_cells() {
        strain_on_cell(mesh, &prev.velocity, k, &mut eps_v[..nc]);
        scale = scale.max(sym_inner(prev.stress.cell(k), &eps_v[..nc], mesh.dim).abs());
    }
    let trace = std::env::var_os("RATEPLAST_RESCUE_TRACE").is_some();
    let scale = scale.max(1.0);
    let eta0 = 1e-2 * scale;
    let eta_min = 1e-12 * scale;
    let step_down = 0.1_f64.sqrt();
    let mut cand = advance_guess(prev, mesh, loads, tau);
    let mut iterations = 0usize;
    let mut halvings = 0usize;
    let mut smoothed: Option<(f64, f64)> = None; // (eta, residual at eta)
    let mut eta = eta0;
    if trace {
        eprintln!("[rescue] t={} scale={scale:.3e} eta0={eta0:.3e}", prev.t);
    }
    while eta >= eta_min {
        let cfg_eta = RegularizationConfig { variant: cfg.variant, epsilon: cfg.epsilon, eta };
        let mut attempt = cand.clone();
        let mut outcome = newton_iterate(prev, &mut attempt, p, &cfg_eta, loads, mesh, opts);
        if outcome.is_err() && smoothed.is_some() {
            // The warm start occasionally lands in a basin the line search
            // cannot leave even though the stage is solvable outright; retry
            // once from the fresh per-step guess before giving up.
            attempt = advance_guess(prev, mesh, loads, tau);
            outcome = newton_iterate(prev, &mut attempt, p, &cfg_eta, loads, mesh, opts);
            if trace {
                eprintln!(
                    "[rescue]   eta={eta:.3e} warm start failed, cold retry {}",
                    if outcome.is_ok() { "ok" } else { "failed" }
                );
            }
        }
        match outcome {
            Ok((it, rn, hv)) => {
                if trace {
                    eprintln!("[rescue]   eta={eta:.3e} ok it={it} rn={rn:.3e}");
                }
                cand = attempt;
                iterations += it;
                halvings += hv;
                smoothed = Some((eta, rn));
            }
            // Deeper widths only get harder; stop the descent at the first
            // width that converges from neither start.
            Err(e) if smoothed.is_some() => {
                if trace {
                    eprintln!("[rescue]   eta={eta:.3e} FAIL ({e}) -> stop descent");
                }
                break;
            }
            Err(e) => {
                if trace {
                    eprintln!("[rescue]   eta={eta:.3e} FAIL ({e}) -> skip down");
                }
            }
        }
        eta *= step_down;
    }
    let mut sharpened = cand.clone();
    if trace {
        match &smoothed {
            Some((eta, rn)) => eprintln!(
                "[rescue] sharpening from eta={eta:.3e} (rn={rn:.3e}); accept bound {:.3e}",
                ETA_ACCEPT_RELATIVE * scale
            ),
            None => eprintln!("[rescue] no smoothed stage converged; trying sharp from guess"),
        }
    }
    match newton_iterate(prev, &mut sharpened, p, cfg, loads, mesh, opts) {
        Ok((it, residual_norm, hv)) => {
            let diag = StepDiagnostics {
                iterations: iterations + it,
                residual_norm,
                halvings: halvings + hv,
                epsilon_reached: cfg.epsilon,
                eta_reached: cfg.eta,
                gate_fraction: gate_fraction(mesh, p, cfg, &sharpened),
            };
            Ok((sharpened, diag))
        }
        Err(err) => match smoothed {
            Some((eta, residual_norm)) if eta <= ETA_ACCEPT_RELATIVE * scale => {
                if trace {
                    eprintln!("[rescue] sharp failed ({err}); accepting eta={eta:.3e}");
                }
                let diag = StepDiagnostics {
                    iterations,
                    residual_norm,
                    halvings,
                    epsilon_reached: cfg.epsilon,
                    eta_reached: eta,
                    gate_fraction: gate_fraction(mesh, p, cfg, &cand),
                };
                Ok((cand, diag))
            }
            _ => {
                if trace {
                    eprintln!("[rescue] sharp failed ({err}); no acceptable smoothed stage");
                }
                Err(err)
            }
        },
    }
}

/// The semi-implicit splitting: the velocity solve uses the previous stress
/// and loads (a constant factored mass matrix), then the stress equation is
/// solved cell by cell with the new velocity frozen.
pub struct SemiImplicitSolver {
    lu: LuFactor,
    tau: f64,
    n_velocity: usize,
}

impl SemiImplicitSolver {
    pub fn new(mesh: &Mesh, p: &MaterialParams, loads: &Loads, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("time step must be positive, got {tau}")));
        }
        let d = mesh.dim;
        let n = mesh.n_vertices() * d;
        let nv = d + 1;
        let mass_scale = 1.0 / ((nv * (nv + 1)) as f64);
        let mut sys = SparseSystem::new(n);
        for k in 0..mesh.n_cells() {
            let cell = mesh.cell(k);
            let w = p.rho(k) * mesh.cell_volume(k) * mass_scale / tau;
            for (i, &vi) in cell.iter().enumerate() {
                for (l, &vl) in cell.iter().enumerate() {
                    let m = if i == l { 2.0 } else { 1.0 };
                    for j in 0..d {
                        sys.add(vi * d + j, vl * d + j, w * m);
                    }
                }
            }
        }
        if loads.dirichlet.is_some() {
            let vertices = mesh.tagged_vertices(BoundaryTag::Dirichlet);
            if vertices.is_empty() {
                return Err(Error::Config(
                    "Dirichlet data supplied but the mesh has no DIRICHLET-tagged facet".into(),
                ));
            }
            let rows: Vec<(usize, f64)> = vertices
                .iter()
                .flat_map(|&v| (0..d).map(move |j| (v * d + j, 0.0)))
                .collect();
            sys.replace_rows_with_identity(&rows);
        }
        Ok(SemiImplicitSolver { lu: sys.factor()?, tau, n_velocity: n })
    }

    pub fn step(
        &self,
        prev: &MechState,
        p: &MaterialParams,
        cfg: &RegularizationConfig,
        loads: &Loads,
        mesh: &Mesh,
    ) -> Result<MechState> {
        check_state_shapes(mesh, prev)?;
        let d = mesh.dim;
        let nc = ncomp(d);
        let nv = d + 1;
        let mass_scale = 1.0 / ((nv * (nv + 1)) as f64);
        let tau = self.tau;
        let t_new = prev.t + tau;

        // velocity solve at the old stress and old loads
        let map = DofMap::new(mesh);
        let full_loads = load_vector(mesh, p, loads, prev.t);
        let mut rhs = vec![0.0; self.n_velocity];
        for v in 0..mesh.n_vertices() {
            for j in 0..d {
                rhs[v * d + j] = full_loads[map.velocity_dof(v, j)];
            }
        }
        for k in 0..mesh.n_cells() {
            let cell = mesh.cell(k);
            let vol = mesh.cell_volume(k);
            let grads = mesh.cell_gradients(k);
            let sig = prev.stress.cell(k);
            let w_mass = p.rho(k) * vol * mass_scale / tau;
            for (i, &vi) in cell.iter().enumerate() {
                for j in 0..d {
                    let mut acc = 0.0;
                    for (l, &vl) in cell.iter().enumerate() {
                        let m = if i == l { 2.0 } else { 1.0 };
                        acc += m * prev.velocity.value(vl, j);
                    }
                    rhs[vi * d + j] += w_mass * acc - vol * stress_times_grad(sig, &grads[i], j, d);
                }
            }
        }
        if let Some(bc) = &loads.dirichlet {
            let mut vals = vec![0.0; d];
            for v in mesh.tagged_vertices(BoundaryTag::Dirichlet) {
                bc.eval(t_new, mesh.vertex(v), &mut vals);
                for j in 0..d {
                    rhs[v * d + j] = vals[j];
                }
            }
        }
        let v_new = self.lu.solve(&rhs)?;

        let mut next = MechState {
            k: prev.k + 1,
            t: t_new,
            stress: prev.stress.clone(),
            velocity: prev.velocity.clone(),
        };
        for v in 0..mesh.n_vertices() {
            next.velocity.vertex_mut(v).copy_from_slice(&v_new[v * d..(v + 1) * d]);
        }

        // cellwise stress update: sigma(g) = sigma_prev + tau (1 - g) C eps(v),
        // with the scalar gate value g solved by bisection on [0, 1]
        let mut eps_v = [0.0_f64; 3];
        let mut c_eps = [0.0_f64; 3];
        let mut sig_of_g = [0.0_f64; 3];
        for k in 0..mesh.n_cells() {
            strain_on_cell(mesh, &next.velocity, k, &mut eps_v[..nc]);
            if eps_v[..nc].iter().all(|&e| e == 0.0) {
                continue;
            }
            stiffness_apply(p, &eps_v[..nc], &mut c_eps[..nc]);
            let sig_prev = prev.stress.cell(k);
            let eval = |g: f64, out: &mut [f64]| {
                for m in 0..nc {
                    out[m] = sig_prev[m] + tau * (1.0 - g) * c_eps[m];
                }
            };
            let phi = |g: f64, buf: &mut [f64]| -> f64 {
                eval(g, buf);
                yield_gate(p, cfg, buf, &eps_v[..nc]) - g
            };
            let mut lo = 0.0_f64;
            let mut hi = 1.0_f64;
            if phi(lo, &mut sig_of_g[..nc]) <= 0.0 {
                // elastic: the gate is closed at the elastic trial
                eval(0.0, &mut sig_of_g[..nc]);
            } else {
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if phi(mid, &mut sig_of_g[..nc]) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                eval(0.5 * (lo + hi), &mut sig_of_g[..nc]);
            }
            next.stress.cell_mut(k).copy_from_slice(&sig_of_g[..nc]);
        }
        Ok(next)
    }
}

/// Convenience wrapper building a [`SemiImplicitSolver`] for a single step.
pub fn step_semi_implicit(
    prev: &MechState,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    loads: &Loads,
    mesh: &Mesh,
    tau: f64,
) -> Result<MechState> {
    SemiImplicitSolver::new(mesh, p, loads, tau)?.step(prev, p, cfg, loads, mesh)
}

/// Result of the tau/h admissibility test backing the stability estimate.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct TauHCheck {
    /// The mesh- and material-dependent bound B.
    pub bound: f64,
    /// The actual ratio tau/h.
    pub ratio: f64,
    /// Strict inequality ratio < bound.
    pub admissible: bool,
    pub margin: f64,
}

/// Evaluate the smallness condition `tau/h < B` with
/// `B = sqrt(A_min) rho_min / (c_inv sqrt(rho_min) + c_tr^2 sqrt(A_min) +
/// sqrt(A_min) sqrt(rho_min))`.
pub fn check_tau_h_condition(
    p: &MaterialParams,
    constants: &MeshConstants,
    tau: f64,
) -> Result<TauHCheck> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("time step must be non-negative, got {tau}")));
    }
    let a_min = compliance_bounds(p)?.a_min;
    let rho_min = p.rho_star.min();
    if !(rho_min > 0.0) {
        return Err(Error::invalid(format!("density must be positive, got {rho_min}")));
    }
    let sa = a_min.sqrt();
    let sr = rho_min.sqrt();
    let bound = sa * rho_min / (constants.c_inv * sr + constants.c_tr * constants.c_tr * sa + sa * sr);
    let ratio = tau / constants.h;
    Ok(TauHCheck { bound, ratio, admissible: ratio < bound, margin: bound - ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{norm_a_squared, norm_rho_squared, RegularizationVariant};
    use crate::mesh::{build_interval_mesh, estimate_inverse_constants, unit_square_two_cells, EigenOptions};
    use crate::scenario::bump_dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sqrt_cfg(eps: f64) -> RegularizationConfig {
        RegularizationConfig::new(RegularizationVariant::Sqrt, eps)
    }

    fn elastic_params(dim: usize) -> MaterialParams {
        // gate never opens at these stress levels
        MaterialParams::new(dim, 1e4, 0.3, 1e18)
    }

    fn random_state(mesh: &Mesh, rng: &mut ChaCha8Rng, k: usize, t: f64, scale: f64) -> MechState {
        let mut st = MechState::zeros(mesh);
        st.k = k;
        st.t = t;
        for c in 0..mesh.n_cells() {
            for x in st.stress.cell_mut(c) {
                *x = scale * rng.gen_range(-1.0..1.0);
            }
        }
        for v in 0..mesh.n_vertices() {
            for x in st.velocity.vertex_mut(v) {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        st
    }

    #[test]
    fn stationary_trivial_state_has_zero_residual() {
        let mesh = unit_square_two_cells();
        let prev = MechState::zeros(&mesh);
        let mut cand = prev.clone();
        cand.k = 1;
        cand.t = 0.5;
        let r = residual(&prev, &cand, &elastic_params(2), &sqrt_cfg(1.0), &Loads::free(), &mesh)
            .unwrap();
        assert!(r.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_dimensional_stress_row_matches_hand_evaluation() {
        let mesh = build_interval_mesh(1, 0.0, 1.0).unwrap();
        let p = elastic_params(1);
        let tau = 0.1;
        let mut prev = MechState::zeros(&mesh);
        prev.stress.cell_mut(0)[0] = 3.0;
        let mut cand = prev.clone();
        cand.k = 1;
        cand.t = tau;
        cand.stress.cell_mut(0)[0] = 5.0;
        cand.velocity.vertex_mut(0)[0] = 0.0;
        cand.velocity.vertex_mut(1)[0] = 2.0; // dv/dx = 2 on |K| = 1
        let r = residual(&prev, &cand, &p, &sqrt_cfg(1.0), &Loads::free(), &mesh).unwrap();
        // row = |K| (A(dsigma/tau) - (1 - g) dv/dx), g ~ 0 here
        let expected = (5.0 - 3.0) / tau / p.e_modulus - 2.0;
        assert!((r[0] - expected).abs() < 1e-12, "got {} want {expected}", r[0]);
    }

    /// Independent dense assembly of the linear elastodynamics residual
    /// (gate held at zero), written directly from the weak form.
    fn dense_elastic_residual(
        mesh: &Mesh,
        p: &MaterialParams,
        prev: &MechState,
        cand: &MechState,
    ) -> Vec<f64> {
        let d = mesh.dim;
        let nc = ncomp(d);
        let map = DofMap::new(mesh);
        let tau = cand.t - prev.t;
        let mut out = vec![0.0; map.n_total()];
        let a = (1.0 + p.nu) / p.e_modulus;
        let b = p.nu / p.e_modulus;
        for k in 0..mesh.n_cells() {
            let cell = mesh.cell(k);
            let vol = mesh.cell_volume(k);
            let grads = mesh.cell_gradients(k);
            let sig = cand.stress.cell(k);
            let sp = prev.stress.cell(k);
            let mut eps = [0.0; 3];
            for (i, &vi) in cell.iter().enumerate() {
                for j in 0..d {
                    let mut e = [0.0; 3];
                    basis_strain(&grads, i, j, d, &mut e[..nc]);
                    for m in 0..nc {
                        eps[m] += cand.velocity.value(vi, j) * e[m];
                    }
                }
            }
            for m in 0..nc {
                let ds = (sig[m] - sp[m]) / tau;
                let tr_ds: f64 = (0..d).map(|n| (sig[n] - sp[n]) / tau).sum();
                let a_ds = a * ds - if m < d { b * tr_ds } else { 0.0 };
                out[map.stress_dof(k, m)] += comp_weight(m, d) * vol * (a_ds - eps[m]);
            }
            for (i, &vi) in cell.iter().enumerate() {
                for j in 0..d {
                    let mut e = [0.0; 3];
                    basis_strain(&grads, i, j, d, &mut e[..nc]);
                    let mut acc = vol * sym_inner(sig, &e[..nc], d);
                    for (l, &vl) in cell.iter().enumerate() {
                        let w = if i == l { 2.0 } else { 1.0 };
                        acc += p.rho(k) * vol / 12.0 * w
                            * (cand.velocity.value(vl, j) - prev.velocity.value(vl, j))
                            / tau;
                    }
                    out[map.velocity_dof(vi, j)] += acc;
                }
            }
        }
        out
    }

    #[test]
    fn elastic_residual_matches_dense_oracle() {
        let mesh = unit_square_two_cells();
        let p = elastic_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prev = random_state(&mesh, &mut rng, 0, 0.0, 5.0);
        let cand = random_state(&mesh, &mut rng, 1, 0.02, 5.0);
        let ours = residual(&prev, &cand, &p, &sqrt_cfg(1.0), &Loads::free(), &mesh).unwrap();
        let dense = dense_elastic_residual(&mesh, &p, &prev, &cand);
        for (i, (x, y)) in ours.iter().zip(&dense).enumerate() {
            assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "row {i}: {x} vs {y}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_at_smooth_points() {
        let mesh = unit_square_two_cells();
        let mut p = elastic_params(2);
        p.kappa_star = 0.8; // gate genuinely active
        let cfg = RegularizationConfig {
            variant: RegularizationVariant::Tanh,
            epsilon: 0.5,
            eta: 0.3, // smooth loading gate: the derivative is exact everywhere
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let map = DofMap::new(&mesh);
        for trial in 0..20 {
            let prev = random_state(&mesh, &mut rng, 0, 0.0, 1.0);
            let mut cand = random_state(&mesh, &mut rng, 1, 0.05, 1.0);
            cand.t = 0.05;
            let sys = jacobian(&prev, &cand, &p, &cfg, &mesh).unwrap();
            let dir: Vec<f64> = (0..map.n_total()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let jd = sys.matvec(&dir);
            let h = 1e-6;
            let mut plus = cand.clone();
            apply_update(&mut plus, &cand, &dir, h, &map);
            let mut minus = cand.clone();
            apply_update(&mut minus, &cand, &dir, -h, &map);
            let rp = residual_full(&prev, &plus, &p, &cfg, &Loads::free(), &mesh).unwrap();
            let rm = residual_full(&prev, &minus, &p, &cfg, &Loads::free(), &mesh).unwrap();
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let scale = norm2(&jd).max(1.0);
            let err = jd.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(err <= 1e-5 * scale, "trial {trial}: |J d - fd| = {err}, scale {scale}");
        }
    }

    #[test]
    fn off_diagonal_blocks_are_minus_transposes_in_the_elastic_regime() {
        let mesh = unit_square_two_cells();
        let p = elastic_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = random_state(&mesh, &mut rng, 0, 0.0, 2.0);
        let cand = random_state(&mesh, &mut rng, 1, 0.1, 2.0);
        let map = DofMap::new(&mesh);
        let sys = jacobian(&prev, &cand, &p, &sqrt_cfg(1.0), &mesh).unwrap();
        // extract dense matrix columns through matvec on unit vectors
        let n = map.n_total();
        let mut dense = vec![vec![0.0; n]; n];
        for c in 0..n {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            let col = sys.matvec(&e);
            for r in 0..n {
                dense[r][c] = col[r];
            }
        }
        let ns = map.n_stress();
        for sr in 0..ns {
            for vc in ns..n {
                let diff = dense[sr][vc] + dense[vc][sr];
                assert!(diff.abs() < 1e-12, "({sr}, {vc}): {} vs {}", dense[sr][vc], dense[vc][sr]);
            }
        }
    }

    #[test]
    fn zero_load_zero_state_converges_immediately() {
        let mesh = unit_square_two_cells();
        let prev = MechState::zeros(&mesh);
        let (next, diag) = newton_step_solve(
            &prev,
            &elastic_params(2),
            &sqrt_cfg(1.0),
            &Loads::free(),
            &mesh,
            0.01,
            &NewtonOptions::default(),
        )
        .unwrap();
        assert!(diag.iterations <= 1);
        assert!(next.stress.cell(0).iter().all(|&s| s == 0.0));
        assert!((0..mesh.n_vertices()).all(|v| next.velocity.vertex(v).iter().all(|&x| x == 0.0)));
    }

    fn bar_loads() -> Loads {
        // velocities of the prescribed end displacements -/+ bump(t)/10
        Loads::free().with_dirichlet(DirichletBc::new(|t, x, out| {
            let sign = if x[0] < 0.5 { -1.0 } else { 1.0 };
            out[0] = sign * bump_dot(t, 0.1);
        }))
    }

    #[test]
    fn purely_elastic_bar_step_needs_at_most_two_iterations() {
        let mesh = build_interval_mesh(8, 0.0, 1.0).unwrap();
        let p = MaterialParams::new(1, 1e4, 0.0, 1e7);
        let cfg = sqrt_cfg(1e-3 * 1e14);
        let loads = bar_loads();
        let mut state = MechState::zeros(&mesh);
        let tau = 1e-3;
        for _ in 0..5 {
            let (next, diag) =
                newton_step_solve(&state, &p, &cfg, &loads, &mesh, tau, &NewtonOptions::default())
                    .unwrap();
            assert!(diag.iterations <= 2, "iterations {}", diag.iterations);
            assert_eq!(diag.halvings, 0);
            state = next;
        }
        // boundary data is honored exactly
        let t = state.t;
        assert!((state.velocity.value(0, 0) + bump_dot(t, 0.1)).abs() < 1e-14);
        assert!((state.velocity.value(8, 0) - bump_dot(t, 0.1)).abs() < 1e-14);
    }

    #[test]
    fn step_is_continuous_as_tau_shrinks() {
        let mesh = build_interval_mesh(8, 0.0, 1.0).unwrap();
        let p = MaterialParams::new(1, 1e4, 0.0, 80.0);
        let cfg = sqrt_cfg(6.4);
        let loads = bar_loads();
        // a state mid-way through plastic loading
        let mut prev = MechState::zeros(&mesh);
        prev.t = 0.3;
        for k in 0..mesh.n_cells() {
            prev.stress.cell_mut(k)[0] = 60.0;
        }
        let mut norms = Vec::new();
        for level in 0..4 {
            let tau = 1e-3 / (1 << level) as f64;
            let (next, _) =
                newton_step_solve(&prev, &p, &cfg, &loads, &mesh, tau, &NewtonOptions::default())
                    .unwrap();
            let mut dv = next.velocity.clone();
            for v in 0..mesh.n_vertices() {
                for j in 0..1 {
                    dv.vertex_mut(v)[j] -= prev.velocity.value(v, j);
                }
            }
            norms.push(norm_rho_squared(&dv, &p, &mesh).sqrt());
        }
        for w in norms.windows(2) {
            assert!(w[1] < w[0], "velocity increments should shrink with tau: {norms:?}");
        }
    }

    #[test]
    fn energy_identity_and_gate_sign_hold_for_accepted_steps() {
        // homogeneous Dirichlet, no loads, energetic initial data
        let mesh = build_interval_mesh(16, 0.0, 1.0).unwrap();
        let p = MaterialParams::new(1, 1e4, 0.0, 40.0);
        let cfg = sqrt_cfg(1.6);
        let loads = Loads::free().with_dirichlet(DirichletBc::zero());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut state = MechState::zeros(&mesh);
        for k in 0..mesh.n_cells() {
            state.stress.cell_mut(k)[0] = rng.gen_range(-45.0..45.0);
        }
        for v in 1..mesh.n_vertices() - 1 {
            state.velocity.vertex_mut(v)[0] = rng.gen_range(-1.0..1.0);
        }
        let tau = 2e-4;
        let opts = NewtonOptions { tol_abs: 1e-10, tol_rel: 1e-12, ..Default::default() };
        for _ in 0..10 {
            let (next, _) = newton_step_solve(&state, &p, &cfg, &loads, &mesh, tau, &opts).unwrap();
            let e_prev = 0.5 * norm_rho_squared(&state.velocity, &p, &mesh)
                + 0.5 * norm_a_squared(&state.stress, &p, &mesh);
            let e_next = 0.5 * norm_rho_squared(&next.velocity, &p, &mesh)
                + 0.5 * norm_a_squared(&next.stress, &p, &mesh);
            let mut dv = next.velocity.clone();
            for v in 0..mesh.n_vertices() {
                dv.vertex_mut(v)[0] -= state.velocity.value(v, 0);
            }
            let mut ds = next.stress.clone();
            for k in 0..mesh.n_cells() {
                ds.cell_mut(k)[0] -= state.stress.cell(k)[0];
            }
            let d_tau = (norm_rho_squared(&dv, &p, &mesh) + norm_a_squared(&ds, &p, &mesh))
                / (2.0 * tau);
            let p_plastic = plastic_power(&mesh, &p, &cfg, &next);
            let identity = (e_next - e_prev) / tau + d_tau + p_plastic;
            let scale = (e_next / tau).abs().max(1.0);
            assert!(identity.abs() <= 1e-8 * scale, "identity {identity}, scale {scale}");
            assert!(p_plastic >= -1e-9, "plastic power {p_plastic}");
            state = next;
        }
    }

    #[test]
    fn continuation_validates_schedules_and_matches_direct_solve() {
        let mesh = build_interval_mesh(8, 0.0, 1.0).unwrap();
        let p = MaterialParams::new(1, 1e4, 0.0, 80.0);
        let cfg = sqrt_cfg(10.0);
        let loads = bar_loads();
        let mut prev = MechState::zeros(&mesh);
        prev.t = 0.2;
        let tau = 5e-4;
        let opts = NewtonOptions::default();

        assert!(continuation_in_epsilon(&prev, &p, &cfg, &loads, &mesh, tau, &[], &opts).is_err());
        assert!(
            continuation_in_epsilon(&prev, &p, &cfg, &loads, &mesh, tau, &[5.0, 10.0], &opts)
                .is_err()
        );
        assert!(
            continuation_in_epsilon(&prev, &p, &cfg, &loads, &mesh, tau, &[20.0, 15.0], &opts)
                .is_err(),
            "schedule must end at the target width"
        );

        let (direct, _) = newton_step_solve(&prev, &p, &cfg, &loads, &mesh, tau, &opts).unwrap();
        let (cont, diag) =
            continuation_in_epsilon(&prev, &p, &cfg, &loads, &mesh, tau, &[10.0], &opts).unwrap();
        assert_eq!(diag.epsilon_reached, 10.0);
        for k in 0..mesh.n_cells() {
            assert!((direct.stress.cell(k)[0] - cont.stress.cell(k)[0]).abs() < 1e-8);
        }

        // a stiff plastic step solved through a decreasing schedule
        let mut plastic = MechState::zeros(&mesh);
        plastic.t = 0.35;
        for k in 0..mesh.n_cells() {
            plastic.stress.cell_mut(k)[0] = 79.9;
        }
        let schedule = [200.0, 100.0, 50.0, 20.0, 10.0];
        let (state, diag) =
            continuation_in_epsilon(&plastic, &p, &cfg, &loads, &mesh, tau, &schedule, &opts)
                .unwrap();
        assert_eq!(diag.epsilon_reached, 10.0);
        assert!(state.stress.cell(4)[0] > 79.0);
    }

    #[test]
    fn semi_implicit_conserves_the_modified_energy_in_the_elastic_limit() {
        let mesh = unit_square_two_cells();
        let p = elastic_params(2);
        let cfg = sqrt_cfg(1.0);
        let loads = Loads::free(); // pure Neumann free vibration
        let tau = 1e-3;
        let solver = SemiImplicitSolver::new(&mesh, &p, &loads, tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = random_state(&mesh, &mut rng, 0, 0.0, 3.0);

        let modified = |s: &MechState| -> f64 {
            let mut cross = 0.0;
            let mut eps = [0.0; 3];
            for k in 0..mesh.n_cells() {
                strain_on_cell(&mesh, &s.velocity, k, &mut eps);
                cross += mesh.cell_volume(k) * sym_inner(s.stress.cell(k), &eps, 2);
            }
            0.5 * norm_rho_squared(&s.velocity, &p, &mesh)
                + 0.5 * norm_a_squared(&s.stress, &p, &mesh)
                - 0.5 * tau * cross
        };
        let h0 = modified(&state);
        for _ in 0..100 {
            state = solver.step(&state, &p, &cfg, &loads, &mesh).unwrap();
        }
        let h1 = modified(&state);
        assert!(
            (h1 - h0).abs() <= 1e-10 * h0.abs().max(1.0),
            "modified energy drifted from {h0} to {h1}"
        );
    }

    #[test]
    fn semi_implicit_keeps_zero_state_and_differs_from_implicit_by_order_tau() {
        let mesh = build_interval_mesh(8, 0.0, 1.0).unwrap();
        let p = MaterialParams::new(1, 1e4, 0.0, 80.0);
        let cfg = sqrt_cfg(6.4);

        let zero = MechState::zeros(&mesh);
        let next = step_semi_implicit(&zero, &p, &cfg, &Loads::free(), &mesh, 1e-3).unwrap();
        assert!(next.stress.cell(3).iter().all(|&s| s == 0.0));
        assert!(next.velocity.vertex(3).iter().all(|&x| x == 0.0));

        // the two one-step maps agree as tau -> 0, at least linearly
        let loads = bar_loads();
        let mut prev = MechState::zeros(&mesh);
        prev.t = 0.25;
        for k in 0..mesh.n_cells() {
            prev.stress.cell_mut(k)[0] = 50.0;
        }
        for v in 0..mesh.n_vertices() {
            prev.velocity.vertex_mut(v)[0] = bump_dot(0.25, 0.1) * (2.0 * mesh.vertex(v)[0] - 1.0);
        }
        let opts = NewtonOptions { tol_abs: 1e-12, tol_rel: 1e-12, ..Default::default() };
        let mut gaps = Vec::new();
        for level in 0..3 {
            let tau = 1e-3 / (1 << level) as f64;
            let (implicit, _) =
                newton_step_solve(&prev, &p, &cfg, &loads, &mesh, tau, &opts).unwrap();
            let semi = step_semi_implicit(&prev, &p, &cfg, &loads, &mesh, tau).unwrap();
            let mut gap = 0.0_f64;
            for k in 0..mesh.n_cells() {
                gap = gap.max((implicit.stress.cell(k)[0] - semi.stress.cell(k)[0]).abs());
            }
            for v in 0..mesh.n_vertices() {
                gap = gap.max((implicit.velocity.value(v, 0) - semi.velocity.value(v, 0)).abs());
            }
            gaps.push(gap);
        }
        for w in gaps.windows(2) {
            // at least first-order agreement; smooth regimes converge faster
            assert!(w[0] / w[1] > 1.8, "gaps {gaps:?} should vanish with tau");
        }
        assert!(gaps[0] < 0.1, "one-step gap {} unexpectedly large", gaps[0]);
    }

    #[test]
    fn infinite_yield_stress_reduces_to_linear_elastodynamics() {
        let mesh = unit_square_two_cells();
        let p = elastic_params(2);
        let cfg = sqrt_cfg(1.0);
        let loads = Loads::free().with_body_force(|t, x, out| {
            out[0] = (1.0 + t) * x[1];
            out[1] = x[0] - 0.5;
        });
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let prev = random_state(&mesh, &mut rng, 0, 0.0, 2.0);
        let tau = 0.01;
        let opts = NewtonOptions { tol_abs: 1e-12, tol_rel: 1e-12, ..Default::default() };
        let (state, diag) = newton_step_solve(&prev, &p, &cfg, &loads, &mesh, tau, &opts).unwrap();
        assert!(diag.iterations <= 2);

        // gate-free linear solve of the same step
        let map = DofMap::new(&mesh);
        let mut sys = jacobian(&prev, &state, &p, &cfg, &mesh).unwrap();
        let f = load_vector(&mesh, &p, &loads, tau);
        // rhs: A sigma_prev / tau rows and M v_prev / tau + loads rows
        let mut rhs = vec![0.0; map.n_total()];
        let a = (1.0 + p.nu) / p.e_modulus;
        let b = p.nu / p.e_modulus;
        for k in 0..mesh.n_cells() {
            let sp = prev.stress.cell(k);
            let tr: f64 = (0..2).map(|n| sp[n]).sum();
            for m in 0..3 {
                let a_sp = a * sp[m] - if m < 2 { b * tr } else { 0.0 };
                rhs[map.stress_dof(k, m)] =
                    comp_weight(m, 2) * mesh.cell_volume(k) * a_sp / tau;
            }
            let cell = mesh.cell(k);
            for (i, &vi) in cell.iter().enumerate() {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for (l, &vl) in cell.iter().enumerate() {
                        let w = if i == l { 2.0 } else { 1.0 };
                        acc += w * prev.velocity.value(vl, j);
                    }
                    rhs[map.velocity_dof(vi, j)] +=
                        p.rho(k) * mesh.cell_volume(k) / 12.0 * acc / tau;
                }
            }
        }
        for i in 0..map.n_total() {
            sys.add_rhs(i, rhs[i] + f[i]);
        }
        let x = sys.solve().unwrap();
        for k in 0..mesh.n_cells() {
            for m in 0..3 {
                assert!((state.stress.cell(k)[m] - x[map.stress_dof(k, m)]).abs() < 1e-8);
            }
        }
        for v in 0..mesh.n_vertices() {
            for j in 0..2 {
                assert!((state.velocity.value(v, j) - x[map.velocity_dof(v, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn tau_h_condition_evaluates_the_bound() {
        let mesh = build_interval_mesh(32, 0.0, 1.0).unwrap();
        let constants = estimate_inverse_constants(&mesh, &EigenOptions::default()).unwrap();
        let p = MaterialParams::new(1, 1e4, 0.0, 80.0);

        let zero = check_tau_h_condition(&p, &constants, 0.0).unwrap();
        assert!(zero.admissible);
        assert!((zero.margin - zero.bound).abs() < 1e-15);

        // the boundary case is strictly inadmissible
        let at_bound = check_tau_h_condition(&p, &constants, zero.bound * constants.h).unwrap();
        assert!(!at_bound.admissible);
        assert!(at_bound.margin.abs() < 1e-12);

        // 1D paper-scale setup: tau/h far above the bound
        let paper = check_tau_h_condition(&p, &constants, 5e-4).unwrap();
        assert!(paper.ratio > paper.bound, "ratio {} bound {}", paper.ratio, paper.bound);

        // sanity of the magnitude: A_min = 1e-4, c_inv ~ sqrt(12), c_tr^2 ~ 2
        // per unit interval => B ~ 1e-2/(sqrt(12) + 3e-2) ~ 2.9e-3
        assert!(paper.bound > 1e-3 && paper.bound < 1e-2, "bound {}", paper.bound);
    }

    #[test]
    fn loads_require_a_tagged_dirichlet_boundary() {
        // a mesh with no DIRICHLET facets rejects Dirichlet data
        let mesh = crate::mesh::build_plate_with_hole(1.0, 1.0, 0.25, 0.3, 0).unwrap();
        let loads = Loads::free().with_dirichlet(DirichletBc::zero());
        let prev = MechState::zeros(&mesh);
        let err = newton_step_solve(
            &prev,
            &elastic_params(2),
            &sqrt_cfg(1.0),
            &loads,
            &mesh,
            1e-3,
            &NewtonOptions::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn traction_and_body_force_enter_the_load_vector() {
        let mesh = unit_square_two_cells();
        let p = elastic_params(2);
        // constant body force (0, -2), density 1: total must be (0, -2)*area
        let loads = Loads::free().with_body_force(|_, _, out| {
            out[0] = 0.0;
            out[1] = -2.0;
        });
        let f = load_vector(&mesh, &p, &loads, 0.0);
        let map = DofMap::new(&mesh);
        let total_y: f64 = (0..mesh.n_vertices()).map(|v| f[map.velocity_dof(v, 1)]).sum();
        assert!((total_y + 2.0).abs() < 1e-12);
        let total_x: f64 = (0..mesh.n_vertices()).map(|v| f[map.velocity_dof(v, 0)]).sum();
        assert!(total_x.abs() < 1e-14);

        // 1D: traction is a point value at the tagged vertex
        let mut bar = build_interval_mesh(4, 0.0, 1.0).unwrap();
        // retag the right end as a traction boundary
        let mut facets = bar.boundary_facets().to_vec();
        facets[1].tag = BoundaryTag::NeumannTraction;
        bar = Mesh::new(
            1,
            (0..bar.n_vertices()).map(|v| bar.vertex(v)[0]).collect(),
            (0..bar.n_cells()).flat_map(|k| bar.cell(k).to_vec()).collect(),
            facets,
        )
        .unwrap();
        let p1 = MaterialParams::new(1, 1e4, 0.0, 80.0);
        let loads1 = Loads::free().with_traction(|t, _, out| out[0] = 3.0 + t);
        let f1 = load_vector(&bar, &p1, &loads1, 2.0);
        let map1 = DofMap::new(&bar);
        assert_eq!(f1[map1.velocity_dof(4, 0)], 5.0);
        assert!(f1[map1.velocity_dof(0, 0)] == 0.0);
    }
}
