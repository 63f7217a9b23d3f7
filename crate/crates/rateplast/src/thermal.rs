//! Post-hoc displacement and temperature updates.
//!
//! After each accepted mechanical step the displacement is advanced by the
//! new velocity and the heat equation is stepped with the plastic
//! dissipation as its source:
//!
//! ```text
//!   u^k = u^{k-1} + tau v^k,
//!   int rho c_v d_t theta^k phi + int kappa_th grad theta^k . grad phi
//!       = int g (T^k : eps(v^k)) phi      for all P1 phi,
//! ```
//!
//! with a natural no-flux boundary. The coupling is one-way: temperature
//! never feeds back into the mechanics.

use crate::constitutive::{ncomp, yield_gate, MaterialParams, RegularizationConfig};
use crate::error::{Error, Result};
use crate::linalg::{LuFactor, SparseSystem};
use crate::mesh::{BoundaryTag, Mesh};
use crate::spaces::{strain_on_cell, sym_inner, DirichletBc, NodalField};

/// Displacement and temperature after step `k`; the temperature is the
/// change from the (homogeneous) initial state.
#[derive(Clone, Debug)]
pub struct ThermoState {
    pub k: usize,
    pub t: f64,
    pub displacement: NodalField,
    pub temperature: NodalField,
}

impl ThermoState {
    pub fn zeros(mesh: &Mesh) -> Self {
        ThermoState {
            k: 0,
            t: 0.0,
            displacement: NodalField::zeros(mesh, mesh.dim),
            temperature: NodalField::zeros(mesh, 1),
        }
    }
}

/// Nodewise displacement update `u^k = u^{k-1} + tau v^k`; with boundary
/// data supplied, the Dirichlet rows are overwritten with the exact value at
/// the new time.
pub fn step_displacement(
    prev: &ThermoState,
    v_k: &NodalField,
    tau: f64,
    mesh: &Mesh,
    displacement_data: Option<&DirichletBc>,
) -> Result<NodalField> {
    if v_k.n_vertices() != mesh.n_vertices() || v_k.ncomp != mesh.dim {
        return Err(Error::invalid("velocity field does not match the mesh"));
    }
    if prev.displacement.n_vertices() != mesh.n_vertices() {
        return Err(Error::invalid("displacement field does not match the mesh"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("time step must be positive, got {tau}")));
    }
    let mut u = prev.displacement.clone();
    for v in 0..mesh.n_vertices() {
        let row = u.vertex_mut(v);
        for j in 0..mesh.dim {
            row[j] += tau * v_k.value(v, j);
        }
    }
    if let Some(bc) = displacement_data {
        let t_new = prev.t + tau;
        let mut vals = vec![0.0; mesh.dim];
        for v in mesh.tagged_vertices(BoundaryTag::Dirichlet) {
            bc.eval(t_new, mesh.vertex(v), &mut vals);
            u.vertex_mut(v).copy_from_slice(&vals);
        }
    }
    Ok(u)
}

/// Per-cell plastic heating `q_K = g (T : eps(v))`, with the sharp loading
/// gate: unloading cells contribute exactly zero, so `q_K >= 0` everywhere.
pub fn plastic_heating_source(
    stress_k: &crate::spaces::StressField,
    v_k: &NodalField,
    p: &MaterialParams,
    cfg: &RegularizationConfig,
    mesh: &Mesh,
) -> Vec<f64> {
    let sharp = RegularizationConfig { variant: cfg.variant, epsilon: cfg.epsilon, eta: 0.0 };
    let nc = ncomp(mesh.dim);
    let mut eps_v = [0.0_f64; 3];
    (0..mesh.n_cells())
        .map(|k| {
            strain_on_cell(mesh, v_k, k, &mut eps_v[..nc]);
            let sig = stress_k.cell(k);
            yield_gate(p, &sharp, sig, &eps_v[..nc]) * sym_inner(sig, &eps_v[..nc], mesh.dim)
        })
        .collect()
}

/// Heat-equation stepper with the (constant) system matrix
/// `rho c_v M / tau + kappa_th K` factored once.
pub struct ThermalSolver {
    lu: LuFactor,
    tau: f64,
}

impl ThermalSolver {
    pub fn new(mesh: &Mesh, p: &MaterialParams, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("time step must be positive, got {tau}")));
        }
        if !(p.c_v > 0.0) {
            return Err(Error::invalid(format!("specific heat must be positive, got {}", p.c_v)));
        }
        if !(p.kappa_th >= 0.0) {
            return Err(Error::invalid(format!(
                "thermal conductivity must be non-negative, got {}",
                p.kappa_th
            )));
        }
        let d = mesh.dim;
        let nv = d + 1;
        let mass_scale = 1.0 / ((nv * (nv + 1)) as f64);
        let mut sys = SparseSystem::new(mesh.n_vertices());
        for k in 0..mesh.n_cells() {
            let cell = mesh.cell(k);
            let vol = mesh.cell_volume(k);
            let grads = mesh.cell_gradients(k);
            let w_mass = p.rho(k) * p.c_v * vol * mass_scale / tau;
            for (i, &vi) in cell.iter().enumerate() {
                for (l, &vl) in cell.iter().enumerate() {
                    let m = if i == l { 2.0 } else { 1.0 };
                    let mut grad_dot = 0.0;
                    for c in 0..d {
                        grad_dot += grads[i][c] * grads[l][c];
                    }
                    sys.add(vi, vl, w_mass * m + p.kappa_th * vol * grad_dot);
                }
            }
        }
        Ok(ThermalSolver { lu: sys.factor()?, tau })
    }

    /// Advance the temperature by one step given the per-cell source.
    pub fn step(
        &self,
        prev_theta: &NodalField,
        source: &[f64],
        p: &MaterialParams,
        mesh: &Mesh,
    ) -> Result<NodalField> {
        if prev_theta.n_vertices() != mesh.n_vertices() || prev_theta.ncomp != 1 {
            return Err(Error::invalid("temperature field does not match the mesh"));
        }
        if source.len() != mesh.n_cells() {
            return Err(Error::invalid(format!(
                "source has {} entries for {} cells",
                source.len(),
                mesh.n_cells()
            )));
        }
        let d = mesh.dim;
        let nv = d + 1;
        let mass_scale = 1.0 / ((nv * (nv + 1)) as f64);
        let mut rhs = vec![0.0; mesh.n_vertices()];
        for k in 0..mesh.n_cells() {
            let cell = mesh.cell(k);
            let vol = mesh.cell_volume(k);
            let w_mass = p.rho(k) * p.c_v * vol * mass_scale / self.tau;
            // exact integral of the cellwise-constant source against phi_i
            let w_src = source[k] * vol / nv as f64;
            for (i, &vi) in cell.iter().enumerate() {
                let mut acc = 0.0;
                for (l, &vl) in cell.iter().enumerate() {
                    let m = if i == l { 2.0 } else { 1.0 };
                    acc += m * prev_theta.value(vl, 0);
                }
                rhs[vi] += w_mass * acc + w_src;
            }
        }
        let theta = self.lu.solve(&rhs)?;
        let mut out = NodalField::zeros(mesh, 1);
        for v in 0..mesh.n_vertices() {
            out.vertex_mut(v)[0] = theta[v];
        }
        Ok(out)
    }
}

/// One-shot temperature step (assembles and factors the system; prefer
/// [`ThermalSolver`] inside time loops).
pub fn step_temperature(
    prev: &ThermoState,
    source: &[f64],
    p: &MaterialParams,
    tau: f64,
    mesh: &Mesh,
) -> Result<NodalField> {
    ThermalSolver::new(mesh, p, tau)?.step(&prev.temperature, source, p, mesh)
}

/// Dirichlet energy `int |grad theta|^2` of a P1 scalar field.
pub fn gradient_energy(mesh: &Mesh, theta: &NodalField) -> f64 {
    let d = mesh.dim;
    let mut acc = 0.0;
    for k in 0..mesh.n_cells() {
        let cell = mesh.cell(k);
        let grads = mesh.cell_gradients(k);
        let mut g = [0.0_f64; 2];
        for (i, &vi) in cell.iter().enumerate() {
            for c in 0..d {
                g[c] += theta.value(vi, 0) * grads[i][c];
            }
        }
        acc += mesh.cell_volume(k) * (0..d).map(|c| g[c] * g[c]).sum::<f64>();
    }
    acc
}
