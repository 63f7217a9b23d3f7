//! Discrete fields and field operators.
//!
//! Velocities, displacements and temperatures are continuous P1 (one value
//! set per vertex); stresses and strain rates are symmetric-tensor-valued P0
//! (one compact tensor per cell). Symmetric tensors use the component order
//! documented in [`crate::constitutive`].

use std::sync::Arc;

use crate::constitutive::ncomp;
use crate::error::{Error, Result};
use crate::linalg::SparseSystem;
use crate::mesh::{BoundaryTag, Mesh};

/// A P1 field: `ncomp` values per vertex, vertex-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalField {
    pub ncomp: usize,
    pub values: Vec<f64>,
}

impl NodalField {
    pub fn zeros(mesh: &Mesh, ncomp: usize) -> Self {
        NodalField { ncomp, values: vec![0.0; mesh.n_vertices() * ncomp] }
    }

    pub fn constant(mesh: &Mesh, ncomp: usize, value: &[f64]) -> Self {
        assert_eq!(value.len(), ncomp);
        let mut f = Self::zeros(mesh, ncomp);
        for i in 0..mesh.n_vertices() {
            f.vertex_mut(i).copy_from_slice(value);
        }
        f
    }

    pub fn n_vertices(&self) -> usize {
        self.values.len() / self.ncomp
    }

    pub fn value(&self, vertex: usize, comp: usize) -> f64 {
        self.values[vertex * self.ncomp + comp]
    }

    pub fn vertex(&self, vertex: usize) -> &[f64] {
        &self.values[vertex * self.ncomp..(vertex + 1) * self.ncomp]
    }

    pub fn vertex_mut(&mut self, vertex: usize) -> &mut [f64] {
        &mut self.values[vertex * self.ncomp..(vertex + 1) * self.ncomp]
    }
}

/// A symmetric-tensor P0 field: `ncomp` stored components per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct StressField {
    pub ncomp: usize,
    pub values: Vec<f64>,
}

impl StressField {
    pub fn zeros(mesh: &Mesh) -> Self {
        let m = ncomp(mesh.dim);
        StressField { ncomp: m, values: vec![0.0; mesh.n_cells() * m] }
    }

    pub fn n_cells(&self) -> usize {
        self.values.len() / self.ncomp
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        &self.values[k * self.ncomp..(k + 1) * self.ncomp]
    }

    pub fn cell_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.ncomp..(k + 1) * self.ncomp]
    }
}

/// Frobenius inner product of two compact symmetric tensors; stored
/// off-diagonal components count twice.
pub fn sym_inner(a: &[f64], b: &[f64], dim: usize) -> f64 {
    debug_assert_eq!(a.len(), ncomp(dim));
    debug_assert_eq!(b.len(), ncomp(dim));
    let mut s = 0.0;
    for c in 0..dim {
        s += a[c] * b[c];
    }
    for c in dim..ncomp(dim) {
        s += 2.0 * a[c] * b[c];
    }
    s
}

pub fn trace(t: &[f64], dim: usize) -> f64 {
    t[..dim].iter().sum()
}

/// Deviatoric part `T - (tr T / dim) I`; identically zero for `dim == 1`.
pub fn deviatoric(t: &[f64], dim: usize, out: &mut [f64]) {
    let tr = trace(t, dim) / dim as f64;
    for c in 0..ncomp(dim) {
        out[c] = t[c] - if c < dim { tr } else { 0.0 };
    }
}

/// Symmetric gradient of a P1 vector field, evaluated cellwise (exact; the
/// result is the compact P0 representation of the strain rate).
pub fn strain(mesh: &Mesh, v: &NodalField) -> Result<StressField> {
    if v.ncomp != mesh.dim {
        return Err(Error::invalid(format!(
            "field has {} components, mesh dimension is {}",
            v.ncomp, mesh.dim
        )));
    }
    if v.n_vertices() != mesh.n_vertices() {
        return Err(Error::invalid(format!(
            "field has {} vertices, mesh has {}",
            v.n_vertices(),
            mesh.n_vertices()
        )));
    }
    let mut out = StressField::zeros(mesh);
    for k in 0..mesh.n_cells() {
        strain_on_cell(mesh, v, k, out.cell_mut(k));
    }
    Ok(out)
}

/// Strain of a P1 field on a single cell.
pub fn strain_on_cell(mesh: &Mesh, v: &NodalField, k: usize, out: &mut [f64]) {
    let cell = mesh.cell(k);
    let grads = mesh.cell_gradients(k);
    if mesh.dim == 1 {
        out[0] = 0.0;
        for (i, &vi) in cell.iter().enumerate() {
            out[0] += v.value(vi, 0) * grads[i][0];
        }
    } else {
        let (mut gxx, mut gyy, mut gxy) = (0.0, 0.0, 0.0);
        for (i, &vi) in cell.iter().enumerate() {
            let vx = v.value(vi, 0);
            let vy = v.value(vi, 1);
            gxx += vx * grads[i][0];
            gyy += vy * grads[i][1];
            gxy += 0.5 * (vx * grads[i][1] + vy * grads[i][0]);
        }
        out[0] = gxx;
        out[1] = gyy;
        out[2] = gxy;
    }
}

/// Time-dependent Dirichlet data on the `DIRICHLET`-tagged boundary: the
/// callback fills the component values at time `t` and position `x`.
#[derive(Clone)]
pub struct DirichletBc {
    value: Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>,
}

impl std::fmt::Debug for DirichletBc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DirichletBc(..)")
    }
}

impl DirichletBc {
    pub fn new(value: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        DirichletBc { value: Arc::new(value) }
    }

    /// Homogeneous data.
    pub fn zero() -> Self {
        Self::new(|_, _, out| out.fill(0.0))
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.value)(t, x, out);
    }
}

/// Replace the constrained rows of a vertex-major nodal system by identity
/// rows carrying the boundary values at time `t`.
///
/// Rows are indexed `vertex * ncomp + component`. Fails with a configuration
/// error if the mesh has no `DIRICHLET`-tagged facet.
pub fn apply_dirichlet(
    system: &mut SparseSystem,
    mesh: &Mesh,
    bc: &DirichletBc,
    t: f64,
    ncomp: usize,
) -> Result<()> {
    let vertices = mesh.tagged_vertices(BoundaryTag::Dirichlet);
    if vertices.is_empty() {
        return Err(Error::Config(
            "Dirichlet data supplied but the mesh has no DIRICHLET-tagged facet".into(),
        ));
    }
    if system.n() != mesh.n_vertices() * ncomp {
        return Err(Error::invalid(format!(
            "system dimension {} does not match {} vertices x {} components",
            system.n(),
            mesh.n_vertices(),
            ncomp
        )));
    }
    let mut rows = Vec::with_capacity(vertices.len() * ncomp);
    let mut vals = vec![0.0; ncomp];
    for &v in &vertices {
        bc.eval(t, mesh.vertex(v), &mut vals);
        for (c, &val) in vals.iter().enumerate() {
            rows.push((v * ncomp + c, val));
        }
    }
    system.replace_rows_with_identity(&rows);
    Ok(())
}

/// Overwrite the Dirichlet-constrained entries of a nodal field with the
/// boundary data at time `t` (strong imposition on the field itself).
pub fn set_dirichlet_values(field: &mut NodalField, mesh: &Mesh, bc: &DirichletBc, t: f64) {
    let ncomp = field.ncomp;
    let mut vals = vec![0.0; ncomp];
    for v in mesh.tagged_vertices(BoundaryTag::Dirichlet) {
        bc.eval(t, mesh.vertex(v), &mut vals);
        field.vertex_mut(v).copy_from_slice(&vals);
    }
}
