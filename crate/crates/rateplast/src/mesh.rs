//! Simplicial meshes in one and two dimensions.
//!
//! Provides uniform interval meshes, a structured triangulation of a
//! rectangular plate with an elliptical hole, a plain-text mesh format, and
//! estimation of the mesh-dependent inverse/trace constants that enter the
//! time-step admissibility bound.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::SparseSystem;

/// Boundary condition tag carried by each boundary facet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    /// Kinematic (displacement/velocity) boundary.
    Dirichlet,
    /// Traction-loaded Neumann boundary.
    NeumannTraction,
    /// Traction-free Neumann boundary.
    NeumannFree,
}

impl BoundaryTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::Dirichlet => "DIRICHLET",
            BoundaryTag::NeumannTraction => "NEUMANN_TRACTION",
            BoundaryTag::NeumannFree => "NEUMANN_FREE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "DIRICHLET" => Some(BoundaryTag::Dirichlet),
            "NEUMANN_TRACTION" => Some(BoundaryTag::NeumannTraction),
            "NEUMANN_FREE" => Some(BoundaryTag::NeumannFree),
            _ => None,
        }
    }
}

/// A boundary facet: a vertex in 1D, an edge in 2D. Only the first `dim`
/// entries of `vertices` are meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Facet {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

/// A conforming simplicial mesh with tagged boundary.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub dim: usize,
    vertices: Vec<f64>,
    cells: Vec<usize>,
    cell_volumes: Vec<f64>,
    boundary_facets: Vec<Facet>,
}

impl Mesh {
    /// Build a mesh from raw arrays, fixing cell orientation and validating
    /// positivity of cell measures and consistency of boundary tags.
    pub fn new(
        dim: usize,
        vertices: Vec<f64>,
        mut cells: Vec<usize>,
        boundary_facets: Vec<Facet>,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::invalid(format!("mesh dimension must be 1 or 2, got {dim}")));
        }
        if vertices.len() % dim != 0 {
            return Err(Error::MeshValidation(format!(
                "vertex array length {} is not a multiple of dim {}",
                vertices.len(),
                dim
            )));
        }
        let nv = vertices.len() / dim;
        let per_cell = dim + 1;
        if cells.len() % per_cell != 0 {
            return Err(Error::MeshValidation(format!(
                "cell array length {} is not a multiple of {}",
                cells.len(),
                per_cell
            )));
        }
        let nc = cells.len() / per_cell;
        if nc == 0 {
            return Err(Error::MeshValidation("mesh has no cells".into()));
        }
        for &v in &cells {
            if v >= nv {
                return Err(Error::MeshValidation(format!(
                    "cell references vertex {v} but the mesh has {nv} vertices"
                )));
            }
        }
        for f in &boundary_facets {
            for &v in &f.vertices[..dim.max(1)] {
                if v >= nv {
                    return Err(Error::MeshValidation(format!(
                        "boundary facet references vertex {v} but the mesh has {nv} vertices"
                    )));
                }
            }
        }

        // Orient cells positively and compute measures.
        let mut cell_volumes = vec![0.0; nc];
        for k in 0..nc {
            let c = &mut cells[k * per_cell..(k + 1) * per_cell];
            let vol = match dim {
                1 => {
                    let x0 = vertices[c[0]];
                    let x1 = vertices[c[1]];
                    if x1 < x0 {
                        c.swap(0, 1);
                    }
                    (x1 - x0).abs()
                }
                _ => {
                    let signed = signed_area(
                        &vertices[c[0] * 2..c[0] * 2 + 2],
                        &vertices[c[1] * 2..c[1] * 2 + 2],
                        &vertices[c[2] * 2..c[2] * 2 + 2],
                    );
                    if signed < 0.0 {
                        c.swap(1, 2);
                    }
                    signed.abs()
                }
            };
            if !(vol > 0.0) || !vol.is_finite() {
                return Err(Error::MeshValidation(format!(
                    "cell {k} has non-positive measure {vol}"
                )));
            }
            cell_volumes[k] = vol;
        }

        let mesh = Mesh { dim, vertices, cells, cell_volumes, boundary_facets };
        mesh.validate_boundary()?;
        Ok(mesh)
    }

    /// Tagged facets must coincide with the topological boundary (facets
    /// incident to exactly one cell), each tagged exactly once.
    fn validate_boundary(&self) -> Result<()> {
        let topo = self.topological_boundary();
        let mut tagged: Vec<(usize, usize)> = self
            .boundary_facets
            .iter()
            .map(|f| facet_key(self.dim, &f.vertices))
            .collect();
        tagged.sort_unstable();
        if let Some(w) = tagged.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::MeshValidation(format!(
                "boundary facet ({}, {}) is tagged more than once",
                w[0].0, w[0].1
            )));
        }
        let mut topo_sorted = topo;
        topo_sorted.sort_unstable();
        if tagged != topo_sorted {
            for k in &topo_sorted {
                if tagged.binary_search(k).is_err() {
                    return Err(Error::MeshValidation(format!(
                        "boundary facet ({}, {}) carries no tag",
                        k.0, k.1
                    )));
                }
            }
            for k in &tagged {
                if topo_sorted.binary_search(k).is_err() {
                    return Err(Error::MeshValidation(format!(
                        "tagged facet ({}, {}) is not on the topological boundary",
                        k.0, k.1
                    )));
                }
            }
        }
        Ok(())
    }

    fn topological_boundary(&self) -> Vec<(usize, usize)> {
        let mut count: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        for k in 0..self.n_cells() {
            let c = self.cell(k);
            match self.dim {
                1 => {
                    for &v in c {
                        *count.entry((v, usize::MAX)).or_insert(0) += 1;
                    }
                }
                _ => {
                    for e in [(c[0], c[1]), (c[1], c[2]), (c[2], c[0])] {
                        let key = (e.0.min(e.1), e.0.max(e.1));
                        *count.entry(key).or_insert(0) += 1;
                    }
                }
            }
        }
        count.into_iter().filter(|&(_, n)| n == 1).map(|(k, _)| k).collect()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len() / self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.vertices[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cell(&self, k: usize) -> &[usize] {
        &self.cells[k * (self.dim + 1)..(k + 1) * (self.dim + 1)]
    }

    pub fn cell_volume(&self, k: usize) -> f64 {
        self.cell_volumes[k]
    }

    pub fn volume(&self) -> f64 {
        self.cell_volumes.iter().sum()
    }

    pub fn boundary_facets(&self) -> &[Facet] {
        &self.boundary_facets
    }

    pub fn cell_centroid(&self, k: usize) -> [f64; 2] {
        let c = self.cell(k);
        let mut out = [0.0; 2];
        for &v in c {
            for d in 0..self.dim {
                out[d] += self.vertex(v)[d];
            }
        }
        for d in 0..self.dim {
            out[d] /= (self.dim + 1) as f64;
        }
        out
    }

    pub fn cell_diameter(&self, k: usize) -> f64 {
        let c = self.cell(k);
        if self.dim == 1 {
            return self.cell_volume(k);
        }
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                d = d.max(dist(self.vertex(c[i]), self.vertex(c[j])));
            }
        }
        d
    }

    /// Maximum cell diameter h.
    pub fn h_max(&self) -> f64 {
        (0..self.n_cells()).map(|k| self.cell_diameter(k)).fold(0.0, f64::max)
    }

    pub fn h_min(&self) -> f64 {
        (0..self.n_cells()).map(|k| self.cell_diameter(k)).fold(f64::INFINITY, f64::min)
    }

    /// Length of a boundary facet (1 for a point facet in 1D).
    pub fn facet_measure(&self, f: &Facet) -> f64 {
        if self.dim == 1 {
            1.0
        } else {
            dist(self.vertex(f.vertices[0]), self.vertex(f.vertices[1]))
        }
    }

    /// Gradients of the P1 basis functions on cell `k`; `grads[i]` is the
    /// gradient attached to the i-th cell vertex.
    pub fn cell_gradients(&self, k: usize) -> [[f64; 2]; 3] {
        let c = self.cell(k);
        let mut grads = [[0.0; 2]; 3];
        if self.dim == 1 {
            let h = self.cell_volume(k);
            grads[0][0] = -1.0 / h;
            grads[1][0] = 1.0 / h;
        } else {
            let p0 = self.vertex(c[0]);
            let p1 = self.vertex(c[1]);
            let p2 = self.vertex(c[2]);
            let two_a = 2.0 * self.cell_volume(k);
            grads[0] = [(p1[1] - p2[1]) / two_a, (p2[0] - p1[0]) / two_a];
            grads[1] = [(p2[1] - p0[1]) / two_a, (p0[0] - p2[0]) / two_a];
            grads[2] = [(p0[1] - p1[1]) / two_a, (p1[0] - p0[0]) / two_a];
        }
        grads
    }

    /// Sorted unique vertices lying on facets with the given tag.
    pub fn tagged_vertices(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .boundary_facets
            .iter()
            .filter(|f| f.tag == tag)
            .flat_map(|f| f.vertices[..self.dim.max(1)].to_vec())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Index of the cell containing point `x` (first match; P0 probe lookup).
    pub fn locate_cell(&self, x: &[f64]) -> Option<usize> {
        for k in 0..self.n_cells() {
            let c = self.cell(k);
            if self.dim == 1 {
                let x0 = self.vertices[c[0]];
                let x1 = self.vertices[c[1]];
                if x[0] >= x0 - 1e-12 && x[0] <= x1 + 1e-12 {
                    return Some(k);
                }
            } else {
                let p0 = self.vertex(c[0]);
                let p1 = self.vertex(c[1]);
                let p2 = self.vertex(c[2]);
                let a = signed_area(p0, p1, p2);
                let l0 = signed_area(&[x[0], x[1]], p1, p2) / a;
                let l1 = signed_area(p0, &[x[0], x[1]], p2) / a;
                let l2 = 1.0 - l0 - l1;
                if l0 >= -1e-12 && l1 >= -1e-12 && l2 >= -1e-12 {
                    return Some(k);
                }
            }
        }
        None
    }
}

fn signed_area(p0: &[f64], p1: &[f64], p2: &[f64]) -> f64 {
    0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn facet_key(dim: usize, v: &[usize; 2]) -> (usize, usize) {
    if dim == 1 {
        (v[0], usize::MAX)
    } else {
        (v[0].min(v[1]), v[0].max(v[1]))
    }
}

/// Uniform mesh of the interval (x0, x1) with `n` cells; both endpoints are
/// tagged `DIRICHLET`.
pub fn build_interval_mesh(n: usize, x0: f64, x1: f64) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::invalid("interval mesh needs at least one cell"));
    }
    if !(x1 > x0) {
        return Err(Error::invalid(format!("interval ({x0}, {x1}) is empty")));
    }
    let mut vertices = Vec::with_capacity(n + 1);
    for i in 0..=n {
        // endpoint-exact uniform grid
        let t = i as f64 / n as f64;
        vertices.push(x0 + t * (x1 - x0));
    }
    *vertices.last_mut().unwrap() = x1;
    let mut cells = Vec::with_capacity(2 * n);
    for i in 0..n {
        cells.push(i);
        cells.push(i + 1);
    }
    let facets = vec![
        Facet { vertices: [0, 0], tag: BoundaryTag::Dirichlet },
        Facet { vertices: [n, 0], tag: BoundaryTag::Dirichlet },
    ];
    Mesh::new(1, vertices, cells, facets)
}

/// Two-triangle triangulation of the unit square, fully Dirichlet-tagged.
/// Mostly useful in tests and examples.
pub fn unit_square_two_cells() -> Mesh {
    let vertices = vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    let cells = vec![0, 1, 2, 0, 2, 3];
    let facets = [[0usize, 1], [1, 2], [2, 3], [3, 0]]
        .into_iter()
        .map(|v| Facet { vertices: [v[0], v[1]], tag: BoundaryTag::Dirichlet })
        .collect();
    Mesh::new(2, vertices, cells, facets).expect("unit square is valid")
}

// ---------------------------------------------------------------------------
// Plate with an elliptical hole
// ---------------------------------------------------------------------------

/// Structured triangulation of the rectangle (-L/2, L/2) x (-l/2, l/2) minus
/// the open elliptical hole (x/a)^2 + (y/b)^2 < 1 (`a`, `b` semi-axes, minor
/// axis along x).
///
/// The mesh blends an arc-length parametrization of the ellipse onto the
/// rectangle perimeter through `3 * 2^refinement` radial layers and
/// `24 * 2^refinement` angular stations, splitting each quad along a
/// quadrant-mirrored diagonal so the triangulation inherits the reflection
/// symmetries of the geometry. Hole vertices lie exactly on the ellipse.
///
/// Tangency `2b == l` (hole touching top and bottom) is allowed; the contact
/// columns collapse to single vertices. Top and bottom boundary edges are
/// tagged `NEUMANN_TRACTION`, everything else (sides and hole)
/// `NEUMANN_FREE`.
pub fn build_plate_with_hole(big_l: f64, l: f64, a: f64, b: f64, refinement: u32) -> Result<Mesh> {
    if !(a > 0.0 && a <= b) {
        return Err(Error::invalid(format!("semi-axes must satisfy 0 < a <= b, got a={a}, b={b}")));
    }
    if !(2.0 * a < big_l) {
        return Err(Error::invalid(format!(
            "hole spans the plate horizontally: 2a = {} >= L = {big_l}",
            2.0 * a
        )));
    }
    if 2.0 * b > l * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "hole exceeds the plate vertically: 2b = {} > l = {l}",
            2.0 * b
        )));
    }
    if refinement > 8 {
        return Err(Error::invalid("refinement levels above 8 are not supported"));
    }

    let n_theta = 24usize << refinement; // multiple of 4; stations per quadrant
    let n_r = 3usize << refinement;
    let nq = n_theta / 4;
    let tangent_top = (2.0 * b - l).abs() <= 1e-12 * l;

    // Quadrant-1 station tables, mirrored exactly into the other quadrants.
    let ellipse_q1 = ellipse_quadrant_stations(a, b, nq);
    let square_q1 = rectangle_quadrant_stations(big_l, l, nq)?;

    let station = |table: &[[f64; 2]], j: usize| -> [f64; 2] {
        let (q, jj) = (j / nq, j % nq);
        match q {
            0 => table[jj],
            1 => {
                let p = table[nq - jj];
                [-p[0], p[1]]
            }
            2 => {
                let p = table[jj];
                [-p[0], -p[1]]
            }
            _ => {
                let p = table[nq - jj];
                [p[0], -p[1]]
            }
        }
    };

    // Vertex grid: ring i (0 = hole, n_r = outer), station j.
    // Tangent columns collapse to a single vertex.
    let collapsed = |j: usize| tangent_top && (j == nq || j == 3 * nq);
    let mut vertices: Vec<f64> = Vec::new();
    let mut id = vec![vec![usize::MAX; n_theta]; n_r + 1];
    for j in 0..n_theta {
        let p_in = station(&ellipse_q1, j);
        let p_out = station(&square_q1, j);
        if collapsed(j) {
            let v = vertices.len() / 2;
            vertices.extend_from_slice(&p_in);
            for i in 0..=n_r {
                id[i][j] = v;
            }
            continue;
        }
        for (i, row) in id.iter_mut().enumerate() {
            let t = i as f64 / n_r as f64;
            let v = vertices.len() / 2;
            vertices.push((1.0 - t) * p_in[0] + t * p_out[0]);
            vertices.push((1.0 - t) * p_in[1] + t * p_out[1]);
            row[j] = v;
        }
    }

    let mut cells: Vec<usize> = Vec::new();
    for j in 0..n_theta {
        let j2 = (j + 1) % n_theta;
        for i in 0..n_r {
            let va = id[i][j];
            let vb = id[i][j2];
            let vc = id[i + 1][j2];
            let vd = id[i + 1][j];
            if collapsed(j) {
                // va == vd
                cells.extend_from_slice(&[va, vb, vc]);
            } else if collapsed(j2) {
                // vb == vc
                cells.extend_from_slice(&[va, vb, vd]);
            } else if (j / nq) % 2 == 0 {
                cells.extend_from_slice(&[va, vb, vc]);
                cells.extend_from_slice(&[va, vc, vd]);
            } else {
                cells.extend_from_slice(&[va, vb, vd]);
                cells.extend_from_slice(&[vb, vc, vd]);
            }
        }
    }

    // Tag boundary rings geometrically.
    let mut facets = Vec::new();
    let tol = 1e-9 * big_l.max(l);
    for j in 0..n_theta {
        let j2 = (j + 1) % n_theta;
        let hole = [id[0][j], id[0][j2]];
        if hole[0] != hole[1] {
            facets.push(Facet { vertices: hole, tag: BoundaryTag::NeumannFree });
        }
        let outer = [id[n_r][j], id[n_r][j2]];
        if outer[0] != outer[1] {
            let y0 = vertices[outer[0] * 2 + 1];
            let y1 = vertices[outer[1] * 2 + 1];
            let on_top = (y0 - l / 2.0).abs() <= tol && (y1 - l / 2.0).abs() <= tol;
            let on_bottom = (y0 + l / 2.0).abs() <= tol && (y1 + l / 2.0).abs() <= tol;
            let tag = if on_top || on_bottom {
                BoundaryTag::NeumannTraction
            } else {
                BoundaryTag::NeumannFree
            };
            facets.push(Facet { vertices: [outer[0], outer[1]], tag });
        }
    }

    Mesh::new(2, vertices, cells, facets)
}

/// Stations along the first-quadrant arc of the ellipse, uniformly spaced in
/// arc length, endpoints exactly (a, 0) and (0, b). All points lie exactly on
/// the ellipse (they are evaluated as (a cos t, b sin t)).
fn ellipse_quadrant_stations(a: f64, b: f64, nq: usize) -> Vec<[f64; 2]> {
    const SAMPLES: usize = 4096;
    let mut arc = vec![0.0; SAMPLES + 1];
    let dt = std::f64::consts::FRAC_PI_2 / SAMPLES as f64;
    for i in 1..=SAMPLES {
        let t = (i as f64 - 0.5) * dt;
        let speed = ((a * t.sin()).powi(2) + (b * t.cos()).powi(2)).sqrt();
        arc[i] = arc[i - 1] + speed * dt;
    }
    let total = arc[SAMPLES];
    let mut out = Vec::with_capacity(nq + 1);
    for j in 0..=nq {
        if j == 0 {
            out.push([a, 0.0]);
        } else if j == nq {
            out.push([0.0, b]);
        } else {
            let target = total * j as f64 / nq as f64;
            let hi = arc.partition_point(|&s| s < target).max(1);
            let frac = (target - arc[hi - 1]) / (arc[hi] - arc[hi - 1]);
            let t = (hi as f64 - 1.0 + frac) * dt;
            out.push([a * t.cos(), b * t.sin()]);
        }
    }
    out
}

/// Stations along the first-quadrant part of the rectangle perimeter, from
/// (L/2, 0) up and across to (0, l/2), with the corner forced onto a station.
fn rectangle_quadrant_stations(big_l: f64, l: f64, nq: usize) -> Result<Vec<[f64; 2]>> {
    let side1 = l / 2.0; // vertical run
    let side2 = big_l / 2.0; // horizontal run
    let n1 = ((nq as f64 * side1 / (side1 + side2)).round() as usize).clamp(1, nq - 1);
    let n2 = nq - n1;
    let mut out = Vec::with_capacity(nq + 1);
    for k in 0..=nq {
        if k == 0 {
            out.push([big_l / 2.0, 0.0]);
        } else if k == nq {
            out.push([0.0, l / 2.0]);
        } else if k <= n1 {
            out.push([big_l / 2.0, side1 * k as f64 / n1 as f64]);
        } else {
            let s = (k - n1) as f64 / n2 as f64;
            out.push([big_l / 2.0 * (1.0 - s), l / 2.0]);
        }
    }
    if out.len() != nq + 1 {
        return Err(Error::Numerical("rectangle station construction failed".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Plain-text mesh format
// ---------------------------------------------------------------------------

/// Parse the `ratemesh` plain-text format:
///
/// ```text
/// ratemesh 1 <dim>
/// v <x> [<y>]          # one line per vertex
/// c <i> <j> [<k>]      # one line per cell, 0-based vertex indices
/// f <i> [<j>] <TAG>    # one line per boundary facet
/// ```
///
/// Tags are `DIRICHLET`, `NEUMANN_TRACTION`, `NEUMANN_FREE`. Blank lines and
/// `#` comments are ignored.
pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut dim = 0usize;
    let mut vertices = Vec::new();
    let mut cells = Vec::new();
    let mut facets = Vec::new();
    let mut saw_header = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        if !saw_header {
            let magic = tokens.next();
            let version = tokens.next();
            let d = tokens.next();
            if magic != Some("ratemesh") {
                return Err(Error::MeshFormat { line, msg: "expected 'ratemesh' header".into() });
            }
            if version != Some("1") {
                return Err(Error::MeshFormat {
                    line,
                    msg: format!("unsupported format version {:?}", version.unwrap_or("")),
                });
            }
            dim = d
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&d| d == 1 || d == 2)
                .ok_or_else(|| Error::MeshFormat { line, msg: "dimension must be 1 or 2".into() })?;
            saw_header = true;
            continue;
        }
        let kind = tokens.next().unwrap();
        let rest: Vec<&str> = tokens.collect();
        match kind {
            "v" => {
                if rest.len() != dim {
                    return Err(Error::MeshFormat {
                        line,
                        msg: format!("vertex line needs {dim} coordinates, got {}", rest.len()),
                    });
                }
                for tok in rest {
                    let x: f64 = tok.parse().map_err(|_| Error::MeshFormat {
                        line,
                        msg: format!("bad coordinate {tok:?}"),
                    })?;
                    vertices.push(x);
                }
            }
            "c" => {
                if rest.len() != dim + 1 {
                    return Err(Error::MeshFormat {
                        line,
                        msg: format!("cell line needs {} indices, got {}", dim + 1, rest.len()),
                    });
                }
                for tok in rest {
                    let i: usize = tok.parse().map_err(|_| Error::MeshFormat {
                        line,
                        msg: format!("bad vertex index {tok:?}"),
                    })?;
                    cells.push(i);
                }
            }
            "f" => {
                if rest.len() != dim + 1 {
                    return Err(Error::MeshFormat {
                        line,
                        msg: format!(
                            "facet line needs {} indices and a tag, got {} tokens",
                            dim,
                            rest.len()
                        ),
                    });
                }
                let mut vs = [0usize; 2];
                for (i, tok) in rest[..dim].iter().enumerate() {
                    vs[i] = tok.parse().map_err(|_| Error::MeshFormat {
                        line,
                        msg: format!("bad vertex index {tok:?}"),
                    })?;
                }
                let tag = BoundaryTag::parse(rest[dim]).ok_or_else(|| Error::MeshFormat {
                    line,
                    msg: format!("unknown boundary tag {:?}", rest[dim]),
                })?;
                facets.push(Facet { vertices: vs, tag });
            }
            other => {
                return Err(Error::MeshFormat {
                    line,
                    msg: format!("unknown record type {other:?}"),
                });
            }
        }
    }
    if !saw_header {
        return Err(Error::MeshFormat { line: 1, msg: "missing 'ratemesh' header".into() });
    }
    Mesh::new(dim, vertices, cells, facets)
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    parse_mesh(&std::fs::read_to_string(path)?)
}

/// Serialize a mesh in the `ratemesh` format (round-trips with
/// [`parse_mesh`]).
pub fn format_mesh(mesh: &Mesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ratemesh 1 {}", mesh.dim);
    for i in 0..mesh.n_vertices() {
        out.push('v');
        for x in mesh.vertex(i) {
            let _ = write!(out, " {x}");
        }
        out.push('\n');
    }
    for k in 0..mesh.n_cells() {
        out.push('c');
        for v in mesh.cell(k) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    for f in mesh.boundary_facets() {
        out.push('f');
        for v in &f.vertices[..mesh.dim] {
            let _ = write!(out, " {v}");
        }
        let _ = writeln!(out, " {}", f.tag.as_str());
    }
    out
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_mesh(mesh))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Mesh constants
// ---------------------------------------------------------------------------

/// Mesh-dependent constants entering the time-step admissibility bound.
#[derive(Clone, Debug)]
pub struct MeshConstants {
    /// Maximum cell diameter.
    pub h: f64,
    pub h_min: f64,
    /// Inverse-inequality constant: `||grad v|| <= (c_inv / h) ||v||` on P1.
    pub c_inv: f64,
    /// Trace constant: `||v||_{L2(boundary)} <= (c_tr / sqrt(h)) ||v||` on P1.
    pub c_tr: f64,
    /// Max over cells of diameter / inradius.
    pub shape_regularity: f64,
    /// h / h_min.
    pub quasi_uniformity: f64,
    /// Human-readable warnings (quasi-uniformity bound violations etc.).
    pub warnings: Vec<String>,
}

/// Options for the generalized eigenvalue estimation.
#[derive(Clone, Copy, Debug)]
pub struct EigenOptions {
    /// Relative stagnation tolerance on the Rayleigh quotient.
    pub tol: f64,
    pub max_iter: usize,
    /// Quasi-uniformity ratio above which a warning is recorded.
    pub quasi_uniformity_bound: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions { tol: 1e-10, max_iter: 20_000, quasi_uniformity_bound: 4.0 }
    }
}

/// Estimate `c_inv` and `c_tr` by power iteration on the generalized
/// eigenproblems `K x = lambda M x` and `B x = lambda M x` (P1 scalar
/// stiffness, mass, and boundary mass), and report shape metrics.
pub fn estimate_inverse_constants(mesh: &Mesh, opts: &EigenOptions) -> Result<MeshConstants> {
    let n = mesh.n_vertices();
    let mut stiffness = SparseSystem::new(n);
    let mut mass = SparseSystem::new(n);
    let nv = mesh.dim + 1;
    let mass_scale = 1.0 / ((nv * (nv + 1)) as f64);
    for k in 0..mesh.n_cells() {
        let c = mesh.cell(k);
        let grads = mesh.cell_gradients(k);
        let vol = mesh.cell_volume(k);
        for i in 0..nv {
            for j in 0..nv {
                let mut kij = 0.0;
                for d in 0..mesh.dim {
                    kij += grads[i][d] * grads[j][d];
                }
                stiffness.add(c[i], c[j], vol * kij);
                let mij = vol * mass_scale * if i == j { 2.0 } else { 1.0 };
                mass.add(c[i], c[j], mij);
            }
        }
    }
    let mut boundary = SparseSystem::new(n);
    for f in mesh.boundary_facets() {
        let measure = mesh.facet_measure(f);
        if mesh.dim == 1 {
            let v = f.vertices[0];
            boundary.add(v, v, 1.0);
        } else {
            let [p, q] = [f.vertices[0], f.vertices[1]];
            boundary.add(p, p, measure / 3.0);
            boundary.add(q, q, measure / 3.0);
            boundary.add(p, q, measure / 6.0);
            boundary.add(q, p, measure / 6.0);
        }
    }

    let mass_factor = mass.factor()?;
    let lambda_inv = generalized_max_eigenvalue(&stiffness, &mass, &mass_factor, opts)?;
    let lambda_tr = generalized_max_eigenvalue(&boundary, &mass, &mass_factor, opts)?;

    let h = mesh.h_max();
    let h_min = mesh.h_min();
    let mut shape: f64 = 0.0;
    for k in 0..mesh.n_cells() {
        let d = mesh.cell_diameter(k);
        let inradius = if mesh.dim == 1 {
            0.5 * mesh.cell_volume(k)
        } else {
            let c = mesh.cell(k);
            let perimeter = dist(mesh.vertex(c[0]), mesh.vertex(c[1]))
                + dist(mesh.vertex(c[1]), mesh.vertex(c[2]))
                + dist(mesh.vertex(c[2]), mesh.vertex(c[0]));
            2.0 * mesh.cell_volume(k) / perimeter
        };
        shape = shape.max(d / inradius);
    }
    let quasi = h / h_min;
    let mut warnings = Vec::new();
    if quasi > opts.quasi_uniformity_bound {
        warnings.push(format!(
            "quasi-uniformity ratio h/h_min = {quasi:.3} exceeds the configured bound \
             {:.3}; the time-step admissibility bound may be pessimistic",
            opts.quasi_uniformity_bound
        ));
    }
    Ok(MeshConstants {
        h,
        h_min,
        c_inv: h * lambda_inv.max(0.0).sqrt(),
        c_tr: h.sqrt() * lambda_tr.max(0.0).sqrt(),
        shape_regularity: shape,
        quasi_uniformity: quasi,
        warnings,
    })
}

/// Largest eigenvalue of `A x = lambda M x` (both symmetric, M positive
/// definite) by power iteration with M-orthonormalization.
fn generalized_max_eigenvalue(
    a: &SparseSystem,
    m: &SparseSystem,
    m_factor: &crate::linalg::LuFactor,
    opts: &EigenOptions,
) -> Result<f64> {
    let n = a.n();
    // Deterministic, non-degenerate start vector.
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let mut s = (i as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x243f6a8885a308d3);
            s ^= s >> 29;
            s = s.wrapping_mul(0xbf58476d1ce4e5b9);
            s ^= s >> 32;
            (s as f64 / u64::MAX as f64) + 0.5
        })
        .collect();
    normalize_m(&mut x, m);
    let mut lambda_prev = f64::INFINITY;
    for it in 0..opts.max_iter {
        let ax = a.matvec(&x);
        let lambda: f64 = x.iter().zip(&ax).map(|(xi, yi)| xi * yi).sum();
        if (lambda - lambda_prev).abs() <= opts.tol * lambda.abs().max(1e-300) {
            return Ok(lambda);
        }
        lambda_prev = lambda;
        x = m_factor.solve(&ax)?;
        normalize_m(&mut x, m);
        if it == opts.max_iter - 1 {
            break;
        }
    }
    Err(Error::Numerical(format!(
        "generalized eigensolve did not reach tolerance {:.1e} within {} iterations \
         (last value {lambda_prev:.6e})",
        opts.tol, opts.max_iter
    )))
}

fn normalize_m(x: &mut [f64], m: &SparseSystem) {
    let mx = m.matvec(x);
    let norm2: f64 = x.iter().zip(&mx).map(|(a, b)| a * b).sum();
    let norm = norm2.max(1e-300).sqrt();
    for v in x.iter_mut() {
        *v /= norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_mesh_basics() {
        let m = build_interval_mesh(1, 0.0, 1.0).unwrap();
        assert_eq!(m.n_vertices(), 2);
        assert_eq!(m.n_cells(), 1);
        assert_eq!(m.cell_volume(0), 1.0);

        let m = build_interval_mesh(64, 0.0, 1.0).unwrap();
        assert_eq!(m.n_cells(), 64);
        assert!((m.h_max() - 1.0 / 64.0).abs() < 1e-15);
        assert!((m.volume() - 1.0).abs() < 1e-14);

        let m = build_interval_mesh(4, -1.0, 1.0).unwrap();
        assert!((m.volume() - 2.0).abs() < 1e-15);
        assert_eq!(m.tagged_vertices(BoundaryTag::Dirichlet), vec![0, 4]);
    }

    #[test]
    fn interval_mesh_rejects_bad_arguments() {
        assert!(matches!(build_interval_mesh(0, 0.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_interval_mesh(4, 1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_interval_mesh(4, 2.0, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unit_square_volume_and_orientation() {
        let m = unit_square_two_cells();
        assert!((m.volume() - 1.0).abs() < 1e-15);
        for k in 0..m.n_cells() {
            assert!(m.cell_volume(k) > 0.0);
        }
    }

    #[test]
    fn parse_round_trip() {
        let m = unit_square_two_cells();
        let text = format_mesh(&m);
        let m2 = parse_mesh(&text).unwrap();
        assert_eq!(m2.n_vertices(), m.n_vertices());
        assert_eq!(m2.n_cells(), m.n_cells());
        assert_eq!(m2.boundary_facets().len(), m.boundary_facets().len());
        assert!((m2.volume() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parser_reports_line_numbers() {
        let text = "ratemesh 1 2\nv 0 0\nv 1 0\nv 0 1\nc 0 1 oops\n";
        match parse_mesh(text) {
            Err(Error::MeshFormat { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("oops"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(parse_mesh(""), Err(Error::MeshFormat { .. })));
        assert!(matches!(parse_mesh("ratemesh 2 2\n"), Err(Error::MeshFormat { line: 1, .. })));
    }

    #[test]
    fn untagged_boundary_is_rejected() {
        // unit square with one boundary edge missing
        let text = "ratemesh 1 2\n\
                    v 0 0\nv 1 0\nv 1 1\nv 0 1\n\
                    c 0 1 2\nc 0 2 3\n\
                    f 0 1 DIRICHLET\nf 1 2 DIRICHLET\nf 2 3 DIRICHLET\n";
        match parse_mesh(text) {
            Err(Error::MeshValidation(msg)) => assert!(msg.contains("no tag"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn interior_facet_tag_is_rejected() {
        let text = "ratemesh 1 2\n\
                    v 0 0\nv 1 0\nv 1 1\nv 0 1\n\
                    c 0 1 2\nc 0 2 3\n\
                    f 0 1 DIRICHLET\nf 1 2 DIRICHLET\nf 2 3 DIRICHLET\nf 3 0 DIRICHLET\n\
                    f 0 2 NEUMANN_FREE\n";
        match parse_mesh(text) {
            Err(Error::MeshValidation(msg)) => {
                assert!(msg.contains("not on the topological boundary"), "{msg}")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tag_is_a_format_error() {
        let text = "ratemesh 1 1\nv 0\nv 1\nc 0 1\nf 0 CLAMPED\nf 1 DIRICHLET\n";
        match parse_mesh(text) {
            Err(Error::MeshFormat { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("CLAMPED"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn plate_volume_matches_geometry() {
        // |plate| = L*l - pi*a*b
        for refinement in [0u32, 1, 3] {
            let m = build_plate_with_hole(1.0, 1.0, 0.3, 0.45, refinement).unwrap();
            let exact = 1.0 - std::f64::consts::PI * 0.3 * 0.45;
            let rel = (m.volume() - exact).abs() / exact;
            assert!(rel < 0.01, "refinement {refinement}: rel volume error {rel}");
        }
    }

    #[test]
    fn tangent_plate_builds_and_matches_volume() {
        // The hole may touch the top/bottom boundary (2b == l); the contact
        // columns collapse to single vertices.
        let m = build_plate_with_hole(1.0, 1.0, 0.3, 0.5, 3).unwrap();
        let exact = 1.0 - std::f64::consts::PI * 0.15;
        let rel = (m.volume() - exact).abs() / exact;
        assert!(rel < 0.01, "rel volume error {rel}");
        for k in 0..m.n_cells() {
            assert!(m.cell_volume(k) > 0.0);
        }
    }

    #[test]
    fn plate_rejects_bad_geometry() {
        assert!(build_plate_with_hole(1.0, 1.0, 0.6, 0.5, 1).is_err()); // a > b
        assert!(build_plate_with_hole(1.0, 1.0, 0.5, 0.5, 1).is_err()); // 2a == L
        assert!(build_plate_with_hole(1.0, 1.0, 0.3, 0.51, 1).is_err()); // 2b > l
        assert!(build_plate_with_hole(1.0, 1.0, 0.0, 0.5, 1).is_err());
        assert!(build_plate_with_hole(1.0, 1.0, 0.3, 0.5, 9).is_err());
    }

    #[test]
    fn hole_vertices_lie_on_the_ellipse() {
        let (a, b) = (0.3, 0.45);
        let m = build_plate_with_hole(1.0, 1.0, a, b, 2).unwrap();
        let mut hole_vertices = std::collections::BTreeSet::new();
        for f in m.boundary_facets() {
            let p = m.vertex(f.vertices[0]);
            let q = m.vertex(f.vertices[1]);
            let interior = |v: &[f64]| v[0].abs() < 0.49 && v[1].abs() < 0.49;
            if interior(p) && interior(q) {
                hole_vertices.insert(f.vertices[0]);
                hole_vertices.insert(f.vertices[1]);
            }
        }
        assert!(!hole_vertices.is_empty());
        for v in hole_vertices {
            let p = m.vertex(v);
            let r = (p[0] / a).powi(2) + (p[1] / b).powi(2);
            assert!((r - 1.0).abs() < 1e-10, "vertex {p:?} off the ellipse by {}", r - 1.0);
        }
    }

    fn has_vertex_near(m: &Mesh, x: f64, y: f64, tol: f64) -> bool {
        (0..m.n_vertices()).any(|i| {
            let p = m.vertex(i);
            (p[0] - x).abs() <= tol && (p[1] - y).abs() <= tol
        })
    }

    #[test]
    fn plate_vertices_are_mirror_symmetric() {
        let m = build_plate_with_hole(1.0, 1.0, 0.3, 0.5, 1).unwrap();
        for i in 0..m.n_vertices() {
            let p = m.vertex(i);
            assert!(has_vertex_near(&m, -p[0], p[1], 1e-12), "no mirror of {p:?} across y-axis");
            assert!(has_vertex_near(&m, p[0], -p[1], 1e-12), "no mirror of {p:?} across x-axis");
        }
    }

    #[test]
    fn circular_hole_vertices_are_rotation_symmetric() {
        let m = build_plate_with_hole(1.0, 1.0, 0.3, 0.3, 1).unwrap();
        for i in 0..m.n_vertices() {
            let p = m.vertex(i);
            // 90-degree rotation maps the vertex set to itself
            assert!(has_vertex_near(&m, -p[1], p[0], 1e-9), "no 90-degree image of {p:?}");
        }
    }

    #[test]
    fn plate_boundary_tags() {
        let m = build_plate_with_hole(1.0, 1.0, 0.3, 0.45, 1).unwrap();
        let mut traction = 0.0;
        let mut free = 0.0;
        for f in m.boundary_facets() {
            match f.tag {
                BoundaryTag::NeumannTraction => traction += m.facet_measure(f),
                BoundaryTag::NeumannFree => free += m.facet_measure(f),
                BoundaryTag::Dirichlet => panic!("plate has no Dirichlet boundary"),
            }
        }
        // top and bottom edges have total length 2L
        assert!((traction - 2.0).abs() < 1e-12, "traction length {traction}");
        // sides have total length 2l, the rest is the hole perimeter
        assert!(free > 2.0);
    }

    #[test]
    fn single_cell_inverse_constants_match_hand_eigenproblem() {
        // On one P1 cell over (0, 1): K = [[1,-1],[-1,1]], M = [[2,1],[1,2]]/6.
        // K x = lambda M x has eigenvalues {0, 12}; B = I against M gives
        // {2, 6}. Hence c_inv = sqrt(12), c_tr = sqrt(6).
        let m = build_interval_mesh(1, 0.0, 1.0).unwrap();
        let consts = estimate_inverse_constants(&m, &EigenOptions::default()).unwrap();
        assert!((consts.c_inv - 12.0_f64.sqrt()).abs() < 1e-6, "c_inv = {}", consts.c_inv);
        assert!((consts.c_tr - 6.0_f64.sqrt()).abs() < 1e-6, "c_tr = {}", consts.c_tr);
        assert_eq!(consts.shape_regularity, 2.0);
        assert_eq!(consts.quasi_uniformity, 1.0);
        assert!(consts.warnings.is_empty());
    }

    #[test]
    fn inverse_constant_is_resolution_stable() {
        let c4 = estimate_inverse_constants(
            &build_interval_mesh(4, 0.0, 1.0).unwrap(),
            &EigenOptions::default(),
        )
        .unwrap();
        let c64 = estimate_inverse_constants(
            &build_interval_mesh(64, 0.0, 1.0).unwrap(),
            &EigenOptions::default(),
        )
        .unwrap();
        assert!(c4.c_inv > 0.0 && c4.c_tr > 0.0);
        assert!((c4.c_inv - c64.c_inv).abs() / c64.c_inv < 0.2);
        // uniform 1D P1: c_inv -> sqrt(12) from below
        assert!((c64.c_inv - 12.0_f64.sqrt()).abs() < 0.05);
    }

    #[test]
    fn eigensolve_budget_exhaustion_is_reported() {
        let m = build_interval_mesh(16, 0.0, 1.0).unwrap();
        let opts = EigenOptions { tol: 1e-16, max_iter: 3, ..Default::default() };
        assert!(matches!(
            estimate_inverse_constants(&m, &opts),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn quasi_uniformity_warning_fires() {
        // Hand-built interval mesh with one long and one short cell.
        let vertices = vec![0.0, 0.75, 1.0];
        let cells = vec![0, 1, 1, 2];
        let facets = vec![
            Facet { vertices: [0, 0], tag: BoundaryTag::Dirichlet },
            Facet { vertices: [2, 0], tag: BoundaryTag::Dirichlet },
        ];
        let m = Mesh::new(1, vertices, cells, facets).unwrap();
        let consts = estimate_inverse_constants(&m, &EigenOptions::default()).unwrap();
        assert!((consts.quasi_uniformity - 3.0).abs() < 1e-12);
        assert!(consts.warnings.is_empty());
        let strict = EigenOptions { quasi_uniformity_bound: 2.0, ..Default::default() };
        let consts = estimate_inverse_constants(&m, &strict).unwrap();
        assert_eq!(consts.warnings.len(), 1);
    }

    #[test]
    fn locate_cell_finds_probe_positions() {
        let m = build_interval_mesh(4, 0.0, 1.0).unwrap();
        // 0.75 sits on a cell interface; the lower cell wins the scan
        assert_eq!(m.locate_cell(&[0.75]), Some(2));
        assert_eq!(m.locate_cell(&[0.7]), Some(2));
        assert_eq!(m.locate_cell(&[0.8]), Some(3));
        assert_eq!(m.locate_cell(&[2.0]), None);

        let sq = unit_square_two_cells();
        assert!(sq.locate_cell(&[0.75, 0.25]).is_some());
        assert_eq!(sq.locate_cell(&[1.5, 0.5]), None);
    }
}
