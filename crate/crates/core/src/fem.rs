//! P1 finite elements on a structured triangulation of the unit square.
//!
//! The state equation `-div(a grad y) = u` with homogeneous Dirichlet data is
//! discretized as `K y_int = (M u)_int`: `K` is the stiffness on interior
//! nodes (boundary rows and columns eliminated), `M` the consistent mass on
//! all nodes. The variable coefficient is sampled at triangle centroids.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::hilbert::{wnorm, NodalField, Weights};
use crate::linsolve::{cg_solve, matvec, CgConfig, SparseSpdMatrix};

pub type Point = [f64; 2];

/// `(N+1) x (N+1)` grid on `[0,1]^2`, each cell cut along its
/// lower-left/upper-right diagonal. Node `(i, j)` has index `j (N+1) + i`.
#[derive(Debug, Clone)]
pub struct StructuredMesh {
    h: f64,
    cells: usize,
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_mask: Vec<bool>,
    interior: Vec<usize>,
    stiffness_pattern: SparseSpdMatrix,
    // for each triangle, the stiffness value slot of local pair (a, b) = 3a + b
    element_slots: Vec<[Option<usize>; 9]>,
    mass: SparseSpdMatrix,
    lumped: Weights,
}

impl StructuredMesh {
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of cells along each side.
    pub fn cells_per_side(&self) -> usize {
        self.cells
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary_mask
    }

    /// Global indices of the interior nodes, in increasing order.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub fn mass(&self) -> &SparseSpdMatrix {
        &self.mass
    }

    /// Lumped mass (row sums of the consistent mass).
    pub fn lumped(&self) -> &Weights {
        &self.lumped
    }

    pub fn interpolate(&self, f: impl Fn(Point) -> f64) -> NodalField {
        NodalField::from_vec(self.nodes.iter().map(|&x| f(x)).collect())
    }

    fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&g| full[g]).collect()
    }

    fn extend(&self, interior_values: &[f64]) -> NodalField {
        let mut out = NodalField::zeros(self.num_nodes());
        for (&g, v) in self.interior.iter().zip(interior_values) {
            out[g] = *v;
        }
        out
    }
}

fn triangle_area(p: [Point; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

/// P1 element stiffness `int_T grad phi_a . grad phi_b` for unit coefficient.
fn local_stiffness(p: [Point; 3]) -> [[f64; 3]; 3] {
    let area = triangle_area(p);
    // grad phi_a = rot90(edge opposite a) / (2 area)
    let grads: [[f64; 2]; 3] = std::array::from_fn(|a| {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        [(p[b][1] - p[c][1]) / (2.0 * area), (p[c][0] - p[b][0]) / (2.0 * area)]
    });
    std::array::from_fn(|a| std::array::from_fn(|b| area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1])))
}

/// Builds the uniform mesh with `1/h` cells per side.
pub fn build_mesh(h: f64) -> Result<StructuredMesh> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(usage(format!("mesh size {h} must lie in (0, 1]")));
    }
    let n = (1.0 / h).round();
    if (n * h - 1.0).abs() > 1e-12 {
        return Err(usage(format!("1/h = {} is not an integer", 1.0 / h)));
    }
    let n = n as usize;
    let side = n + 1;
    let id = |i: usize, j: usize| j * side + i;

    let mut nodes = Vec::with_capacity(side * side);
    let mut boundary_mask = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            nodes.push([i as f64 / n as f64, j as f64 / n as f64]);
            boundary_mask.push(i == 0 || j == 0 || i == n || j == n);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }

    let mut interior = Vec::new();
    let mut interior_of = vec![None; nodes.len()];
    for (g, &b) in boundary_mask.iter().enumerate() {
        if !b {
            interior_of[g] = Some(interior.len());
            interior.push(g);
        }
    }

    let mut pattern_triplets = Vec::new();
    let mut mass_triplets = Vec::new();
    for tri in &triangles {
        let p = tri.map(|g| nodes[g]);
        let area = triangle_area(p);
        for a in 0..3 {
            for b in 0..3 {
                let m = if a == b { area / 6.0 } else { area / 12.0 };
                mass_triplets.push((tri[a], tri[b], m));
                if let (Some(ia), Some(ib)) = (interior_of[tri[a]], interior_of[tri[b]]) {
                    pattern_triplets.push((ia, ib, 0.0));
                }
            }
        }
    }
    let stiffness_pattern = SparseSpdMatrix::from_triplets(interior.len(), &pattern_triplets)?;
    let element_slots = triangles
        .iter()
        .map(|tri| {
            std::array::from_fn(|ab| {
                let (a, b) = (ab / 3, ab % 3);
                match (interior_of[tri[a]], interior_of[tri[b]]) {
                    (Some(ia), Some(ib)) => stiffness_pattern.slot(ia, ib),
                    _ => None,
                }
            })
        })
        .collect();
    let mass = SparseSpdMatrix::from_triplets(nodes.len(), &mass_triplets)?;
    let lumped = Weights::new(mass.row_sums())?;

    Ok(StructuredMesh {
        h: 1.0 / n as f64,
        cells: n,
        nodes,
        triangles,
        boundary_mask,
        interior,
        stiffness_pattern,
        element_slots,
        mass,
        lumped,
    })
}

/// One realization of the four uniform random variables driving the coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleXi(pub [f64; 4]);

impl SampleXi {
    pub fn new(xi: [f64; 4]) -> Result<Self> {
        if xi.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(usage(format!("sample components {xi:?} outside [-1, 1]")));
        }
        Ok(SampleXi(xi))
    }

    pub fn zero() -> Self {
        SampleXi([0.0; 4])
    }
}

/// `a(x, xi) = exp(xi1 cos(1.1 pi x1) + xi2 cos(1.2 pi x1) + xi3 sin(1.3 pi x2) + xi4 sin(1.4 pi x2))`
pub fn coefficient(x: Point, xi: &SampleXi) -> f64 {
    let [x1, x2] = x;
    let s = xi.0;
    (s[0] * (1.1 * PI * x1).cos()
        + s[1] * (1.2 * PI * x1).cos()
        + s[2] * (1.3 * PI * x2).sin()
        + s[3] * (1.4 * PI * x2).sin())
    .exp()
}

/// Discrete operators for one coefficient realization on a shared mesh.
#[derive(Debug, Clone)]
pub struct AssembledOperators {
    mesh: Arc<StructuredMesh>,
    stiffness: SparseSpdMatrix,
}

impl AssembledOperators {
    pub fn mesh(&self) -> &StructuredMesh {
        &self.mesh
    }

    /// Stiffness on interior nodes (Dirichlet rows and columns eliminated).
    pub fn stiffness(&self) -> &SparseSpdMatrix {
        &self.stiffness
    }

    /// Consistent mass on all nodes.
    pub fn mass(&self) -> &SparseSpdMatrix {
        &self.mesh.mass
    }

    pub fn lumped(&self) -> &Weights {
        &self.mesh.lumped
    }
}

/// Stiffness assembly for an arbitrary coefficient evaluated at centroids.
pub fn assemble_with_coefficient(mesh: &Arc<StructuredMesh>, coef: impl Fn(Point) -> f64) -> AssembledOperators {
    let mut values = vec![0.0; mesh.stiffness_pattern.nnz()];
    for (tri, slots) in mesh.triangles.iter().zip(&mesh.element_slots) {
        let p = tri.map(|g| mesh.nodes[g]);
        let centroid = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
        let a = coef(centroid);
        let local = local_stiffness(p);
        for (ab, slot) in slots.iter().enumerate() {
            if let Some(k) = slot {
                values[*k] += a * local[ab / 3][ab % 3];
            }
        }
    }
    AssembledOperators { mesh: Arc::clone(mesh), stiffness: mesh.stiffness_pattern.with_values(values) }
}

pub fn assemble(mesh: &Arc<StructuredMesh>, xi: &SampleXi) -> AssembledOperators {
    assemble_with_coefficient(mesh, |x| coefficient(x, xi))
}

fn check_field(mesh: &StructuredMesh, u: &NodalField, what: &str) -> Result<()> {
    if u.len() != mesh.num_nodes() {
        return Err(usage(format!("{what}: field has {} values, mesh has {} nodes", u.len(), mesh.num_nodes())));
    }
    if !u.is_finite() {
        return Err(usage(format!("{what}: non-finite input field")));
    }
    Ok(())
}

/// Solves `K x_int = (M f)_int` and extends by zero on the boundary.
fn solve_with_mass_load(ops: &AssembledOperators, f: &NodalField, cfg: &CgConfig) -> Result<NodalField> {
    let load = matvec(ops.mass(), f.as_slice())?;
    let rhs = ops.mesh.restrict(&load);
    let sol = cg_solve(&ops.stiffness, &rhs, cfg)?;
    Ok(ops.mesh.extend(&sol.x))
}

pub fn solve_state_with(ops: &AssembledOperators, u: &NodalField, cfg: &CgConfig) -> Result<NodalField> {
    check_field(&ops.mesh, u, "solve_state")?;
    solve_with_mass_load(ops, u, cfg)
}

/// State `y` with `K y_int = (M u)_int`, `y = 0` on the boundary.
pub fn solve_state(ops: &AssembledOperators, u: &NodalField) -> Result<NodalField> {
    solve_state_with(ops, u, &CgConfig::default())
}

pub fn solve_adjoint_with(
    ops: &AssembledOperators,
    y: &NodalField,
    y_d: &NodalField,
    cfg: &CgConfig,
) -> Result<NodalField> {
    check_field(&ops.mesh, y, "solve_adjoint")?;
    check_field(&ops.mesh, y_d, "solve_adjoint")?;
    solve_with_mass_load(ops, &y.sub(y_d), cfg)
}

/// Adjoint `p` with `K p_int = (M (y - y_d))_int`, `p = 0` on the boundary.
pub fn solve_adjoint(ops: &AssembledOperators, y: &NodalField, y_d: &NodalField) -> Result<NodalField> {
    solve_adjoint_with(ops, y, y_d, &CgConfig::default())
}

/// Lumped-weight `L2` distance between `a` and the nodal interpolant of `exact`.
pub fn l2_error(mesh: &StructuredMesh, a: &NodalField, exact: impl Fn(Point) -> f64) -> Result<f64> {
    wnorm(&a.sub(&mesh.interpolate(exact)), &mesh.lumped)
}
