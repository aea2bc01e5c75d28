//! Plane finite element analysis on the design grid.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, SMatrix, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::fields::GridDomain;
use crate::linsolve::{self, SolverBackend, SparseSymmetric};

pub type ElementMatrix = SMatrix<f64, 8, 8>;
pub type StrainDisplacement = SMatrix<f64, 3, 8>;
pub type ElementVector = SMatrix<f64, 8, 1>;

/// Lower bound of the power-law interpolation; keeps void elements SPD.
pub const PHI_MIN: f64 = 1e-9;

/// Relative eigenvalue gap below which a stress state counts as isotropic.
pub const ISOTROPIC_GAP: f64 = 1e-6;

const GAUSS: f64 = 0.577_350_269_189_625_8;
const NODE_SIGNS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

/// Square bilinear element with precomputed strain-displacement matrices.
#[derive(Debug, Clone)]
pub struct QuadElement {
    pub b_gp: [StrainDisplacement; 4],
    pub gauss_weights: [f64; 4],
    pub b_center: StrainDisplacement,
    pub det_j: f64,
    pub element_size: f64,
}

impl QuadElement {
    pub fn new(element_size: f64) -> Self {
        let pts = [(-GAUSS, -GAUSS), (GAUSS, -GAUSS), (GAUSS, GAUSS), (-GAUSS, GAUSS)];
        Self {
            b_gp: pts.map(|(xi, eta)| strain_displacement(xi, eta, element_size)),
            gauss_weights: [1.0; 4],
            b_center: strain_displacement(0.0, 0.0, element_size),
            det_j: element_size * element_size / 4.0,
            element_size,
        }
    }

    /// `sum_gp w detJ (B u)(B u)^T`, the strain outer product that turns
    /// `u^T K(D) u` into `tr(Q D)`.
    pub fn strain_moment(&self, ue: &ElementVector) -> Matrix3<f64> {
        let mut q = Matrix3::zeros();
        for (b, w) in self.b_gp.iter().zip(self.gauss_weights) {
            let eps = b * ue;
            q += eps * eps.transpose() * (w * self.det_j);
        }
        q
    }
}

fn strain_displacement(xi: f64, eta: f64, size: f64) -> StrainDisplacement {
    let mut b = StrainDisplacement::zeros();
    let scale = 2.0 / size;
    for (i, &(sx, sy)) in NODE_SIGNS.iter().enumerate() {
        let dx = 0.25 * sx * (1.0 + eta * sy) * scale;
        let dy = 0.25 * sy * (1.0 + xi * sx) * scale;
        b[(0, 2 * i)] = dx;
        b[(1, 2 * i + 1)] = dy;
        b[(2, 2 * i)] = dy;
        b[(2, 2 * i + 1)] = dx;
    }
    b
}

/// `K_e = sum_gp w B^T D B detJ` with 2x2 Gauss quadrature.
pub fn element_stiffness(d: &Matrix3<f64>, elem: &QuadElement) -> ElementMatrix {
    let mut ke = ElementMatrix::zeros();
    for (b, w) in elem.b_gp.iter().zip(elem.gauss_weights) {
        ke += b.transpose() * d * b * (w * elem.det_j);
    }
    (ke + ke.transpose()) * 0.5
}

/// Power-law factor `phi_min + (1 - phi_min) phi^p`.
pub fn penalty_factor(phi: f64, p: f64) -> f64 {
    PHI_MIN + (1.0 - PHI_MIN) * phi.powf(p)
}

pub fn penalty_factor_derivative(phi: f64, p: f64) -> f64 {
    if phi <= 0.0 {
        if p == 1.0 {
            1.0 - PHI_MIN
        } else {
            0.0
        }
    } else {
        (1.0 - PHI_MIN) * p * phi.powf(p - 1.0)
    }
}

pub fn penalized_stiffness(phi: f64, ke: &ElementMatrix, p: f64) -> ElementMatrix {
    ke * penalty_factor(phi, p)
}

/// Fixed displacement components and nodal loads on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConditions {
    fixed: Vec<bool>,
    force: Vec<f64>,
}

impl BoundaryConditions {
    pub fn new(domain: &GridDomain) -> Self {
        let n = 2 * domain.n_nodes();
        Self {
            fixed: vec![false; n],
            force: vec![0.0; n],
        }
    }

    /// Left edge clamped, unit downward load at the middle of the right edge.
    pub fn cantilever(domain: &GridDomain) -> Self {
        let mut bc = Self::new(domain);
        for iy in 0..=domain.ny() {
            bc.fix(domain.node_index(0, iy), true, true);
        }
        bc.load(domain.node_index(domain.nx(), domain.ny() / 2), 0.0, -1.0);
        bc
    }

    pub fn fix(&mut self, node: usize, x: bool, y: bool) {
        self.fixed[2 * node] |= x;
        self.fixed[2 * node + 1] |= y;
    }

    pub fn load(&mut self, node: usize, fx: f64, fy: f64) {
        self.force[2 * node] += fx;
        self.force[2 * node + 1] += fy;
    }

    pub fn n_dofs(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_fixed(&self, dof: usize) -> bool {
        self.fixed[dof]
    }

    pub fn fixed_dofs(&self) -> impl Iterator<Item = usize> + '_ {
        self.fixed.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i)
    }

    pub fn force(&self) -> &[f64] {
        &self.force
    }

    pub fn loaded_dofs(&self) -> impl Iterator<Item = usize> + '_ {
        self.force.iter().enumerate().filter(|(_, &f)| f != 0.0).map(|(i, _)| i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed.iter().zip(&self.force).any(|(&fx, &f)| fx && f != 0.0) {
            return Err(Error::invalid("load applied on a fixed dof"));
        }
        let xs = self.fixed.iter().step_by(2).filter(|&&f| f).count();
        let ys = self.fixed.iter().skip(1).step_by(2).filter(|&&f| f).count();
        if xs + ys < 3 || xs == 0 || ys == 0 {
            return Err(Error::invalid("boundary conditions leave rigid-body modes"));
        }
        Ok(())
    }

    /// Parses `fix ix iy [dx dy]` and `load ix iy fx fy` records.
    pub fn parse(text: &str, domain: &GridDomain, origin: &Path) -> Result<Self> {
        let mut bc = Self::new(domain);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::parse(origin, i + 1, msg);
            let tok: Vec<&str> = line.split_whitespace().collect();
            let idx = |s: &str| s.parse::<usize>().map_err(|_| err("bad node index"));
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            if tok.len() < 3 {
                return Err(err("expected a record kind and node coordinates"));
            }
            let (ix, iy) = (idx(tok[1])?, idx(tok[2])?);
            if ix > domain.nx() || iy > domain.ny() {
                return Err(err("node outside the grid"));
            }
            let node = domain.node_index(ix, iy);
            match (tok[0], tok.len()) {
                ("fix", 3) => bc.fix(node, true, true),
                ("fix", 5) => bc.fix(node, num(tok[3])? != 0.0, num(tok[4])? != 0.0),
                ("load", 5) => bc.load(node, num(tok[3])?, num(tok[4])?),
                _ => return Err(err("unknown record; expected `fix ix iy [dx dy]` or `load ix iy fx fy`")),
            }
        }
        bc.validate()?;
        Ok(bc)
    }

    pub fn read(path: &Path, domain: &GridDomain) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, domain, path)
    }

    pub fn to_text(&self, domain: &GridDomain) -> String {
        let mut out = String::new();
        for n in 0..domain.n_nodes() {
            let (ix, iy) = domain.node_coords(n);
            let (fx, fy) = (self.fixed[2 * n], self.fixed[2 * n + 1]);
            if fx || fy {
                out.push_str(&format!("fix {ix} {iy} {} {}\n", fx as u8, fy as u8));
            }
        }
        for n in 0..domain.n_nodes() {
            let (ix, iy) = domain.node_coords(n);
            let (fx, fy) = (self.force[2 * n], self.force[2 * n + 1]);
            if fx != 0.0 || fy != 0.0 {
                out.push_str(&format!("load {ix} {iy} {fx} {fy}\n"));
            }
        }
        out
    }
}

/// Global displacement vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub u: Vec<f64>,
}

impl StateVector {
    pub fn gather(&self, dofs: &[usize; 8]) -> ElementVector {
        ElementVector::from_fn(|i, _| self.u[dofs[i]])
    }

    /// `1/2 F^T U`.
    pub fn compliance(&self, bc: &BoundaryConditions) -> f64 {
        0.5 * self.u.iter().zip(bc.force()).map(|(u, f)| u * f).sum::<f64>()
    }
}

/// Grid, element and constraints: everything needed to assemble and solve.
#[derive(Debug, Clone)]
pub struct FeModel {
    pub domain: GridDomain,
    pub element: QuadElement,
    pub bc: BoundaryConditions,
    free_index: Vec<usize>,
    n_free: usize,
    pattern: SparseSymmetric,
    pub backend: SolverBackend,
}

const CONSTRAINED: usize = usize::MAX;


impl FeModel {
    pub fn new(domain: GridDomain, bc: BoundaryConditions) -> Result<Self> {
        if bc.n_dofs() != 2 * domain.n_nodes() {
            return Err(Error::invalid("boundary conditions do not match the grid"));
        }
        bc.validate()?;
        // dofs without any active element carry no stiffness and are dropped
        let mut touched = vec![false; bc.n_dofs()];
        for e in domain.active_elements() {
            for d in domain.element_dofs(e) {
                touched[d] = true;
            }
        }
        if bc.loaded_dofs().any(|d| !touched[d]) {
            return Err(Error::invalid("load applied outside the active domain"));
        }
        let mut free_index = vec![CONSTRAINED; bc.n_dofs()];
        let mut n_free = 0;
        for d in 0..bc.n_dofs() {
            if touched[d] && !bc.is_fixed(d) {
                free_index[d] = n_free;
                n_free += 1;
            }
        }
        let element = QuadElement::new(domain.element_size());
        let local: Vec<[usize; 8]> = domain
            .active_elements()
            .map(|e| domain.element_dofs(e).map(|d| free_index[d]))
            .collect();
        let pattern = SparseSymmetric::from_element_pattern(n_free, local.iter().map(|d| &d[..]));
        Ok(Self {
            domain,
            element,
            bc,
            free_index,
            n_free,
            pattern,
            backend: SolverBackend::Direct,
        })
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    /// Assembles the reduced stiffness over free dofs from per-element
    /// matrices (`None` skips an element).
    pub fn assemble<F>(&self, mut element_matrix: F) -> SparseSymmetric
    where
        F: FnMut(usize) -> Option<ElementMatrix>,
    {
        let mut k = self.pattern.clone();
        for e in self.domain.active_elements() {
            let Some(ke) = element_matrix(e) else { continue };
            let dofs = self.domain.element_dofs(e).map(|d| self.free_index[d]);
            k.scatter(&dofs, |a, b| ke[(a, b)]);
        }
        k
    }

    /// Solves `K U = F` for the given per-element stiffness matrices.
    pub fn assemble_and_solve<F>(&self, element_matrix: F) -> Result<StateVector>
    where
        F: FnMut(usize) -> Option<ElementMatrix>,
    {
        let k = self.assemble(element_matrix);
        self.solve_reduced(&k)
    }

    pub fn solve_reduced(&self, k: &SparseSymmetric) -> Result<StateVector> {
        let mut rhs = vec![0.0; self.n_free];
        for (d, &f) in self.bc.force().iter().enumerate() {
            let i = self.free_index[d];
            if i != CONSTRAINED {
                rhs[i] = f;
            }
        }
        let x = linsolve::solve(k, &rhs, self.backend)?;
        let mut u = vec![0.0; self.bc.n_dofs()];
        for (d, &i) in self.free_index.iter().enumerate() {
            if i != CONSTRAINED {
                u[d] = x[i];
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solve("non-finite displacement".into()));
        }
        Ok(StateVector { u })
    }

    pub fn element_displacement(&self, state: &StateVector, e: usize) -> ElementVector {
        state.gather(&self.domain.element_dofs(e))
    }
}

/// Centre-point strain and stress of one element plus its principal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalStress {
    pub eigenvalues: [f64; 2],
    pub rotation: Matrix2<f64>,
    pub sigma: Vector3<f64>,
    pub epsilon: Vector3<f64>,
}

/// `eps = B U_e` at the element centre, `sigma = D_e eps`.
pub fn element_stress_strain(ue: &ElementVector, d: &Matrix3<f64>, elem: &QuadElement) -> (Vector3<f64>, Vector3<f64>) {
    let eps: Vector3<f64> = elem.b_center * ue;
    (eps, d * eps)
}

pub fn stress_tensor(sigma: &Vector3<f64>) -> Matrix2<f64> {
    Matrix2::new(sigma[0], sigma[2], sigma[2], sigma[1])
}

/// Rotation whose rows are the principal directions in ascending eigenvalue
/// order, sign-matched to `prev`. Isotropic states return `prev`.
pub fn principal_directions(sigma: &Matrix2<f64>, prev: &Matrix2<f64>) -> (Matrix2<f64>, [f64; 2]) {
    let eig = SymmetricEigen::new(*sigma);
    let (lo, hi) = if eig.eigenvalues[0] <= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let gamma = [eig.eigenvalues[lo], eig.eigenvalues[hi]];
    let scale = gamma[0].abs().max(gamma[1].abs());
    if scale == 0.0 || gamma[1] - gamma[0] < ISOTROPIC_GAP * scale {
        return (*prev, gamma);
    }
    let v1 = eig.eigenvectors.column(lo).normalize();
    let mut v2 = eig.eigenvectors.column(hi).normalize();
    if v1[0] * v2[1] - v1[1] * v2[0] < 0.0 {
        v2 = -v2;
    }
    let r = Matrix2::new(v1[0], v1[1], v2[0], v2[1]);
    let flipped = -r;
    if (flipped - prev).norm_squared() < (r - prev).norm_squared() {
        (flipped, gamma)
    } else {
        (r, gamma)
    }
}

/// Full principal decomposition of one element.
pub fn principal_stress(ue: &ElementVector, d: &Matrix3<f64>, elem: &QuadElement, prev: &Matrix2<f64>) -> PrincipalStress {
    let (epsilon, sigma) = element_stress_strain(ue, d, elem);
    let (rotation, eigenvalues) = principal_directions(&stress_tensor(&sigma), prev);
    PrincipalStress {
        eigenvalues,
        rotation,
        sigma,
        epsilon,
    }
}
