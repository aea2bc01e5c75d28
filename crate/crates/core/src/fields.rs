//! Design domain, per-element design fields and the cell fraction formulas.
//!
//! All per-element arrays are flat and row-major: element `(ix, iy)` lives at
//! `iy * nx + ix`. Grid nodes follow the same convention with `nx + 1` nodes
//! per row, and `y` points up.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::compiler::FrameGraph;
use crate::error::{Error, Result};

/// Regular grid of square bilinear elements with an optional active mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDomain {
    nx: usize,
    ny: usize,
    element_size: f64,
    active: Vec<bool>,
}

impl GridDomain {
    pub fn new(nx: usize, ny: usize, element_size: f64) -> Result<Self> {
        Self::with_mask(nx, ny, element_size, vec![true; nx * ny])
    }

    pub fn with_mask(nx: usize, ny: usize, element_size: f64, active: Vec<bool>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid(format!("grid must be at least 1x1, got {nx}x{ny}")));
        }
        if !(element_size > 0.0) || !element_size.is_finite() {
            return Err(Error::invalid(format!("element size must be positive, got {element_size}")));
        }
        if active.len() != nx * ny {
            return Err(Error::invalid(format!(
                "active mask has {} entries, expected {}",
                active.len(),
                nx * ny
            )));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::invalid("active mask selects no element"));
        }
        Ok(Self {
            nx,
            ny,
            element_size,
            active,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn element_size(&self) -> f64 {
        self.element_size
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, e: usize) -> bool {
        self.active[e]
    }

    /// Total number of grid cells, active or not.
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Number of active elements (the `N` of the volume constraint).
    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn element_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn element_coords(&self, e: usize) -> (usize, usize) {
        (e % self.nx, e / self.nx)
    }

    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    pub fn node_coords(&self, n: usize) -> (usize, usize) {
        (n % (self.nx + 1), n / (self.nx + 1))
    }

    /// Corner nodes counter-clockwise from the lower left.
    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        let (ix, iy) = self.element_coords(e);
        [
            self.node_index(ix, iy),
            self.node_index(ix + 1, iy),
            self.node_index(ix + 1, iy + 1),
            self.node_index(ix, iy + 1),
        ]
    }

    /// Global dof indices of an element in `[u0x, u0y, u1x, ...]` order.
    pub fn element_dofs(&self, e: usize) -> [usize; 8] {
        let n = self.element_nodes(e);
        [
            2 * n[0],
            2 * n[0] + 1,
            2 * n[1],
            2 * n[1] + 1,
            2 * n[2],
            2 * n[2] + 1,
            2 * n[3],
            2 * n[3] + 1,
        ]
    }

    pub fn element_center(&self, e: usize) -> Vector2<f64> {
        let (ix, iy) = self.element_coords(e);
        Vector2::new(
            (ix as f64 + 0.5) * self.element_size,
            (iy as f64 + 0.5) * self.element_size,
        )
    }

    pub fn active_elements(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_cells()).filter(move |&e| self.active[e])
    }
}

/// Hollow square unit cell: side `l`, wall thickness `t`, per-axis scaling
/// bounds and the solid's isotropic moduli.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCellSpec {
    pub l: f64,
    pub t: f64,
    pub alpha_lo: [f64; 2],
    pub alpha_hi: [f64; 2],
    pub base_e: f64,
    pub base_nu: f64,
}

impl UnitCellSpec {
    /// The cell used throughout the 2D examples: `l = 10 t`, `alpha` in `[1, 4]`,
    /// unit Young's modulus and Poisson ratio 0.3.
    pub fn planar_default() -> Self {
        Self {
            l: 1.0,
            t: 0.1,
            alpha_lo: [1.0, 1.0],
            alpha_hi: [4.0, 4.0],
            base_e: 1.0,
            base_nu: 0.3,
        }
    }

    /// `2t == l` is accepted as the degenerate fully solid cell.
    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0 && self.t > 0.0 && 2.0 * self.t <= self.l) {
            return Err(Error::invalid(format!(
                "cell requires 0 < 2t <= l, got l={} t={}",
                self.l, self.t
            )));
        }
        for k in 0..2 {
            if !(1.0 <= self.alpha_lo[k] && self.alpha_lo[k] <= self.alpha_hi[k]) {
                return Err(Error::invalid(format!(
                    "scaling bounds require 1 <= lo <= hi, got [{}, {}]",
                    self.alpha_lo[k], self.alpha_hi[k]
                )));
            }
        }
        if !(self.base_e > 0.0) {
            return Err(Error::invalid("Young's modulus must be positive"));
        }
        if !(self.base_nu > -1.0 && self.base_nu < 0.5) {
            return Err(Error::invalid("Poisson ratio must lie in (-1, 0.5)"));
        }
        Ok(())
    }

    pub fn clamp_alpha(&self, alpha: [f64; 2]) -> [f64; 2] {
        [
            alpha[0].clamp(self.alpha_lo[0], self.alpha_hi[0]),
            alpha[1].clamp(self.alpha_lo[1], self.alpha_hi[1]),
        ]
    }
}

/// Solid fraction of a cell elongated by `alpha` with constant wall thickness.
pub fn cell_volume_fraction(alpha: [f64; 2], spec: &UnitCellSpec) -> Result<f64> {
    let (hx, hy) = hole_widths(alpha, spec)?;
    Ok(1.0 - hx * hy / (alpha[0] * alpha[1] * spec.l * spec.l))
}

/// `cell_volume_fraction` together with its gradient with respect to `alpha`.
pub fn cell_volume_fraction_grad(alpha: [f64; 2], spec: &UnitCellSpec) -> Result<(f64, [f64; 2])> {
    let (hx, hy) = hole_widths(alpha, spec)?;
    let l = spec.l;
    // hole area ratio factorizes as (1 - 2t/(ax l)) (1 - 2t/(ay l))
    let fx = hx / (alpha[0] * l);
    let fy = hy / (alpha[1] * l);
    let dfx = 2.0 * spec.t / (alpha[0] * alpha[0] * l);
    let dfy = 2.0 * spec.t / (alpha[1] * alpha[1] * l);
    Ok((1.0 - fx * fy, [-dfx * fy, -fx * dfy]))
}

fn hole_widths(alpha: [f64; 2], spec: &UnitCellSpec) -> Result<(f64, f64)> {
    let hx = alpha[0] * spec.l - 2.0 * spec.t;
    let hy = alpha[1] * spec.l - 2.0 * spec.t;
    if !(hx >= 0.0 && hy >= 0.0) {
        return Err(Error::invalid(format!(
            "scaling ({}, {}) leaves no room for walls of thickness {}",
            alpha[0], alpha[1], spec.t
        )));
    }
    Ok((hx, hy))
}

/// `rho = phi * v(alpha)`.
pub fn element_solid_fraction(phi: f64, alpha: [f64; 2], spec: &UnitCellSpec) -> Result<f64> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::invalid(format!("lattice fraction {phi} outside [0, 1]")));
    }
    Ok(phi * cell_volume_fraction(alpha, spec)?)
}

/// Scalar isotropic scaling that makes a uniform fully occupied lattice use
/// exactly the solid fraction `vbar`, clamped to the admissible range.
pub fn feasible_uniform_alpha(vbar: f64, spec: &UnitCellSpec) -> f64 {
    // 1 - (1 - 2t/(a l))^2 = vbar
    let a = 2.0 * spec.t / (spec.l * (1.0 - (1.0 - vbar).sqrt()));
    a.clamp(spec.alpha_lo[0].max(spec.alpha_lo[1]), spec.alpha_hi[0].min(spec.alpha_hi[1]))
}

/// Per-element optimizer state: raw variables and their regulated versions.
///
/// `rotation[e]` holds the material axes of element `e` as its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignFields {
    pub phi: Vec<f64>,
    pub alpha: Vec<[f64; 2]>,
    pub rotation: Vec<Matrix2<f64>>,
    pub phi_tilde: Vec<f64>,
    pub alpha_tilde: Vec<[f64; 2]>,
    pub phi_bar: Vec<f64>,
}

impl DesignFields {
    pub fn uniform(n: usize, phi: f64, alpha: [f64; 2]) -> Self {
        Self {
            phi: vec![phi; n],
            alpha: vec![alpha; n],
            rotation: vec![Matrix2::identity(); n],
            phi_tilde: vec![phi; n],
            alpha_tilde: vec![alpha; n],
            phi_bar: vec![phi; n],
        }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn check_invariants(&self, spec: &UnitCellSpec) -> Result<()> {
        let n = self.len();
        let lens = [
            self.alpha.len(),
            self.rotation.len(),
            self.phi_tilde.len(),
            self.alpha_tilde.len(),
            self.phi_bar.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::invalid("design field arrays differ in length"));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !(self.phi.iter().all(in_unit)
            && self.phi_tilde.iter().all(in_unit)
            && self.phi_bar.iter().all(in_unit))
        {
            return Err(Error::invalid("lattice fraction outside [0, 1]"));
        }
        for a in self.alpha.iter().chain(&self.alpha_tilde) {
            for k in 0..2 {
                if a[k] < spec.alpha_lo[k] - 1e-12 || a[k] > spec.alpha_hi[k] + 1e-12 {
                    return Err(Error::invalid(format!("scaling {} outside bounds", a[k])));
                }
            }
        }
        for r in &self.rotation {
            if (r.transpose() * r - Matrix2::identity()).norm() > 1e-8 || r.determinant() < 0.0 {
                return Err(Error::invalid("rotation is not a proper orthonormal matrix"));
            }
        }
        Ok(())
    }
}

/// Rotation whose first row is `(cos theta, sin theta)`.
pub fn rotation_from_angle(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, s, -s, c)
}

pub fn angle_of_rotation(r: &Matrix2<f64>) -> f64 {
    r[(0, 1)].atan2(r[(0, 0)])
}

/// Elements of the active domain whose projected fraction reaches `tau`.
pub fn threshold_shape(fields: &DesignFields, domain: &GridDomain, tau: f64) -> Result<Vec<bool>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} outside (0, 1)")));
    }
    if fields.len() != domain.n_cells() {
        return Err(Error::invalid("field size does not match the domain"));
    }
    let mask: Vec<bool> = (0..domain.n_cells())
        .map(|e| domain.is_active(e) && fields.phi_bar[e] >= tau)
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyShape);
    }
    Ok(mask)
}

/// Samples the design fields onto the centers of a `2^refine` subdivision of
/// the masked elements and connects 8-neighbours.
///
/// Frames use the compiler convention (material axes as columns), so they are
/// the transpose of the element rotation. Scales are bilinear in the element
/// centre values of the regulated scaling; frames come from the containing
/// element.
pub fn build_compilation_graph(
    fields: &DesignFields,
    domain: &GridDomain,
    mask: &[bool],
    refine: u32,
    h: f64,
) -> Result<FrameGraph<2>> {
    if refine > 2 {
        return Err(Error::invalid(format!("refinement level {refine} not in 0..=2")));
    }
    if mask.len() != domain.n_cells() || fields.len() != domain.n_cells() {
        return Err(Error::invalid("mask or fields do not match the domain"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyShape);
    }
    if !(h > 0.0) {
        return Err(Error::invalid("target edge length must be positive"));
    }
    let sub = 1usize << refine;
    let (nx, ny) = (domain.nx(), domain.ny());
    let (fx, fy) = (nx * sub, ny * sub);
    let size = domain.element_size();
    let step = size / sub as f64;

    let mut vertex_of = vec![usize::MAX; fx * fy];
    let mut graph = FrameGraph::new(h);
    for jy in 0..fy {
        for jx in 0..fx {
            let e = domain.element_index(jx / sub, jy / sub);
            if !mask[e] {
                continue;
            }
            let pos = Vector2::new((jx as f64 + 0.5) * step, (jy as f64 + 0.5) * step);
            let scale = interpolate_alpha(fields, domain, &pos);
            let frame = fields.rotation[e].transpose();
            vertex_of[jy * fx + jx] = graph.add_vertex(pos, frame, scale);
        }
    }
    let offsets: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];
    for jy in 0..fy {
        for jx in 0..fx {
            let a = vertex_of[jy * fx + jx];
            if a == usize::MAX {
                continue;
            }
            for (dx, dy) in offsets {
                let (qx, qy) = (jx as isize + dx, jy as isize + dy);
                if qx < 0 || qy < 0 || qx >= fx as isize || qy >= fy as isize {
                    continue;
                }
                let b = vertex_of[qy as usize * fx + qx as usize];
                if b != usize::MAX {
                    graph.add_edge(a, b);
                }
            }
        }
    }
    Ok(graph)
}

fn interpolate_alpha(fields: &DesignFields, domain: &GridDomain, pos: &Vector2<f64>) -> Vector2<f64> {
    let size = domain.element_size();
    let gx = (pos.x / size - 0.5).clamp(0.0, (domain.nx() - 1) as f64);
    let gy = (pos.y / size - 0.5).clamp(0.0, (domain.ny() - 1) as f64);
    let ix = (gx.floor() as usize).min(domain.nx().saturating_sub(2));
    let iy = (gy.floor() as usize).min(domain.ny().saturating_sub(2));
    let ix1 = (ix + 1).min(domain.nx() - 1);
    let iy1 = (iy + 1).min(domain.ny() - 1);
    let tx = gx - ix as f64;
    let ty = gy - iy as f64;
    let a = |x, y| fields.alpha_tilde[domain.element_index(x, y)];
    let mut out = Vector2::zeros();
    for k in 0..2 {
        let v00 = a(ix, iy)[k];
        let v10 = a(ix1, iy)[k];
        let v01 = a(ix, iy1)[k];
        let v11 = a(ix1, iy1)[k];
        out[k] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11);
    }
    out
}

/// Writes `ix,iy,phi,alpha_x,alpha_y,theta` using the physical (regulated)
/// fields.
pub fn write_fields_csv(path: &Path, fields: &DesignFields, domain: &GridDomain) -> Result<()> {
    let mut out = String::from("ix,iy,phi,alpha_x,alpha_y,theta\n");
    for e in 0..domain.n_cells() {
        let (ix, iy) = domain.element_coords(e);
        let a = fields.alpha_tilde[e];
        out.push_str(&format!(
            "{ix},{iy},{},{},{},{}\n",
            fields.phi_bar[e],
            a[0],
            a[1],
            angle_of_rotation(&fields.rotation[e])
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a field CSV. Elements not listed keep `phi = 0`, `alpha = lo`.
pub fn read_fields_csv(path: &Path, domain: &GridDomain, spec: &UnitCellSpec) -> Result<DesignFields> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "ix,iy,phi,alpha_x,alpha_y,theta" => {}
        _ => return Err(Error::parse(path, 1, "expected header ix,iy,phi,alpha_x,alpha_y,theta")),
    }
    let mut fields = DesignFields::uniform(domain.n_cells(), 0.0, spec.alpha_lo);
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::parse(path, i + 1, "expected 6 columns"));
        }
        let bad = |_| Error::parse(path, i + 1, "malformed number");
        let ix: usize = cols[0].trim().parse().map_err(|_| Error::parse(path, i + 1, "bad ix"))?;
        let iy: usize = cols[1].trim().parse().map_err(|_| Error::parse(path, i + 1, "bad iy"))?;
        if ix >= domain.nx() || iy >= domain.ny() {
            return Err(Error::parse(path, i + 1, "element index outside the domain"));
        }
        let phi: f64 = cols[2].trim().parse().map_err(bad)?;
        let ax: f64 = cols[3].trim().parse().map_err(bad)?;
        let ay: f64 = cols[4].trim().parse().map_err(bad)?;
        let theta: f64 = cols[5].trim().parse().map_err(bad)?;
        let e = domain.element_index(ix, iy);
        let phi = phi.clamp(0.0, 1.0);
        let alpha = spec.clamp_alpha([ax, ay]);
        fields.phi[e] = phi;
        fields.phi_tilde[e] = phi;
        fields.phi_bar[e] = phi;
        fields.alpha[e] = alpha;
        fields.alpha_tilde[e] = alpha;
        fields.rotation[e] = rotation_from_angle(theta);
    }
    Ok(fields)
}

/// Binary greyscale image of the projected fraction; solid is black.
pub fn write_phi_pgm(path: &Path, fields: &DesignFields, domain: &GridDomain) -> Result<()> {
    let (nx, ny) = (domain.nx(), domain.ny());
    let mut bytes = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for iy in (0..ny).rev() {
        for ix in 0..nx {
            let v = fields.phi_bar[domain.element_index(ix, iy)].clamp(0.0, 1.0);
            bytes.push((255.0 * (1.0 - v)).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cell() -> UnitCellSpec {
        UnitCellSpec::planar_default()
    }

    #[test]
    fn unit_scaling_gives_36_percent() {
        assert_relative_eq!(cell_volume_fraction([1.0, 1.0], &cell()).unwrap(), 0.36, epsilon = 1e-12);
    }

    #[test]
    fn half_thickness_is_solid() {
        let spec = UnitCellSpec { t: 0.5, ..cell() };
        assert_relative_eq!(cell_volume_fraction([1.0, 1.0], &spec).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn largest_scaling_fraction() {
        // 1 - 38^2 / 40^2
        assert_relative_eq!(cell_volume_fraction([4.0, 4.0], &cell()).unwrap(), 0.0975, epsilon = 1e-12);
    }

    #[test]
    fn rejects_negative_hole() {
        let spec = UnitCellSpec { t: 0.5, ..cell() };
        assert!(cell_volume_fraction([0.9, 1.0], &spec).is_err());
    }

    #[test]
    fn solid_fraction_examples() {
        let s = cell();
        assert_eq!(element_solid_fraction(0.0, [2.3, 3.1], &s).unwrap(), 0.0);
        assert_relative_eq!(element_solid_fraction(1.0, [1.0, 1.0], &s).unwrap(), 0.36, epsilon = 1e-12);
        assert_relative_eq!(element_solid_fraction(0.5, [1.0, 1.0], &s).unwrap(), 0.18, epsilon = 1e-12);
        assert!(element_solid_fraction(1.5, [1.0, 1.0], &s).is_err());
    }

    #[test]
    fn feasible_alpha_meets_budget() {
        let s = cell();
        let a = feasible_uniform_alpha(0.15, &s);
        assert_relative_eq!(cell_volume_fraction([a, a], &s).unwrap(), 0.15, epsilon = 1e-12);
    }

    #[test]
    fn fraction_gradient_matches_differences() {
        let s = cell();
        let a = [1.7, 3.2];
        let (_, g) = cell_volume_fraction_grad(a, &s).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let fd = (cell_volume_fraction(ap, &s).unwrap() - cell_volume_fraction(am, &s).unwrap()) / (2.0 * h);
            assert_relative_eq!(g[k], fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn threshold_cases() {
        let d = GridDomain::new(4, 2, 1.0).unwrap();
        let mut f = DesignFields::uniform(8, 1.0, [1.0, 1.0]);
        assert!(threshold_shape(&f, &d, 0.5).unwrap().iter().all(|&m| m));

        f.phi_bar = vec![0.4; 8];
        assert!(matches!(threshold_shape(&f, &d, 0.5), Err(Error::EmptyShape)));

        for e in 0..8 {
            let (ix, iy) = d.element_coords(e);
            f.phi_bar[e] = if (ix + iy) % 2 == 0 { 0.6 } else { 0.3 };
        }
        let m = threshold_shape(&f, &d, 0.5).unwrap();
        for e in 0..8 {
            assert_eq!(m[e], f.phi_bar[e] == 0.6);
        }
    }

    #[test]
    fn threshold_respects_active_mask() {
        let d = GridDomain::with_mask(2, 1, 1.0, vec![true, false]).unwrap();
        let f = DesignFields::uniform(2, 1.0, [1.0, 1.0]);
        assert_eq!(threshold_shape(&f, &d, 0.5).unwrap(), vec![true, false]);
    }

    #[test]
    fn two_by_two_graph() {
        let d = GridDomain::new(2, 2, 1.0).unwrap();
        let f = DesignFields::uniform(4, 1.0, [2.0, 1.5]);
        let g = build_compilation_graph(&f, &d, &[true; 4], 0, 1.0).unwrap();
        assert_eq!(g.n_vertices(), 4);
        assert_eq!(g.edges().len(), 6);
    }

    #[test]
    fn refinement_quadruples_vertices() {
        let d = GridDomain::new(5, 3, 1.0).unwrap();
        let f = DesignFields::uniform(15, 1.0, [1.0, 1.0]);
        let mask = vec![true; 15];
        let g0 = build_compilation_graph(&f, &d, &mask, 0, 1.0).unwrap();
        let g1 = build_compilation_graph(&f, &d, &mask, 1, 1.0).unwrap();
        let g2 = build_compilation_graph(&f, &d, &mask, 2, 1.0).unwrap();
        assert_eq!(g1.n_vertices(), 4 * g0.n_vertices());
        assert_eq!(g2.n_vertices(), 16 * g0.n_vertices());
    }

    #[test]
    fn constant_fields_give_regular_subgrid() {
        let d = GridDomain::new(4, 3, 2.0).unwrap();
        let mut f = DesignFields::uniform(12, 1.0, [1.7, 2.9]);
        f.rotation = vec![rotation_from_angle(0.4); 12];
        let g = build_compilation_graph(&f, &d, &[true; 12], 1, 1.0).unwrap();
        let expected = rotation_from_angle(0.4).transpose();
        for v in 0..g.n_vertices() {
            assert_eq!(g.frame(v), expected);
            assert_relative_eq!(g.scale(v)[0], 1.7, epsilon = 1e-14);
            assert_relative_eq!(g.scale(v)[1], 2.9, epsilon = 1e-14);
            let p = g.position(v) / 1.0;
            // centres of a 1.0-spaced sub-grid offset by 0.5
            assert_relative_eq!((p.x - 0.5).rem_euclid(1.0), 0.0, epsilon = 1e-12);
            assert_relative_eq!((p.y - 0.5).rem_euclid(1.0), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = GridDomain::new(3, 2, 1.0).unwrap();
        let mut f = DesignFields::uniform(6, 0.7, [1.5, 2.5]);
        f.rotation[4] = rotation_from_angle(-0.3);
        let path = dir.path().join("f.csv");
        write_fields_csv(&path, &f, &d).unwrap();
        let g = read_fields_csv(&path, &d, &cell()).unwrap();
        assert_eq!(g.phi_bar, f.phi_bar);
        assert_relative_eq!(angle_of_rotation(&g.rotation[4]), -0.3, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn fraction_decreases_in_each_axis(
            a in 1.0f64..4.0, b in 1.0f64..4.0, c in 1.0f64..4.0
        ) {
            let s = cell();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-9);
            let v_lo = cell_volume_fraction([lo, c], &s).unwrap();
            let v_hi = cell_volume_fraction([hi, c], &s).unwrap();
            prop_assert!(v_hi < v_lo);
            let w_lo = cell_volume_fraction([c, lo], &s).unwrap();
            let w_hi = cell_volume_fraction([c, hi], &s).unwrap();
            prop_assert!(w_hi < w_lo);
        }

        #[test]
        fn solid_fraction_is_linear_in_phi(
            phi in 0.0f64..1.0, scale in 0.0f64..1.0, ax in 1.0f64..4.0, ay in 1.0f64..4.0
        ) {
            let s = cell();
            let r1 = element_solid_fraction(scale * phi, [ax, ay], &s).unwrap();
            let r2 = scale * element_solid_fraction(phi, [ax, ay], &s).unwrap();
            prop_assert!((r1 - r2).abs() <= 1e-14);
        }
    }
}
