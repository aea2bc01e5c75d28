//! Effective elasticity of elongated hollow cells and the sampled lookup
//! table the optimizer interpolates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fea::{element_stiffness, QuadElement};
use crate::fields::UnitCellSpec;
use crate::linsolve::{self, SolverBackend, SparseSymmetric};
use crate::voigt::{plane_stress, VoigtTensor};

/// Stiffness multiplier of the hole's soft elements.
pub const VOID_STIFFNESS: f64 = 1e-9;

pub const DEFAULT_RESOLUTION: usize = 80;
pub const DEFAULT_SAMPLES: usize = 13;

const TABLE_MAGIC: &str = "latopt-dtable 1";

/// Elements per unit-cell edge before elongation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellDiscretization {
    pub resolution: usize,
}

impl Default for CellDiscretization {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl CellDiscretization {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 16 {
            return Err(Error::invalid(format!("cell resolution {resolution} below 16")));
        }
        Ok(Self { resolution })
    }

    /// Pixel map of the elongated cell; `true` is solid. Row-major with `x`
    /// fastest.
    pub fn layout(&self, alpha: [f64; 2], spec: &UnitCellSpec) -> Result<CellLayout> {
        spec.validate()?;
        let res = self.resolution as f64;
        let nx = (alpha[0] * res).round() as usize;
        let ny = (alpha[1] * res).round() as usize;
        let wall = (spec.t / spec.l * res).round() as usize;
        if wall < 2 {
            return Err(Error::invalid(format!(
                "wall spans {wall} elements at resolution {}; need at least 2",
                self.resolution
            )));
        }
        if 2 * wall > nx || 2 * wall > ny {
            return Err(Error::invalid(format!(
                "scaling ({}, {}) leaves no room for the walls",
                alpha[0], alpha[1]
            )));
        }
        let solid = (0..nx * ny)
            .map(|e| {
                let (ix, iy) = (e % nx, e / nx);
                ix < wall || ix >= nx - wall || iy < wall || iy >= ny - wall
            })
            .collect();
        Ok(CellLayout { nx, ny, solid })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLayout {
    pub nx: usize,
    pub ny: usize,
    pub solid: Vec<bool>,
}

impl CellLayout {
    pub fn solid_fraction(&self) -> f64 {
        self.solid.iter().filter(|&&s| s).count() as f64 / self.solid.len() as f64
    }
}

/// Homogenized plane tensor of a periodic pixel map with unit test strains.
pub fn homogenize_layout(layout: &CellLayout, d_solid: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let (nx, ny) = (layout.nx, layout.ny);
    if nx < 2 || ny < 2 || layout.solid.len() != nx * ny {
        return Err(Error::invalid("periodic cell needs at least 2x2 elements"));
    }
    let elem = QuadElement::new(1.0);
    let d_void = d_solid * VOID_STIFFNESS;
    let ke_solid = element_stiffness(d_solid, &elem);
    let ke_void = element_stiffness(&d_void, &elem);
    // f_e = sum_gp B^T D eps0 detJ for the three unit strains, as columns
    let load = |d: &Matrix3<f64>| -> SMatrix<f64, 8, 3> {
        elem.b_gp.iter().map(|b| b.transpose() * d * elem.det_j).sum()
    };
    let (fe_solid, fe_void) = (load(d_solid), load(&d_void));

    // node (0, 0) is pinned against rigid translation
    let dof = |ix: usize, iy: usize, c: usize| -> usize {
        let n = (iy % ny) * nx + ix % nx;
        if n == 0 {
            usize::MAX
        } else {
            2 * n + c - 2
        }
    };
    let element_dofs = |e: usize| -> [usize; 8] {
        let (ix, iy) = (e % nx, e / nx);
        let nodes = [(ix, iy), (ix + 1, iy), (ix + 1, iy + 1), (ix, iy + 1)];
        let mut d = [0; 8];
        for (i, &(x, y)) in nodes.iter().enumerate() {
            d[2 * i] = dof(x, y, 0);
            d[2 * i + 1] = dof(x, y, 1);
        }
        d
    };
    let n_free = 2 * nx * ny - 2;
    let all_dofs: Vec<[usize; 8]> = (0..nx * ny).map(element_dofs).collect();
    let mut k = SparseSymmetric::from_element_pattern(n_free, all_dofs.iter().map(|d| &d[..]));
    let mut rhs = vec![vec![0.0; n_free]; 3];
    for (e, dofs) in all_dofs.iter().enumerate() {
        let (ke, fe) = if layout.solid[e] { (&ke_solid, &fe_solid) } else { (&ke_void, &fe_void) };
        k.scatter(dofs, |a, b| ke[(a, b)]);
        for (a, &d) in dofs.iter().enumerate() {
            if d != usize::MAX {
                for (c, r) in rhs.iter_mut().enumerate() {
                    r[d] += fe[(a, c)];
                }
            }
        }
    }
    let chi = linsolve::solve_many(&k, &rhs, SolverBackend::Direct)?;

    let mut dh = Matrix3::zeros();
    for (e, dofs) in all_dofs.iter().enumerate() {
        let d = if layout.solid[e] { d_solid } else { &d_void };
        let gather = |c: usize| SMatrix::<f64, 8, 1>::from_fn(|a, _| if dofs[a] == usize::MAX { 0.0 } else { chi[c][dofs[a]] });
        let x = [gather(0), gather(1), gather(2)];
        for (b, w) in elem.b_gp.iter().zip(elem.gauss_weights) {
            let strains: [Vector3<f64>; 3] = std::array::from_fn(|c| Vector3::ith(c, 1.0) - b * x[c]);
            for i in 0..3 {
                let di = d * strains[i];
                for j in i..3 {
                    dh[(i, j)] += w * elem.det_j * strains[j].dot(&di);
                }
            }
        }
    }
    dh /= (nx * ny) as f64;
    for i in 0..3 {
        for j in 0..i {
            dh[(i, j)] = dh[(j, i)];
        }
    }
    Ok(dh)
}

/// Effective tensor of the cell elongated by `alpha`, in the cell frame.
pub fn homogenize_cell(alpha: [f64; 2], spec: &UnitCellSpec, disc: &CellDiscretization) -> Result<VoigtTensor> {
    let layout = disc.layout(alpha, spec)?;
    let d = homogenize_layout(&layout, &plane_stress(spec.base_e, spec.base_nu))?;
    let tensor = VoigtTensor::from_planar(&d);
    if !tensor.is_positive_definite() {
        return Err(Error::Solve(format!(
            "homogenized tensor at ({}, {}) is not positive definite",
            alpha[0], alpha[1]
        )));
    }
    Ok(tensor)
}

/// Tensors sampled on a regular grid over the scaling box, interpolated
/// multilinearly. Works for `k = 2` (3x3 tensors) and `k = 3` (6x6, ingested
/// from file).
#[derive(Debug)]
pub struct ElasticityLookup {
    lo: Vec<f64>,
    hi: Vec<f64>,
    samples: Vec<usize>,
    /// Row-major full tensors, sample index with axis 0 fastest.
    entries: Vec<Vec<f64>>,
    fractions: Option<Vec<f64>>,
    clamped: AtomicUsize,
}

impl Clone for ElasticityLookup {
    fn clone(&self) -> Self {
        Self {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            samples: self.samples.clone(),
            entries: self.entries.clone(),
            fractions: self.fractions.clone(),
            clamped: AtomicUsize::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for ElasticityLookup {
    fn eq(&self, other: &Self) -> bool {
        self.lo == other.lo
            && self.hi == other.hi
            && self.samples == other.samples
            && self.entries == other.entries
            && self.fractions == other.fractions
    }
}

impl ElasticityLookup {
    pub fn new(
        lo: Vec<f64>,
        hi: Vec<f64>,
        samples: Vec<usize>,
        tensors: Vec<VoigtTensor>,
        fractions: Option<Vec<f64>>,
    ) -> Result<Self> {
        let k = lo.len();
        if !(k == 2 || k == 3) || hi.len() != k || samples.len() != k {
            return Err(Error::invalid("lookup dimension must be 2 or 3"));
        }
        for a in 0..k {
            if samples[a] < 2 || !(lo[a] < hi[a]) {
                return Err(Error::invalid("lookup axes need at least 2 increasing samples"));
            }
        }
        let total: usize = samples.iter().product();
        if tensors.len() != total || fractions.as_ref().is_some_and(|f| f.len() != total) {
            return Err(Error::invalid("lookup table size does not match its sample grid"));
        }
        let mut entries = Vec::with_capacity(total);
        for (i, t) in tensors.into_iter().enumerate() {
            if t.dim() != k {
                return Err(Error::invalid("tensor size does not match the lookup dimension"));
            }
            if !t.is_positive_definite() {
                return Err(Error::invalid(format!("tensor at sample {i} is not positive definite")));
            }
            entries.push(t.matrix().iter().copied().collect::<Vec<_>>());
        }
        Ok(Self {
            lo,
            hi,
            samples,
            entries,
            fractions,
            clamped: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn samples(&self) -> &[usize] {
        &self.samples
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    /// Sample coordinates along axis `a`.
    pub fn axis(&self, a: usize) -> Vec<f64> {
        let n = self.samples[a];
        (0..n)
            .map(|i| self.lo[a] + (self.hi[a] - self.lo[a]) * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn n_samples(&self) -> usize {
        self.entries.len()
    }

    /// Grid index of the multi-index `idx` (axis 0 fastest).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().rev().zip(self.samples.iter().rev()).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn sample_alpha(&self, flat: usize) -> Vec<f64> {
        let mut rest = flat;
        (0..self.dim())
            .map(|a| {
                let i = rest % self.samples[a];
                rest /= self.samples[a];
                self.lo[a] + (self.hi[a] - self.lo[a]) * i as f64 / (self.samples[a] - 1) as f64
            })
            .collect()
    }

    pub fn sample(&self, flat: usize) -> VoigtTensor {
        let m = self.tensor_size();
        VoigtTensor::new(DMatrix::from_row_slice(m, m, &self.entries[flat])).expect("stored tensors are symmetric")
    }

    pub fn sample_fraction(&self, flat: usize) -> Option<f64> {
        self.fractions.as_ref().map(|f| f[flat])
    }

    fn tensor_size(&self) -> usize {
        let k = self.dim();
        k * (k + 1) / 2
    }

    /// Number of queries that fell outside the table and were clamped.
    pub fn clamp_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Interpolated entries (row-major) and their derivative along each
    /// axis. The derivative is the exact derivative of the interpolant
    /// inside a table cell; on a cell face the upper cell is used.
    pub fn interpolate_entries(&self, alpha: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let k = self.dim();
        if alpha.len() != k {
            return Err(Error::invalid(format!("expected {k} scaling components, got {}", alpha.len())));
        }
        let mut cell = vec![0usize; k];
        let mut frac = vec![0.0; k];
        let mut inv_step = vec![0.0; k];
        let mut clamped = false;
        for a in 0..k {
            if !alpha[a].is_finite() {
                return Err(Error::invalid("non-finite scaling"));
            }
            let tol = 1e-12 * (self.hi[a] - self.lo[a]);
            if alpha[a] < self.lo[a] - tol || alpha[a] > self.hi[a] + tol {
                clamped = true;
            }
            let x = alpha[a].clamp(self.lo[a], self.hi[a]);
            let step = (self.hi[a] - self.lo[a]) / (self.samples[a] - 1) as f64;
            let g = (x - self.lo[a]) / step;
            let i = (g.floor() as usize).min(self.samples[a] - 2);
            cell[a] = i;
            frac[a] = g - i as f64;
            inv_step[a] = 1.0 / step;
        }
        if clamped {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        let m2 = self.tensor_size().pow(2);
        let mut value = vec![0.0; m2];
        let mut grad = vec![vec![0.0; m2]; k];
        let mut idx = vec![0usize; k];
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            let mut dw = vec![1.0; k];
            for a in 0..k {
                let up = (corner >> a) & 1 == 1;
                idx[a] = cell[a] + up as usize;
                let (wa, da) = if up { (frac[a], inv_step[a]) } else { (1.0 - frac[a], -inv_step[a]) };
                for (b, d) in dw.iter_mut().enumerate() {
                    *d *= if a == b { da } else { wa };
                }
                w *= wa;
            }
            let s = &self.entries[self.flat_index(&idx)];
            for i in 0..m2 {
                value[i] += w * s[i];
                for a in 0..k {
                    grad[a][i] += dw[a] * s[i];
                }
            }
        }
        Ok((value, grad))
    }

    pub fn interpolate(&self, alpha: &[f64]) -> Result<VoigtTensor> {
        let m = self.tensor_size();
        let (v, _) = self.interpolate_entries(alpha)?;
        VoigtTensor::new(DMatrix::from_row_slice(m, m, &v))
    }

    /// Planar tensor and its derivatives with respect to `alpha_x`, `alpha_y`.
    pub fn interpolate_planar(&self, alpha: [f64; 2]) -> Result<(Matrix3<f64>, [Matrix3<f64>; 2])> {
        if self.dim() != 2 {
            return Err(Error::invalid("planar interpolation on a 3D table"));
        }
        let (v, g) = self.interpolate_entries(&alpha)?;
        Ok((
            Matrix3::from_row_slice(&v),
            [Matrix3::from_row_slice(&g[0]), Matrix3::from_row_slice(&g[1])],
        ))
    }

    /// Interpolated solid fraction for tables that carry one.
    pub fn interpolate_fraction(&self, alpha: &[f64]) -> Option<f64> {
        let f = self.fractions.as_ref()?;
        let k = self.dim();
        let mut value = 0.0;
        let mut idx = vec![0usize; k];
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            for a in 0..k {
                let x = alpha[a].clamp(self.lo[a], self.hi[a]);
                let step = (self.hi[a] - self.lo[a]) / (self.samples[a] - 1) as f64;
                let g = (x - self.lo[a]) / step;
                let i = (g.floor() as usize).min(self.samples[a] - 2);
                let t = g - i as f64;
                let up = (corner >> a) & 1 == 1;
                idx[a] = i + up as usize;
                w *= if up { t } else { 1.0 - t };
            }
            value += w * f[self.flat_index(&idx)];
        }
        Some(value)
    }

    pub fn to_text(&self) -> String {
        let k = self.dim();
        let m = self.tensor_size();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        let _ = writeln!(out, "{TABLE_MAGIC}");
        let _ = writeln!(out, "k {k}");
        let _ = writeln!(out, "lo {}", join(&self.lo));
        let _ = writeln!(out, "hi {}", join(&self.hi));
        let _ = writeln!(
            out,
            "samples {}",
            self.samples.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
        );
        let _ = writeln!(out, "fraction {}", self.fractions.is_some() as u8);
        let _ = writeln!(out, "# alpha[k] [fraction] upper-triangle entries row by row, axis 0 fastest");
        for s in 0..self.n_samples() {
            let mut row = self.sample_alpha(s);
            if let Some(f) = &self.fractions {
                row.push(f[s]);
            }
            for i in 0..m {
                for j in i..m {
                    row.push(self.entries[s][i * m + j]);
                }
            }
            let _ = writeln!(out, "{}", join(&row));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(origin, 0, format!("missing {what}")))
        };
        let (n, magic) = next("header")?;
        if magic != TABLE_MAGIC {
            return Err(Error::parse(origin, n, format!("expected `{TABLE_MAGIC}`")));
        }
        let mut field = |key: &str| -> Result<(usize, Vec<f64>)> {
            let (n, line) = next(key)?;
            let mut tok = line.split_whitespace();
            if tok.next() != Some(key) {
                return Err(Error::parse(origin, n, format!("expected `{key}`")));
            }
            let vals = tok
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(origin, n, format!("bad number `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((n, vals))
        };
        let (n, k) = field("k")?;
        let k = match k.as_slice() {
            [v] if *v == 2.0 || *v == 3.0 => *v as usize,
            _ => return Err(Error::parse(origin, n, "k must be 2 or 3")),
        };
        let (_, lo) = field("lo")?;
        let (_, hi) = field("hi")?;
        let (n, samples) = field("samples")?;
        let (_, frac) = field("fraction")?;
        if lo.len() != k || hi.len() != k || samples.len() != k {
            return Err(Error::parse(origin, n, "bounds and samples need k values each"));
        }
        let samples: Vec<usize> = samples.iter().map(|&s| s as usize).collect();
        let has_fraction = frac.first() == Some(&1.0);
        let m = k * (k + 1) / 2;
        let width = k + has_fraction as usize + m * (m + 1) / 2;
        let total: usize = samples.iter().product();
        let mut tensors = Vec::with_capacity(total);
        let mut fractions = Vec::new();
        for _ in 0..total {
            let (n, line) = next("sample row")?;
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(origin, n, format!("bad number `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != width {
                return Err(Error::parse(origin, n, format!("expected {width} values, found {}", vals.len())));
            }
            let mut rest = &vals[k..];
            if has_fraction {
                fractions.push(rest[0]);
                rest = &rest[1..];
            }
            let mut d = DMatrix::zeros(m, m);
            let mut it = rest.iter();
            for i in 0..m {
                for j in i..m {
                    let v = *it.next().expect("width checked");
                    d[(i, j)] = v;
                    d[(j, i)] = v;
                }
            }
            tensors.push(VoigtTensor::new(d).map_err(|e| Error::parse(origin, n, e.to_string()))?);
        }
        Self::new(lo, hi, samples, tensors, has_fraction.then_some(fractions))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Homogenizes every sample of a `samples_per_axis`-square grid over the
/// scaling box of `spec`, in parallel. When both axes share bounds, the
/// mirrored half of the table is obtained by swapping the axes.
pub fn build_lookup(spec: &UnitCellSpec, samples_per_axis: usize, disc: &CellDiscretization) -> Result<ElasticityLookup> {
    spec.validate()?;
    if samples_per_axis < 4 {
        return Err(Error::invalid("lookup needs at least 4 samples per axis"));
    }
    let n = samples_per_axis;
    let lo = spec.alpha_lo.to_vec();
    let hi = spec.alpha_hi.to_vec();
    let at = |a: usize, i: usize| lo[a] + (hi[a] - lo[a]) * i as f64 / (n - 1) as f64;
    let symmetric = spec.alpha_lo[0] == spec.alpha_lo[1] && spec.alpha_hi[0] == spec.alpha_hi[1];
    let jobs: Vec<(usize, usize)> = (0..n)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .filter(|&(i, j)| !symmetric || i <= j)
        .collect();
    let solved: Vec<((usize, usize), Matrix3<f64>)> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let d = homogenize_cell([at(0, i), at(1, j)], spec, disc)?;
            Ok(((i, j), d.to_planar().expect("planar cell")))
        })
        .collect::<Result<_>>()?;
    let mut table = vec![Matrix3::zeros(); n * n];
    for ((i, j), d) in solved {
        table[j * n + i] = d;
        if symmetric && i != j {
            let p = Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
            table[i * n + j] = p * d * p;
        }
    }
    let tensors = table.iter().map(VoigtTensor::from_planar).collect();
    ElasticityLookup::new(lo, hi, vec![n, n], tensors, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn coarse() -> CellDiscretization {
        CellDiscretization::new(20).unwrap()
    }

    #[test]
    fn layout_rounds_to_whole_layers() {
        let spec = UnitCellSpec::planar_default();
        let l = coarse().layout([2.0, 1.0], &spec).unwrap();
        assert_eq!((l.nx, l.ny), (40, 20));
        // hole of 36 x 16 elements
        assert_eq!(l.solid.iter().filter(|&&s| !s).count(), 36 * 16);
        assert!(CellDiscretization::new(10).is_err());
        let thin = UnitCellSpec { t: 0.05, ..spec };
        assert!(coarse().layout([1.0, 1.0], &thin).is_err());
    }

    #[test]
    fn solid_cell_reproduces_the_base_material() {
        let mut spec = UnitCellSpec::planar_default();
        spec.t = 0.5;
        let d = homogenize_cell([1.0, 1.0], &spec, &coarse()).unwrap();
        let expected = plane_stress(1.0, 0.3);
        assert!((d.to_planar().unwrap() - expected).amax() < 1e-9);
    }

    #[test]
    fn square_cell_has_square_symmetry() {
        let spec = UnitCellSpec::planar_default();
        let d = homogenize_cell([1.0, 1.0], &spec, &coarse()).unwrap().to_planar().unwrap();
        assert_relative_eq!(d[(0, 0)], d[(1, 1)], max_relative = 1e-9);
        assert!(d[(0, 2)].abs() < 1e-9 * d[(0, 0)] && d[(1, 2)].abs() < 1e-9 * d[(0, 0)]);
    }

    #[test]
    fn voigt_upper_bound_holds() {
        let spec = UnitCellSpec::planar_default();
        let solid = plane_stress(1.0, 0.3);
        for alpha in [[1.0, 1.0], [2.0, 1.0], [1.5, 3.0]] {
            let layout = coarse().layout(alpha, &spec).unwrap();
            let v = layout.solid_fraction();
            let d = homogenize_layout(&layout, &solid).unwrap();
            for i in 0..3 {
                assert!(d[(i, i)] <= v * solid[(i, i)] + 1e-6, "{alpha:?} entry {i}");
            }
        }
    }

    fn small_table() -> ElasticityLookup {
        let mut spec = UnitCellSpec::planar_default();
        spec.alpha_hi = [2.5, 2.5];
        build_lookup(&spec, 4, &coarse()).unwrap()
    }

    #[test]
    fn lookup_grid_and_entries() {
        let spec = UnitCellSpec::planar_default();
        let table = small_table();
        assert_eq!(table.axis(0), vec![1.0, 1.5, 2.0, 2.5]);
        for s in 0..table.n_samples() {
            assert!(table.sample(s).is_positive_definite());
        }
        // mirrored entries agree with a direct computation
        let mut spec_small = spec;
        spec_small.alpha_hi = [2.5, 2.5];
        for idx in [[3usize, 1usize], [1, 3], [2, 2]] {
            let flat = table.flat_index(&idx);
            let alpha = table.sample_alpha(flat);
            let direct = homogenize_cell([alpha[0], alpha[1]], &spec_small, &coarse()).unwrap();
            assert!((direct.matrix() - table.sample(flat).matrix()).amax() < 1e-10);
        }
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_linear_between() {
        let table = small_table();
        let (d, _) = table.interpolate_planar([1.5, 2.0]).unwrap();
        let s = table.sample(table.flat_index(&[1, 2])).to_planar().unwrap();
        assert_eq!(d, s);
        let (mid, _) = table.interpolate_planar([1.75, 2.0]).unwrap();
        let s2 = table.sample(table.flat_index(&[2, 2])).to_planar().unwrap();
        assert_relative_eq!(mid, (s + s2) * 0.5, epsilon = 1e-14);
        assert_eq!(table.clamp_count(), 0);
    }

    #[test]
    fn interpolation_derivative_matches_differences() {
        let table = small_table();
        let a = [1.31, 2.17];
        let (_, g) = table.interpolate_planar(a).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let fd = (table.interpolate_planar(ap).unwrap().0 - table.interpolate_planar(am).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).amax() < 1e-6);
        }
    }

    #[test]
    fn out_of_box_queries_are_clamped_and_counted() {
        let table = small_table();
        let (d, _) = table.interpolate_planar([0.5, 9.0]).unwrap();
        let corner = table.sample(table.flat_index(&[0, 3])).to_planar().unwrap();
        assert_eq!(d, corner);
        assert_eq!(table.clamp_count(), 1);
    }

    #[test]
    fn table_text_round_trip() {
        let table = small_table();
        let back = ElasticityLookup::parse(&table.to_text(), Path::new("D_table")).unwrap();
        assert_eq!(back, table);
        assert!(ElasticityLookup::parse("latopt-dtable 9\n", Path::new("x")).is_err());
    }

    #[test]
    fn three_dimensional_tables_interpolate_trilinearly() {
        let samples = vec![2, 2, 2];
        let tensors: Vec<VoigtTensor> = (0..8)
            .map(|i| VoigtTensor::isotropic_3d(1.0 + i as f64, 0.3))
            .collect();
        let fractions: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let t = ElasticityLookup::new(vec![1.0; 3], vec![2.0; 3], samples, tensors, Some(fractions)).unwrap();
        let centre = t.interpolate(&[1.5, 1.5, 1.5]).unwrap();
        let expected = VoigtTensor::isotropic_3d(4.5, 0.3);
        assert!((centre.matrix() - expected.matrix()).amax() < 1e-12);
        assert_relative_eq!(t.interpolate_fraction(&[1.5, 1.5, 1.5]).unwrap(), 0.35, epsilon = 1e-12);
        let back = ElasticityLookup::parse(&t.to_text(), Path::new("D_table")).unwrap();
        assert_eq!(back, t);
    }
}
