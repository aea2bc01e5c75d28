//! Concurrent optimization of lattice fraction, cell scaling and
//! orientation for minimum compliance under a solid-volume bound.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{Matrix2, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fea::{
    element_stiffness, penalty_factor, penalty_factor_derivative, principal_stress, FeModel, StateVector,
};
use crate::fields::{cell_volume_fraction, cell_volume_fraction_grad, feasible_uniform_alpha, DesignFields, GridDomain, UnitCellSpec};
use crate::homogenization::ElasticityLookup;
use crate::voigt::planar_rotation_operator;

/// Which variables the optimizer may change. Orientation is always updated
/// from the stress field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignOptions {
    pub optimize_phi: bool,
    pub optimize_alpha: bool,
    pub isotropic_alpha: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub vbar: f64,
    pub p: f64,
    pub filter_radius: f64,
    pub beta_init: f64,
    pub beta_max: f64,
    pub beta_interval: usize,
    pub eta: f64,
    pub max_iters: usize,
    pub move_limit: f64,
    pub conv_tol: f64,
    pub options: DesignOptions,
    /// Overrides the volume-feasible start.
    pub phi_init: Option<f64>,
    pub alpha_init: Option<[f64; 2]>,
    pub update_rotation: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            vbar: 0.15,
            p: 3.0,
            filter_radius: 1.5,
            beta_init: 1.0,
            beta_max: 32.0,
            beta_interval: 10,
            eta: 0.5,
            max_iters: 60,
            move_limit: 0.2,
            conv_tol: 1e-3,
            options: DesignOptions {
                optimize_phi: true,
                optimize_alpha: true,
                isotropic_alpha: false,
            },
            phi_init: None,
            alpha_init: None,
            update_rotation: true,
        }
    }
}

/// The six design options of the cantilever study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::A, Preset::B, Preset::C, Preset::D, Preset::E, Preset::F];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Preset::A),
            "b" => Ok(Preset::B),
            "c" => Ok(Preset::C),
            "d" => Ok(Preset::D),
            "e" => Ok(Preset::E),
            "f" => Ok(Preset::F),
            other => Err(Error::Config(format!("unknown preset `{other}`, expected a..f"))),
        }
    }

    pub fn name(self) -> char {
        match self {
            Preset::A => 'a',
            Preset::B => 'b',
            Preset::C => 'c',
            Preset::D => 'd',
            Preset::E => 'e',
            Preset::F => 'f',
        }
    }

    /// a-c keep the lattice everywhere (`phi = 1`), d-f optimize it; a and d
    /// fix the scaling, b and e scale isotropically, c and f per axis.
    pub fn options(self) -> DesignOptions {
        let (optimize_phi, optimize_alpha, isotropic_alpha) = match self {
            Preset::A => (false, false, false),
            Preset::B => (false, true, true),
            Preset::C => (false, true, false),
            Preset::D => (true, false, false),
            Preset::E => (true, true, true),
            Preset::F => (true, true, false),
        };
        DesignOptions {
            optimize_phi,
            optimize_alpha,
            isotropic_alpha,
        }
    }

    pub fn apply(self, config: &mut OptimizerConfig) {
        config.options = self.options();
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.vbar > 0.0 && self.vbar < 1.0) {
            return bad("vbar must lie in (0, 1)");
        }
        if !(self.p >= 1.0) {
            return bad("penalization exponent must be at least 1");
        }
        if !(self.filter_radius >= 1.0) {
            return bad("filter radius must be at least one element");
        }
        if !(self.beta_init >= 1.0 && self.beta_max >= self.beta_init) {
            return bad("Heaviside sharpness must satisfy 1 <= beta_init <= beta_max");
        }
        if self.beta_interval == 0 {
            return bad("beta_interval must be positive");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) {
            return bad("move_limit must lie in (0, 1]");
        }
        if !(self.conv_tol >= 0.0) {
            return bad("conv_tol must be non-negative");
        }
        if self.phi_init.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
            return bad("phi_init must lie in [0, 1]");
        }
        Ok(())
    }

    /// Doubling schedule: `beta_init * 2^(iter / interval)`, capped.
    pub fn beta_at(&self, iter: usize) -> f64 {
        let doublings = (iter / self.beta_interval).min(60) as i32;
        (self.beta_init * 2f64.powi(doublings)).min(self.beta_max)
    }
}

/// Linear cone-weight filter over the active elements, rows normalized.
#[derive(Debug, Clone)]
pub struct DensityFilter {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl DensityFilter {
    pub fn new(domain: &GridDomain, radius: f64) -> Self {
        let n = domain.n_cells();
        let reach = radius.ceil() as isize;
        let mut rows = vec![Vec::new(); n];
        for e in domain.active_elements() {
            let (ix, iy) = domain.element_coords(e);
            let mut row = Vec::new();
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (qx, qy) = (ix as isize + dx, iy as isize + dy);
                    if qx < 0 || qy < 0 || qx >= domain.nx() as isize || qy >= domain.ny() as isize {
                        continue;
                    }
                    let q = domain.element_index(qx as usize, qy as usize);
                    let w = radius - ((dx * dx + dy * dy) as f64).sqrt();
                    if domain.is_active(q) && w > 0.0 {
                        row.push((q, w));
                    }
                }
            }
            let total: f64 = row.iter().map(|r| r.1).sum();
            row.iter_mut().for_each(|r| r.1 /= total);
            rows[e] = row;
        }
        Self { n, rows }
    }

    /// Inactive entries pass through unchanged.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|e| {
                if self.rows[e].is_empty() {
                    x[e]
                } else {
                    self.rows[e].iter().map(|&(q, w)| w * x[q]).sum()
                }
            })
            .collect()
    }

    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (e, row) in self.rows.iter().enumerate() {
            for &(q, w) in row {
                out[q] += w * g[e];
            }
        }
        out
    }
}

/// Smoothed Heaviside projection with sharpness `beta` around `eta`.
pub fn heaviside_project(x: f64, beta: f64, eta: f64) -> f64 {
    let den = (beta * eta).tanh() + (beta * (1.0 - eta)).tanh();
    ((beta * eta).tanh() + (beta * (x - eta)).tanh()) / den
}

pub fn heaviside_derivative(x: f64, beta: f64, eta: f64) -> f64 {
    let den = (beta * eta).tanh() + (beta * (1.0 - eta)).tanh();
    let c = (beta * (x - eta)).cosh();
    beta / (c * c) / den
}

/// Method of moving asymptotes for one inequality constraint, with the
/// subproblem solved through its dual by bisection.
#[derive(Debug, Clone)]
pub struct Mma {
    xold1: Vec<f64>,
    xold2: Vec<f64>,
    low: Vec<f64>,
    upp: Vec<f64>,
    iter: usize,
    pub move_limit: f64,
    pub asy_init: f64,
    pub asy_incr: f64,
    pub asy_decr: f64,
    /// Closest an asymptote may come to its variable, relative to the range.
    pub asy_min: f64,
}

impl Mma {
    pub fn new(n: usize, move_limit: f64) -> Self {
        Self {
            xold1: vec![0.0; n],
            xold2: vec![0.0; n],
            low: vec![0.0; n],
            upp: vec![0.0; n],
            iter: 0,
            move_limit,
            asy_init: 0.5,
            asy_incr: 1.2,
            asy_decr: 0.7,
            asy_min: 1e-5,
        }
    }

    /// One outer iteration: `x` is overwritten with the subproblem optimum
    /// for objective gradient `df0` and constraint `g(x) <= 0` with gradient
    /// `dg`.
    pub fn update(&mut self, x: &mut [f64], xmin: &[f64], xmax: &[f64], df0: &[f64], g: f64, dg: &[f64]) -> Result<()> {
        let n = x.len();
        if [xmin.len(), xmax.len(), df0.len(), dg.len(), self.low.len()].iter().any(|&l| l != n) {
            return Err(Error::invalid("MMA vectors differ in length"));
        }
        if df0.iter().chain(dg).any(|v| !v.is_finite()) || !g.is_finite() {
            return Err(Error::invalid("non-finite gradient passed to MMA"));
        }
        self.iter += 1;
        for j in 0..n {
            let range = xmax[j] - xmin[j];
            if self.iter <= 2 {
                self.low[j] = x[j] - self.asy_init * range;
                self.upp[j] = x[j] + self.asy_init * range;
            } else {
                let trend = (x[j] - self.xold1[j]) * (self.xold1[j] - self.xold2[j]);
                let gamma = if trend < 0.0 {
                    self.asy_decr
                } else if trend > 0.0 {
                    self.asy_incr
                } else {
                    1.0
                };
                let low = x[j] - gamma * (self.xold1[j] - self.low[j]);
                let upp = x[j] + gamma * (self.upp[j] - self.xold1[j]);
                self.low[j] = low.clamp(x[j] - 10.0 * range, x[j] - self.asy_min * range);
                self.upp[j] = upp.clamp(x[j] + self.asy_min * range, x[j] + 10.0 * range);
            }
        }
        let mut lo_b = vec![0.0; n];
        let mut hi_b = vec![0.0; n];
        let mut p0 = vec![0.0; n];
        let mut q0 = vec![0.0; n];
        let mut p1 = vec![0.0; n];
        let mut q1 = vec![0.0; n];
        let mut r1 = g;
        for j in 0..n {
            let range = (xmax[j] - xmin[j]).max(1e-12);
            let (l, u) = (self.low[j], self.upp[j]);
            lo_b[j] = xmin[j].max(l + 0.1 * (x[j] - l)).max(x[j] - self.move_limit * range);
            hi_b[j] = xmax[j].min(u - 0.1 * (u - x[j])).min(x[j] + self.move_limit * range);
            let (ux2, xl2) = ((u - x[j]).powi(2), (x[j] - l).powi(2));
            let reg = 1e-5 / range;
            p0[j] = ux2 * (1.001 * df0[j].max(0.0) + 0.001 * (-df0[j]).max(0.0) + reg);
            q0[j] = xl2 * (0.001 * df0[j].max(0.0) + 1.001 * (-df0[j]).max(0.0) + reg);
            p1[j] = ux2 * (1.001 * dg[j].max(0.0) + 0.001 * (-dg[j]).max(0.0) + reg);
            q1[j] = xl2 * (0.001 * dg[j].max(0.0) + 1.001 * (-dg[j]).max(0.0) + reg);
            r1 -= p1[j] / (u - x[j]) + q1[j] / (x[j] - l);
        }
        let low = &self.low;
        let upp = &self.upp;
        let primal = |lam: f64, out: &mut [f64]| {
            for j in 0..n {
                let p = (p0[j] + lam * p1[j]).sqrt();
                let q = (q0[j] + lam * q1[j]).sqrt();
                let xj = (low[j] * p + upp[j] * q) / (p + q);
                out[j] = xj.clamp(lo_b[j], hi_b[j]);
            }
        };
        let constraint = |xs: &[f64]| -> f64 {
            r1 + (0..n).map(|j| p1[j] / (upp[j] - xs[j]) + q1[j] / (xs[j] - low[j])).sum::<f64>()
        };
        let mut trial = vec![0.0; n];
        primal(0.0, &mut trial);
        if constraint(&trial) > 0.0 {
            let mut hi = 1.0;
            primal(hi, &mut trial);
            let mut expansions = 0;
            while constraint(&trial) > 0.0 && expansions < 200 {
                hi *= 2.0;
                expansions += 1;
                primal(hi, &mut trial);
            }
            if constraint(&trial) > 0.0 {
                warn!("MMA subproblem infeasible within move limits; taking the least violating point");
            } else {
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    primal(mid, &mut trial);
                    if constraint(&trial) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-14 * hi {
                        break;
                    }
                }
                primal(hi, &mut trial);
            }
        }
        self.xold2.copy_from_slice(&self.xold1);
        self.xold1.copy_from_slice(x);
        x.copy_from_slice(&trial);
        Ok(())
    }
}

/// Objective and constraint values with gradients with respect to the raw
/// per-element variables (zero on inactive elements).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBundle {
    pub j: f64,
    /// Mean solid fraction over the active elements.
    pub v: f64,
    pub dj_dphi: Vec<f64>,
    pub dj_dalpha: Vec<[f64; 2]>,
    pub dv_dphi: Vec<f64>,
    pub dv_dalpha: Vec<[f64; 2]>,
}

/// A solved state together with the per-element tensors that produced it.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub state: StateVector,
    pub compliance: f64,
    /// Rotated, unpenalized tensor per element.
    pub d_global: Vec<Matrix3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub j: f64,
    pub v: f64,
    pub max_change: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct OptimizationOutcome {
    pub fields: DesignFields,
    pub history: Vec<HistoryRow>,
    /// Compliance and volume of the returned fields.
    pub compliance: f64,
    pub volume: f64,
    pub stop: StopReason,
    pub final_beta: f64,
    /// Wall time spent in assembly and solves.
    pub fea_seconds: f64,
}

/// Problem data shared by every iteration.
pub struct Optimizer<'a> {
    pub model: &'a FeModel,
    pub lookup: &'a ElasticityLookup,
    pub spec: UnitCellSpec,
    pub config: OptimizerConfig,
    filter: DensityFilter,
    active: Vec<usize>,
}

impl<'a> Optimizer<'a> {
    pub fn new(model: &'a FeModel, lookup: &'a ElasticityLookup, spec: UnitCellSpec, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if lookup.dim() != 2 {
            return Err(Error::invalid("planar optimization needs a 2D lookup table"));
        }
        let filter = DensityFilter::new(&model.domain, config.filter_radius);
        let active = model.domain.active_elements().collect();
        Ok(Self {
            model,
            lookup,
            spec,
            config,
            filter,
            active,
        })
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Scaling box for isotropic scaling: the intersection of both axes.
    fn isotropic_bounds(&self) -> (f64, f64) {
        (
            self.spec.alpha_lo[0].max(self.spec.alpha_lo[1]),
            self.spec.alpha_hi[0].min(self.spec.alpha_hi[1]),
        )
    }

    /// Uniform start: scaling from the config or, with the lattice fixed or
    /// the scaling free, the isotropic scaling that meets the volume bound
    /// exactly; the fraction fills the remaining budget.
    pub fn initial_fields(&self) -> Result<DesignFields> {
        let opts = self.config.options;
        let alpha = match self.config.alpha_init {
            Some(a) => self.spec.clamp_alpha(a),
            None if !opts.optimize_phi || opts.optimize_alpha => {
                let a = feasible_uniform_alpha(self.config.vbar, &self.spec);
                [a, a]
            }
            None => self.spec.alpha_lo,
        };
        let phi = if opts.optimize_phi {
            self.config
                .phi_init
                .unwrap_or_else(|| (self.config.vbar / cell_volume_fraction(alpha, &self.spec).unwrap_or(1.0)).clamp(0.0, 1.0))
        } else {
            1.0
        };
        let n = self.model.domain.n_cells();
        let mut fields = DesignFields::uniform(n, phi, alpha);
        for e in 0..n {
            if !self.model.domain.is_active(e) {
                fields.phi[e] = 0.0;
                fields.alpha[e] = self.spec.alpha_lo;
            }
        }
        self.regulate(&mut fields, self.config.beta_at(0));
        Ok(fields)
    }

    /// Filter, then project the fraction. Fixed variables pass through.
    pub fn regulate(&self, fields: &mut DesignFields, beta: f64) {
        let opts = self.config.options;
        fields.phi_tilde = if opts.optimize_phi { self.filter.apply(&fields.phi) } else { fields.phi.clone() };
        fields.phi_bar = fields
            .phi_tilde
            .iter()
            .map(|&x| if opts.optimize_phi { heaviside_project(x, beta, self.config.eta) } else { x })
            .collect();
        if opts.optimize_alpha {
            let ax: Vec<f64> = fields.alpha.iter().map(|a| a[0]).collect();
            let ay: Vec<f64> = fields.alpha.iter().map(|a| a[1]).collect();
            let (fx, fy) = (self.filter.apply(&ax), self.filter.apply(&ay));
            fields.alpha_tilde = fx.into_iter().zip(fy).map(|(x, y)| self.spec.clamp_alpha([x, y])).collect();
        } else {
            fields.alpha_tilde = fields.alpha.clone();
        }
        for e in 0..fields.len() {
            if !self.model.domain.is_active(e) {
                fields.phi_tilde[e] = 0.0;
                fields.phi_bar[e] = 0.0;
            }
        }
    }

    /// Assembles with the regulated fields and the current rotations.
    pub fn analyze(&self, fields: &DesignFields) -> Result<Analysis> {
        let elem = &self.model.element;
        let per_element: Vec<(usize, Matrix3<f64>)> = self
            .active
            .par_iter()
            .map(|&e| {
                let (d, _) = self.lookup.interpolate_planar(fields.alpha_tilde[e])?;
                let rb = planar_rotation_operator(&fields.rotation[e]);
                Ok((e, rb * d * rb.transpose()))
            })
            .collect::<Result<_>>()?;
        let mut d_global = vec![Matrix3::zeros(); self.model.domain.n_cells()];
        for (e, d) in per_element {
            d_global[e] = d;
        }
        let p = self.config.p;
        let state = self
            .model
            .assemble_and_solve(|e| Some(element_stiffness(&d_global[e], elem) * penalty_factor(fields.phi_bar[e], p)))?;
        let compliance = state.compliance(&self.model.bc);
        Ok(Analysis {
            state,
            compliance,
            d_global,
        })
    }

    /// Mean solid fraction of the regulated fields.
    pub fn volume(&self, fields: &DesignFields) -> Result<f64> {
        let mut total = 0.0;
        for &e in &self.active {
            total += fields.phi_bar[e] * cell_volume_fraction(fields.alpha_tilde[e], &self.spec)?;
        }
        Ok(total / self.active.len() as f64)
    }

    /// Adjoint-free compliance sensitivities chained through projection and
    /// filter; rotations are held fixed.
    pub fn sensitivities(&self, fields: &DesignFields, analysis: &Analysis, beta: f64) -> Result<SensitivityBundle> {
        let n = self.model.domain.n_cells();
        let opts = self.config.options;
        let p = self.config.p;
        let elem = &self.model.element;
        let per_element: Vec<(usize, f64, [f64; 2], f64, [f64; 2], f64)> = self
            .active
            .par_iter()
            .map(|&e| {
                let ue = self.model.element_displacement(&analysis.state, e);
                let q = elem.strain_moment(&ue);
                let (_, dd) = self.lookup.interpolate_planar(fields.alpha_tilde[e])?;
                let rb = planar_rotation_operator(&fields.rotation[e]);
                let phi = fields.phi_bar[e];
                let energy = q.component_mul(&analysis.d_global[e]).sum();
                let dj_dphibar = -0.5 * penalty_factor_derivative(phi, p) * energy;
                let pen = penalty_factor(phi, p);
                let dj_dalpha = [0, 1].map(|k| {
                    let dg = rb * dd[k] * rb.transpose();
                    -0.5 * pen * q.component_mul(&dg).sum()
                });
                let (v, dv) = cell_volume_fraction_grad(fields.alpha_tilde[e], &self.spec)?;
                Ok((e, dj_dphibar, dj_dalpha, v, dv, phi))
            })
            .collect::<Result<_>>()?;

        let n_act = self.active.len() as f64;
        let mut dj_dphibar = vec![0.0; n];
        let mut dv_dphibar = vec![0.0; n];
        let mut dj_dat = [vec![0.0; n], vec![0.0; n]];
        let mut dv_dat = [vec![0.0; n], vec![0.0; n]];
        let mut v_total = 0.0;
        for (e, djp, dja, v, dv, phi) in per_element {
            dj_dphibar[e] = djp;
            dv_dphibar[e] = v / n_act;
            for k in 0..2 {
                dj_dat[k][e] = dja[k];
                dv_dat[k][e] = phi * dv[k] / n_act;
            }
            v_total += phi * v;
        }
        let (dj_dphi, dv_dphi) = if opts.optimize_phi {
            let chain: Vec<f64> = fields
                .phi_tilde
                .iter()
                .map(|&x| heaviside_derivative(x, beta, self.config.eta))
                .collect();
            let scale = |g: &[f64]| -> Vec<f64> {
                let local: Vec<f64> = g.iter().zip(&chain).map(|(a, b)| a * b).collect();
                self.filter.apply_transpose(&local)
            };
            (scale(&dj_dphibar), scale(&dv_dphibar))
        } else {
            (dj_dphibar, dv_dphibar)
        };
        let back = |g: &[Vec<f64>; 2]| -> Vec<[f64; 2]> {
            let (gx, gy) = if opts.optimize_alpha {
                (self.filter.apply_transpose(&g[0]), self.filter.apply_transpose(&g[1]))
            } else {
                (g[0].clone(), g[1].clone())
            };
            gx.into_iter().zip(gy).map(|(x, y)| [x, y]).collect()
        };
        Ok(SensitivityBundle {
            j: analysis.compliance,
            v: v_total / n_act,
            dj_dphi,
            dj_dalpha: back(&dj_dat),
            dv_dphi,
            dv_dalpha: back(&dv_dat),
        })
    }

    /// Principal stress directions of the analyzed state become the new
    /// element frames. Returns the largest change in any rotation entry.
    pub fn update_rotations(&self, fields: &mut DesignFields, analysis: &Analysis) -> f64 {
        let elem = &self.model.element;
        let updated: Vec<(usize, Matrix2<f64>)> = self
            .active
            .par_iter()
            .map(|&e| {
                let ue = self.model.element_displacement(&analysis.state, e);
                let ps = principal_stress(&ue, &analysis.d_global[e], elem, &fields.rotation[e]);
                (e, ps.rotation)
            })
            .collect();
        let mut change: f64 = 0.0;
        for (e, r) in updated {
            change = change.max((r - fields.rotation[e]).amax());
            fields.rotation[e] = r;
        }
        change
    }

    fn variable_count(&self) -> usize {
        let o = self.config.options;
        let per = o.optimize_phi as usize
            + match (o.optimize_alpha, o.isotropic_alpha) {
                (false, _) => 0,
                (true, true) => 1,
                (true, false) => 2,
            };
        per * self.active.len()
    }

    /// Normalized MMA variables in `[0, 1]`.
    fn pack(&self, fields: &DesignFields) -> Vec<f64> {
        let o = self.config.options;
        let (ilo, ihi) = self.isotropic_bounds();
        let mut x = Vec::with_capacity(self.variable_count());
        for &e in &self.active {
            if o.optimize_phi {
                x.push(fields.phi[e]);
            }
            if o.optimize_alpha {
                let a = fields.alpha[e];
                if o.isotropic_alpha {
                    x.push(((a[0] - ilo) / (ihi - ilo).max(1e-12)).clamp(0.0, 1.0));
                } else {
                    for k in 0..2 {
                        let (lo, hi) = (self.spec.alpha_lo[k], self.spec.alpha_hi[k]);
                        x.push(((a[k] - lo) / (hi - lo).max(1e-12)).clamp(0.0, 1.0));
                    }
                }
            }
        }
        x
    }

    fn unpack(&self, x: &[f64], fields: &mut DesignFields) {
        let o = self.config.options;
        let (ilo, ihi) = self.isotropic_bounds();
        let mut it = x.iter().copied();
        for &e in &self.active {
            if o.optimize_phi {
                fields.phi[e] = it.next().expect("packed length");
            }
            if o.optimize_alpha {
                if o.isotropic_alpha {
                    let a = ilo + (ihi - ilo) * it.next().expect("packed length");
                    fields.alpha[e] = [a, a];
                } else {
                    for k in 0..2 {
                        let (lo, hi) = (self.spec.alpha_lo[k], self.spec.alpha_hi[k]);
                        fields.alpha[e][k] = lo + (hi - lo) * it.next().expect("packed length");
                    }
                }
            }
        }
    }

    /// Gradients with respect to the normalized variables.
    fn pack_gradient(&self, dphi: &[f64], dalpha: &[[f64; 2]]) -> Vec<f64> {
        let o = self.config.options;
        let (ilo, ihi) = self.isotropic_bounds();
        let mut g = Vec::with_capacity(self.variable_count());
        for &e in &self.active {
            if o.optimize_phi {
                g.push(dphi[e]);
            }
            if o.optimize_alpha {
                if o.isotropic_alpha {
                    g.push((dalpha[e][0] + dalpha[e][1]) * (ihi - ilo));
                } else {
                    for k in 0..2 {
                        g.push(dalpha[e][k] * (self.spec.alpha_hi[k] - self.spec.alpha_lo[k]));
                    }
                }
            }
        }
        g
    }

    /// Runs the solve / MMA / orientation loop from `fields`.
    pub fn run(&self, mut fields: DesignFields) -> Result<OptimizationOutcome> {
        fields.check_invariants(&self.spec)?;
        let n_vars = self.variable_count();
        let mut mma = Mma::new(n_vars, self.config.move_limit);
        let (xmin, xmax) = (vec![0.0; n_vars], vec![1.0; n_vars]);
        let mut history = Vec::new();
        let mut j0 = None;
        let mut stop = StopReason::MaxIterations;
        let mut beta = self.config.beta_at(0);
        let mut last_good = fields.clone();
        let mut fea_seconds = 0.0;
        let mut timed = |f: &DesignFields| {
            let t0 = Instant::now();
            let a = self.analyze(f);
            fea_seconds += t0.elapsed().as_secs_f64();
            a
        };
        for iter in 0..self.config.max_iters {
            beta = self.config.beta_at(iter);
            self.regulate(&mut fields, beta);
            let analysis = match timed(&fields) {
                Ok(a) => a,
                Err(e) => {
                    stop = StopReason::Failed(format!("iteration {iter}: {e}"));
                    fields = last_good.clone();
                    break;
                }
            };
            last_good = fields.clone();
            let bundle = self.sensitivities(&fields, &analysis, beta)?;
            let scale = *j0.get_or_insert(bundle.j);
            let mut change: f64 = 0.0;
            if n_vars > 0 {
                let mut x = self.pack(&fields);
                let before = x.clone();
                let df0: Vec<f64> = self
                    .pack_gradient(&bundle.dj_dphi, &bundle.dj_dalpha)
                    .into_iter()
                    .map(|g| g / scale)
                    .collect();
                let dg: Vec<f64> = self
                    .pack_gradient(&bundle.dv_dphi, &bundle.dv_dalpha)
                    .into_iter()
                    .map(|g| g / self.config.vbar)
                    .collect();
                let g = bundle.v / self.config.vbar - 1.0;
                mma.update(&mut x, &xmin, &xmax, &df0, g, &dg).map_err(|e| Error::Optimizer {
                    iteration: iter,
                    reason: e.to_string(),
                })?;
                change = x.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                self.unpack(&x, &mut fields);
            }
            if self.config.update_rotation {
                change = change.max(self.update_rotations(&mut fields, &analysis));
            }
            debug!("iter {iter}: J = {:.6}, V = {:.6}, change = {change:.3e}, beta = {beta}", bundle.j, bundle.v);
            history.push(HistoryRow {
                iter,
                j: bundle.j,
                v: bundle.v,
                max_change: change,
                beta,
            });
            let sharp = !self.config.options.optimize_phi || beta >= self.config.beta_max;
            if change < self.config.conv_tol && sharp && iter > 0 {
                stop = StopReason::Converged;
                break;
            }
        }
        self.regulate(&mut fields, beta);
        let (compliance, volume) = match timed(&fields) {
            Ok(a) => (a.compliance, self.volume(&fields)?),
            Err(e) => {
                if !matches!(stop, StopReason::Failed(_)) {
                    stop = StopReason::Failed(format!("final analysis: {e}"));
                }
                fields = last_good;
                (f64::NAN, self.volume(&fields)?)
            }
        };
        Ok(OptimizationOutcome {
            fields,
            history,
            compliance,
            volume,
            stop,
            final_beta: beta,
            fea_seconds,
        })
    }
}

/// Uniform axis-aligned start evaluated without optimization.
pub fn uniform_reference_compliance(
    model: &FeModel,
    lookup: &ElasticityLookup,
    spec: UnitCellSpec,
    config: &OptimizerConfig,
) -> Result<f64> {
    let opt = Optimizer::new(model, lookup, spec, config.clone())?;
    let fields = opt.initial_fields()?;
    Ok(opt.analyze(&fields)?.compliance)
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("iter,J,V,max_change,beta\n");
    for h in history {
        let _ = writeln!(out, "{},{:?},{:?},{:?},{:?}", h.iter, h.j, h.v, h.max_change, h.beta);
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
