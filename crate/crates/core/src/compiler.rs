//! Lattice compilation: local field-aligned parameterization of a frame
//! graph and extraction of the strut graph.
//!
//! Frames store the lattice axes as columns; a vertex's lattice is
//! `p + R diag(h s) t` for integer `t`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector<const K: usize> = SVector<f64, K>;
pub type Frame<const K: usize> = SMatrix<f64, K, K>;

const GRAPH_MAGIC: &str = "latopt-framegraph 1";

/// Input graph with per-vertex position, frame, scale and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGraph<const K: usize> {
    h: f64,
    positions: Vec<Vector<K>>,
    frames: Vec<Frame<K>>,
    scales: Vec<Vector<K>>,
    origins: Vec<Vector<K>>,
    edges: Vec<(usize, usize)>,
}

impl<const K: usize> FrameGraph<K> {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            positions: Vec::new(),
            frames: Vec::new(),
            scales: Vec::new(),
            origins: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// The origin starts at the vertex position.
    pub fn add_vertex(&mut self, position: Vector<K>, frame: Frame<K>, scale: Vector<K>) -> usize {
        self.positions.push(position);
        self.frames.push(frame);
        self.scales.push(scale);
        self.origins.push(position);
        self.positions.len() - 1
    }

    /// Self-loops and duplicates are ignored; returns whether an edge was added.
    pub fn add_edge(&mut self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        let e = (a.min(b), a.max(b));
        if self.edges.contains(&e) {
            return false;
        }
        self.edges.push(e);
        true
    }

    /// Adds edges without the duplicate scan; caller guarantees uniqueness.
    pub fn extend_edges_unchecked(&mut self, edges: impl IntoIterator<Item = (usize, usize)>) {
        self.edges
            .extend(edges.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b))));
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Same graph with a different target edge length.
    pub fn with_h(mut self, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!("target edge length {h} must be positive")));
        }
        self.h = h;
        Ok(self)
    }

    pub fn n_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn position(&self, v: usize) -> Vector<K> {
        self.positions[v]
    }

    pub fn frame(&self, v: usize) -> Frame<K> {
        self.frames[v]
    }

    pub fn scale(&self, v: usize) -> Vector<K> {
        self.scales[v]
    }

    pub fn origin(&self, v: usize) -> Vector<K> {
        self.origins[v]
    }

    pub fn set_origin(&mut self, v: usize, p: Vector<K>) {
        self.origins[v] = p;
    }

    pub fn origins(&self) -> &[Vector<K>] {
        &self.origins
    }

    /// `M_i = R_i diag(h s_i)`.
    pub fn local_basis(&self, v: usize) -> Frame<K> {
        self.frames[v] * Frame::from_diagonal(&(self.scales[v] * self.h))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_vertices()];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if !(K == 2 || K == 3) {
            return Err(Error::invalid("frame graphs are 2D or 3D"));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::invalid("target edge length must be positive"));
        }
        for v in 0..self.n_vertices() {
            let r = &self.frames[v];
            if (r.transpose() * r - Frame::<K>::identity()).amax() > 1e-8 || determinant_small(r) < 0.0 {
                return Err(Error::invalid(format!("frame of vertex {v} is not a rotation")));
            }
            if self.scales[v].iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::invalid(format!("scale of vertex {v} is not positive")));
            }
            if self.positions[v].iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("position of vertex {v} is not finite")));
            }
        }
        let n = self.n_vertices();
        if self.edges.iter().any(|&(a, b)| a == b || a >= n || b >= n) {
            return Err(Error::invalid("edge refers to a missing vertex or is a self-loop"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let num = |x: f64| format!("{x:?}");
        let _ = writeln!(out, "{GRAPH_MAGIC}");
        let _ = writeln!(out, "k {K}");
        let _ = writeln!(out, "h {}", num(self.h));
        let _ = writeln!(out, "vertices {}", self.n_vertices());
        let _ = writeln!(out, "# x[k] R[k*k] row-major s[k]");
        for v in 0..self.n_vertices() {
            let mut row: Vec<String> = self.positions[v].iter().map(|&x| num(x)).collect();
            for i in 0..K {
                for j in 0..K {
                    row.push(num(self.frames[v][(i, j)]));
                }
            }
            row.extend(self.scales[v].iter().map(|&x| num(x)));
            let _ = writeln!(out, "{}", row.join(" "));
        }
        let _ = writeln!(out, "edges {}", self.n_edges());
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{a} {b}");
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
                .ok_or_else(|| Error::parse(origin, 0, format!("unexpected end of file, missing {what}")))
        };
        let (n, magic) = next("header")?;
        if magic != GRAPH_MAGIC {
            return Err(Error::parse(origin, n, format!("expected `{GRAPH_MAGIC}`")));
        }
        let keyed = |(n, line): (usize, &str), key: &str| -> Result<String> {
            match line.split_once(char::is_whitespace) {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(Error::parse(origin, n, format!("expected `{key} <value>`"))),
            }
        };
        let line = next("k")?;
        let k: usize = keyed(line, "k")?.parse().map_err(|_| Error::parse(origin, line.0, "bad k"))?;
        if k != K {
            return Err(Error::parse(origin, line.0, format!("graph is {k}D, expected {K}D")));
        }
        let line = next("h")?;
        let h: f64 = keyed(line, "h")?.parse().map_err(|_| Error::parse(origin, line.0, "bad h"))?;
        let line = next("vertices")?;
        let nv: usize = keyed(line, "vertices")?
            .parse()
            .map_err(|_| Error::parse(origin, line.0, "bad vertex count"))?;
        let mut g = Self::new(h);
        for _ in 0..nv {
            let (n, line) = next("vertex record")?;
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(origin, n, format!("bad number `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != 2 * K + K * K {
                return Err(Error::parse(origin, n, format!("expected {} values", 2 * K + K * K)));
            }
            let x = Vector::<K>::from_column_slice(&vals[..K]);
            let r = Frame::<K>::from_row_slice(&vals[K..K + K * K]);
            let s = Vector::<K>::from_column_slice(&vals[K + K * K..]);
            g.add_vertex(x, r, s);
        }
        let line = next("edges")?;
        let ne: usize = keyed(line, "edges")?
            .parse()
            .map_err(|_| Error::parse(origin, line.0, "bad edge count"))?;
        let mut edges = Vec::with_capacity(ne);
        for _ in 0..ne {
            let (n, line) = next("edge record")?;
            let ids: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| Error::parse(origin, n, "bad vertex index")))
                .collect::<Result<_>>()?;
            if ids.len() != 2 || ids[0] >= nv || ids[1] >= nv || ids[0] == ids[1] {
                return Err(Error::parse(origin, n, "edge must join two distinct existing vertices"));
            }
            edges.push((ids[0], ids[1]));
        }
        edges.iter_mut().for_each(|e| *e = (e.0.min(e.1), e.0.max(e.1)));
        edges.sort_unstable();
        edges.dedup();
        g.extend_edges_unchecked(edges);
        g.validate().map_err(|e| Error::parse(origin, 0, e.to_string()))?;
        Ok(g)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Sign patterns with an even number of flips, in a fixed order.
pub fn sign_candidates<const K: usize>() -> Vec<[f64; K]> {
    (0..1usize << K)
        .filter(|m| m.count_ones() % 2 == 0)
        .map(|m| std::array::from_fn(|a| if (m >> a) & 1 == 1 { -1.0 } else { 1.0 }))
        .collect()
}

pub fn apply_signs<const K: usize>(r: &Frame<K>, signs: &[f64; K]) -> Frame<K> {
    let mut out = *r;
    for (a, &s) in signs.iter().enumerate() {
        out.column_mut(a).scale_mut(s);
    }
    out
}

/// Axis signs applied to `rj` that bring it closest to `ri`.
pub fn closest_matching<const K: usize>(ri: &Frame<K>, rj: &Frame<K>) -> [f64; K] {
    let mut best = [1.0; K];
    let mut best_d = f64::INFINITY;
    for signs in sign_candidates::<K>() {
        let d = (ri - apply_signs(rj, &signs)).norm_squared();
        if d < best_d {
            best_d = d;
            best = signs;
        }
    }
    best
}

/// `M_ij`: column-normalized sum of the matched frames times the mean scale
/// matrix `h (s_i + s_j) / 2`.
pub fn interpolate_frames<const K: usize>(
    ri: &Frame<K>,
    si: &Vector<K>,
    rj: &Frame<K>,
    sj: &Vector<K>,
    h: f64,
) -> Frame<K> {
    let signs = closest_matching(ri, rj);
    interpolate_matched(ri, si, &apply_signs(rj, &signs), sj, h)
}

fn interpolate_matched<const K: usize>(ri: &Frame<K>, si: &Vector<K>, rj: &Frame<K>, sj: &Vector<K>, h: f64) -> Frame<K> {
    let mut m = ri + rj;
    for a in 0..K {
        let n = m.column(a).norm();
        assert!(n > 1e-12, "matched frames are antipodal");
        let scale = h * 0.5 * (si[a] + sj[a]) / n;
        m.column_mut(a).scale_mut(scale);
    }
    m
}

/// `round(M^-1 (p_i - p_j))`.
pub fn integer_translation<const K: usize>(pi: &Vector<K>, pj: &Vector<K>, m: &Frame<K>) -> [i64; K] {
    let local = solve_small(m, &(pi - pj));
    std::array::from_fn(|a| local[a].round() as i64)
}

pub fn l0_norm<const K: usize>(t: &[i64; K]) -> usize {
    t.iter().filter(|&&c| c != 0).count()
}

/// Gaussian elimination with partial pivoting.
fn solve_small<const K: usize>(m: &Frame<K>, b: &Vector<K>) -> Vector<K> {
    let mut a = *m;
    let mut x = *b;
    for c in 0..K {
        let p = (c..K)
            .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
            .unwrap_or(c);
        if p != c {
            a.swap_rows(c, p);
            x.swap_rows(c, p);
        }
        let piv = a[(c, c)];
        for r in c + 1..K {
            let f = a[(r, c)] / piv;
            for k in c..K {
                a[(r, k)] -= f * a[(c, k)];
            }
            x[r] -= f * x[c];
        }
    }
    for c in (0..K).rev() {
        let mut v = x[c];
        for k in c + 1..K {
            v -= a[(c, k)] * x[k];
        }
        x[c] = v / a[(c, c)];
    }
    x
}

fn determinant_small<const K: usize>(m: &Frame<K>) -> f64 {
    let mut a = *m;
    let mut det = 1.0;
    for c in 0..K {
        let p = (c..K)
            .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
            .unwrap_or(c);
        if a[(p, c)] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap_rows(c, p);
            det = -det;
        }
        det *= a[(c, c)];
        for r in c + 1..K {
            let f = a[(r, c)] / a[(c, c)];
            for k in c..K {
                a[(r, k)] -= f * a[(c, k)];
            }
        }
    }
    det
}

fn inverse_small<const K: usize>(m: &Frame<K>) -> Frame<K> {
    let mut inv = Frame::<K>::zeros();
    for c in 0..K {
        inv.set_column(c, &solve_small(m, &Vector::<K>::from_fn(|i, _| if i == c { 1.0 } else { 0.0 })));
    }
    inv
}

fn round_vec<const K: usize>(v: &Vector<K>) -> Vector<K> {
    v.map(f64::round)
}

/// Per-edge interpolated bases and a directed adjacency, precomputed once
/// per graph since frames and scales never change.
struct Prepared<const K: usize> {
    /// `M_ab`, its inverse and the matching signs for each stored edge `(a, b)`.
    m: Vec<Frame<K>>,
    m_inv: Vec<Frame<K>>,
    signs: Vec<[f64; K]>,
    basis: Vec<Frame<K>>,
    basis_inv: Vec<Frame<K>>,
    adj_ptr: Vec<usize>,
    /// (neighbor, edge id, vertex is the edge's first endpoint)
    adj: Vec<(usize, usize, bool)>,
}

impl<const K: usize> Prepared<K> {
    fn new(g: &FrameGraph<K>) -> Self {
        let mut m = Vec::with_capacity(g.n_edges());
        let mut m_inv = Vec::with_capacity(g.n_edges());
        let mut signs = Vec::with_capacity(g.n_edges());
        for &(a, b) in g.edges() {
            let f = closest_matching(&g.frames[a], &g.frames[b]);
            let mab = interpolate_matched(&g.frames[a], &g.scales[a], &apply_signs(&g.frames[b], &f), &g.scales[b], g.h);
            m_inv.push(inverse_small(&mab));
            m.push(mab);
            signs.push(f);
        }
        let basis: Vec<Frame<K>> = (0..g.n_vertices()).map(|v| g.local_basis(v)).collect();
        let basis_inv = basis.iter().map(inverse_small).collect();
        let mut deg = vec![0usize; g.n_vertices() + 1];
        for &(a, b) in g.edges() {
            deg[a + 1] += 1;
            deg[b + 1] += 1;
        }
        for i in 0..g.n_vertices() {
            deg[i + 1] += deg[i];
        }
        let mut fill = deg.clone();
        let mut adj = vec![(0, 0, false); 2 * g.n_edges()];
        for (e, &(a, b)) in g.edges().iter().enumerate() {
            adj[fill[a]] = (b, e, true);
            fill[a] += 1;
            adj[fill[b]] = (a, e, false);
            fill[b] += 1;
        }
        Self {
            m,
            m_inv,
            signs,
            basis,
            basis_inv,
            adj_ptr: deg,
            adj,
        }
    }

    fn neighbors(&self, i: usize) -> &[(usize, usize, bool)] {
        &self.adj[self.adj_ptr[i]..self.adj_ptr[i + 1]]
    }

    /// `M_ij t` for the directed edge seen from `i`.
    fn step(&self, e: usize, forward: bool, t: &Vector<K>) -> Vector<K> {
        if forward {
            self.m[e] * t
        } else {
            let flipped = Vector::<K>::from_fn(|a, _| self.signs[e][a] * t[a]);
            self.m[e] * flipped
        }
    }

    /// Real-valued `M_ij^-1 d` for the directed edge seen from `i`.
    fn local(&self, e: usize, forward: bool, d: &Vector<K>) -> Vector<K> {
        let v = self.m_inv[e] * d;
        if forward {
            v
        } else {
            Vector::<K>::from_fn(|a, _| self.signs[e][a] * v[a])
        }
    }

    fn label(&self, e: usize, forward: bool, pi: &Vector<K>, pj: &Vector<K>) -> Vector<K> {
        round_vec(&self.local(e, forward, &(pi - pj)))
    }

    fn energy(&self, origins: &[Vector<K>]) -> f64 {
        let mut total = 0.0;
        for i in 0..origins.len() {
            for &(j, e, fwd) in self.neighbors(i) {
                let t = self.label(e, fwd, &origins[i], &origins[j]);
                total += (origins[i] - (self.step(e, fwd, &t) + origins[j])).norm_squared();
            }
        }
        total
    }

    /// One Gauss-Seidel pass of the running-average update with re-anchoring.
    fn sweep(&self, positions: &[Vector<K>], origins: &mut [Vector<K>]) {
        for i in 0..origins.len() {
            let mut p = origins[i];
            let mut d = 0.0;
            for &(j, e, fwd) in self.neighbors(i) {
                let t = self.label(e, fwd, &p, &origins[j]);
                let target = origins[j] + self.step(e, fwd, &t);
                p = (p * d + target) / (d + 1.0);
                d += 1.0;
            }
            let shift = round_vec(&(self.basis_inv[i] * (positions[i] - p)));
            origins[i] = p + self.basis[i] * shift;
        }
    }
}

/// `E(P) = sum_i sum_{j in N(i)} |p_i - (M_ij t_ij + p_j)|^2`.
pub fn parameterization_energy<const K: usize>(graph: &FrameGraph<K>) -> f64 {
    Prepared::new(graph).energy(graph.origins())
}

/// Labels frozen per stored edge `(a, b)`; the reverse direction uses the
/// matched negation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLabels<const K: usize> {
    pub t: Vec<[i64; K]>,
}

pub fn freeze_labels<const K: usize>(graph: &FrameGraph<K>) -> FrozenLabels<K> {
    let prep = Prepared::new(graph);
    let o = graph.origins();
    FrozenLabels {
        t: graph
            .edges()
            .iter()
            .enumerate()
            .map(|(e, &(a, b))| {
                let t = prep.label(e, true, &o[a], &o[b]);
                std::array::from_fn(|k| t[k] as i64)
            })
            .collect(),
    }
}

fn frozen_vec<const K: usize>(labels: &FrozenLabels<K>, e: usize) -> Vector<K> {
    Vector::<K>::from_fn(|a, _| labels.t[e][a] as f64)
}

/// Energy with the given labels instead of freshly rounded ones.
pub fn frozen_energy<const K: usize>(graph: &FrameGraph<K>, labels: &FrozenLabels<K>) -> f64 {
    let prep = Prepared::new(graph);
    let o = graph.origins();
    let mut total = 0.0;
    for (e, &(a, b)) in graph.edges().iter().enumerate() {
        let t = frozen_vec(labels, e);
        let r = o[a] - (prep.m[e] * t + o[b]);
        // the reverse term equals the forward one: M_ba t_ba = -M_ab t_ab
        total += 2.0 * r.norm_squared();
    }
    total
}

/// Gauss-Seidel sweep on the quadratic with frozen labels: each origin moves
/// to the mean of its neighbours' predictions, without re-anchoring.
pub fn frozen_sweep<const K: usize>(graph: &mut FrameGraph<K>, labels: &FrozenLabels<K>) {
    let prep = Prepared::new(graph);
    for i in 0..graph.n_vertices() {
        let nb = prep.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let mut sum = Vector::<K>::zeros();
        for &(j, e, fwd) in nb {
            let t = frozen_vec(labels, e);
            let step = prep.m[e] * t;
            sum += if fwd { graph.origins[j] + step } else { graph.origins[j] - step };
        }
        graph.origins[i] = sum / nb.len() as f64;
    }
}

/// Levels of coarsened graphs; `parents[l][v]` is the vertex of level
/// `l + 1` that vertex `v` of level `l` collapses into.
#[derive(Debug, Clone)]
pub struct Hierarchy<const K: usize> {
    pub levels: Vec<FrameGraph<K>>,
    pub parents: Vec<Vec<usize>>,
}

impl<const K: usize> Hierarchy<K> {
    pub fn build(graph: &FrameGraph<K>) -> Self {
        let mut levels = vec![graph.clone()];
        let mut parents = Vec::new();
        loop {
            let g = levels.last().expect("at least one level");
            if g.n_vertices() <= 1 || g.n_edges() == 0 {
                break;
            }
            let (parent, coarse) = coarsen(g);
            if coarse.n_vertices() >= g.n_vertices() {
                break;
            }
            parents.push(parent);
            levels.push(coarse);
        }
        Self { levels, parents }
    }
}

fn alignment<const K: usize>(ri: &Frame<K>, rj: &Frame<K>) -> f64 {
    let f = closest_matching(ri, rj);
    (ri.transpose() * apply_signs(rj, &f)).trace() / K as f64
}

fn coarsen<const K: usize>(g: &FrameGraph<K>) -> (Vec<usize>, FrameGraph<K>) {
    let n = g.n_vertices();
    let mut order: Vec<(f64, usize)> = g
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(a, b))| (alignment(&g.frames[a], &g.frames[b]), e))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    const NONE: usize = usize::MAX;
    let mut group = vec![NONE; n];
    let mut n_groups = 0;
    for &(_, e) in &order {
        let (a, b) = g.edges[e];
        if group[a] == NONE && group[b] == NONE {
            group[a] = n_groups;
            group[b] = n_groups;
            n_groups += 1;
        }
    }
    // leftover vertices join a matched neighbour, else pair up among themselves
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in g.edges() {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let mut pending = NONE;
    for v in 0..n {
        if group[v] != NONE {
            continue;
        }
        if let Some(&u) = nbrs[v].iter().find(|&&u| group[u] != NONE) {
            group[v] = group[u];
        } else if pending == NONE {
            pending = v;
        } else {
            group[pending] = n_groups;
            group[v] = n_groups;
            n_groups += 1;
            pending = NONE;
        }
    }
    if pending != NONE {
        group[pending] = n_groups;
        n_groups += 1;
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for v in 0..n {
        members[group[v]].push(v);
    }
    let mut coarse = FrameGraph::new(g.h);
    for m in &members {
        let k = m.len() as f64;
        let x = m.iter().map(|&v| g.positions[v]).sum::<Vector<K>>() / k;
        let s = m.iter().map(|&v| g.scales[v]).sum::<Vector<K>>() / k;
        coarse.add_vertex(x, g.frames[m[0]], s);
    }
    let mut edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .map(|&(a, b)| (group[a].min(group[b]), group[a].max(group[b])))
        .filter(|(a, b)| a != b)
        .collect();
    edges.sort_unstable();
    edges.dedup();
    coarse.extend_edges_unchecked(edges);
    (group, coarse)
}

/// Iterations per hierarchy level used when none are given.
pub fn default_iterations(k: usize) -> usize {
    if k == 3 {
        200
    } else {
        50
    }
}

/// Random origins at the coarsest level, then sweeps and prolongation down
/// to the input graph, whose origins are overwritten.
pub fn optimize_parameterization<const K: usize>(graph: &mut FrameGraph<K>, iters_per_level: usize, seed: u64) -> Result<()> {
    graph.validate()?;
    if graph.n_vertices() == 0 {
        return Ok(());
    }
    let mut hier = Hierarchy::build(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = hier.levels.len() - 1;
    {
        let g = &mut hier.levels[top];
        for v in 0..g.n_vertices() {
            let u = Vector::<K>::from_fn(|_, _| rng.random::<f64>() - 0.5);
            g.origins[v] = g.positions[v] + g.local_basis(v) * u;
        }
    }
    for level in (0..=top).rev() {
        if level < top {
            let (fine_levels, coarse_levels) = hier.levels.split_at_mut(level + 1);
            let fine = &mut fine_levels[level];
            let coarse = &coarse_levels[0];
            for v in 0..fine.n_vertices() {
                let pc = coarse.origins[hier.parents[level][v]];
                let basis = fine.local_basis(v);
                let shift = round_vec(&solve_small(&basis, &(fine.positions[v] - pc)));
                fine.origins[v] = pc + basis * shift;
            }
        }
        let g = &mut hier.levels[level];
        let prep = Prepared::new(g);
        let positions = g.positions.clone();
        for _ in 0..iters_per_level {
            prep.sweep(&positions, &mut g.origins);
        }
    }
    graph.origins = std::mem::take(&mut hier.levels[0].origins);
    Ok(())
}

/// Labels of every stored edge computed from the current origins.
pub fn edge_labels<const K: usize>(graph: &FrameGraph<K>) -> Vec<[i64; K]> {
    freeze_labels(graph).t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Axis,
    RelabeledDiagonal,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub input_vertices: usize,
    pub collapse_rounds: usize,
    pub fallback_groups: usize,
    pub relabeled_diagonals: usize,
    pub dropped_diagonals: usize,
    pub isolated_dropped: usize,
}

/// Output strut graph with the frame and interior flag of each vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGraph<const K: usize> {
    pub vertices: Vec<Vector<K>>,
    pub frames: Vec<Frame<K>>,
    pub interior: Vec<bool>,
    pub edges: Vec<(usize, usize)>,
    pub kinds: Vec<EdgeKind>,
    pub stats: ExtractionStats,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        // smaller root wins for a deterministic representative
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        true
    }
}

/// Collapse, relabel, critical-diagonal recovery and diagonal removal on an
/// optimized parameterization.
pub fn extract_lattice<const K: usize>(graph: &FrameGraph<K>) -> Result<LatticeGraph<K>> {
    graph.validate()?;
    let n = graph.n_vertices();
    let mut stats = ExtractionStats {
        input_vertices: n,
        ..Default::default()
    };
    if n == 0 {
        return Ok(LatticeGraph {
            vertices: Vec::new(),
            frames: Vec::new(),
            interior: Vec::new(),
            edges: Vec::new(),
            kinds: Vec::new(),
            stats,
        });
    }
    let degrees = graph.degrees();
    let full_degree = degrees.iter().copied().max().unwrap_or(0);
    let min_unit = graph.h * graph.scales.iter().flat_map(|s| s.iter().copied()).fold(f64::INFINITY, f64::min);

    // groups start as single vertices and merge along zero labels
    let mut uf = UnionFind::new(n);
    let prep = Prepared::new(graph);
    let o = graph.origins();
    for (e, &(a, b)) in graph.edges().iter().enumerate() {
        if prep.label(e, true, &o[a], &o[b]).iter().all(|&c| c == 0.0) {
            uf.union(a, b);
        }
    }
    let (mut coarse, mut labels, mut group_of) = collapsed_graph(graph, &mut uf, min_unit, &mut stats);
    stats.collapse_rounds = 1;
    loop {
        let zero: Vec<usize> = (0..coarse.n_edges()).filter(|&e| l0_norm(&labels[e]) == 0).collect();
        if zero.is_empty() {
            break;
        }
        let mut rep = vec![usize::MAX; coarse.n_vertices()];
        for (v, &g) in group_of.iter().enumerate() {
            if rep[g] == usize::MAX {
                rep[g] = v;
            }
        }
        for e in zero {
            let (a, b) = coarse.edges[e];
            uf.union(rep[a], rep[b]);
        }
        (coarse, labels, group_of) = collapsed_graph(graph, &mut uf, min_unit, &mut stats);
        stats.collapse_rounds += 1;
    }

    // interior: every member and every input neighbour of a member had full
    // input degree
    let mut near_boundary: Vec<bool> = degrees.iter().map(|&d| d < full_degree).collect();
    for &(a, b) in graph.edges() {
        if degrees[a] < full_degree || degrees[b] < full_degree {
            near_boundary[a] = true;
            near_boundary[b] = true;
        }
    }
    let mut interior = vec![true; coarse.n_vertices()];
    for v in 0..n {
        if near_boundary[v] {
            interior[group_of[v]] = false;
        }
    }

    // critical-diagonal relabeling
    let m = coarse.n_vertices();
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (e, &(a, b)) in coarse.edges().iter().enumerate() {
        incident[a].push(e);
        incident[b].push(e);
    }
    let mut keep = vec![false; coarse.n_edges()];
    let mut kinds = vec![EdgeKind::Axis; coarse.n_edges()];
    for e in 0..coarse.n_edges() {
        keep[e] = l0_norm(&labels[e]) == 1;
    }
    for v in 0..m {
        let frame = coarse.frame(v);
        let mut has_axis = vec![false; 2 * K];
        let mut best_diag: Vec<Option<(f64, usize)>> = vec![None; 2 * K];
        for &e in &incident[v] {
            let (a, b) = coarse.edges[e];
            let w = if a == v { b } else { a };
            let d = coarse.origins[w] - coarse.origins[v];
            let len = d.norm();
            if len == 0.0 {
                continue;
            }
            let u = d / len;
            let (dir, cos) = (0..2 * K)
                .map(|k| {
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    (k, sign * frame.column(k / 2).dot(&u))
                })
                .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
                .expect("2k directions");
            if l0_norm(&labels[e]) == 1 {
                has_axis[dir] = true;
            } else if best_diag[dir].is_none_or(|(c, _)| cos > c) {
                best_diag[dir] = Some((cos, e));
            }
        }
        for dir in 0..2 * K {
            if let (false, Some((_, e))) = (has_axis[dir], best_diag[dir]) {
                if !keep[e] {
                    keep[e] = true;
                    kinds[e] = EdgeKind::RelabeledDiagonal;
                    stats.relabeled_diagonals += 1;
                }
            }
        }
    }
    stats.dropped_diagonals = keep.iter().filter(|&&k| !k).count();

    let mut used = vec![false; m];
    for (e, &(a, b)) in coarse.edges().iter().enumerate() {
        if keep[e] {
            used[a] = true;
            used[b] = true;
        }
    }
    stats.isolated_dropped = used.iter().filter(|&&u| !u).count();
    let mut new_index = vec![usize::MAX; m];
    let mut out = LatticeGraph {
        vertices: Vec::new(),
        frames: Vec::new(),
        interior: Vec::new(),
        edges: Vec::new(),
        kinds: Vec::new(),
        stats: ExtractionStats::default(),
    };
    for v in 0..m {
        if used[v] {
            new_index[v] = out.vertices.len();
            out.vertices.push(coarse.origins[v]);
            out.frames.push(coarse.frame(v));
            out.interior.push(interior[v]);
        }
    }
    for (e, &(a, b)) in coarse.edges().iter().enumerate() {
        if keep[e] {
            out.edges.push((new_index[a], new_index[b]));
            out.kinds.push(kinds[e]);
        }
    }
    out.stats = stats;
    Ok(out)
}

/// Builds the graph of current union-find groups: vertices at the mean of
/// member origins (falling back to the mean position for incoherent
/// groups), frame of the first member, mean scale, relabeled edges.
fn collapsed_graph<const K: usize>(
    graph: &FrameGraph<K>,
    uf: &mut UnionFind,
    min_unit: f64,
    stats: &mut ExtractionStats,
) -> (FrameGraph<K>, Vec<[i64; K]>, Vec<usize>) {
    let n = graph.n_vertices();
    let mut root_to_group = HashMap::new();
    let mut group_of = vec![0usize; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for v in 0..n {
        let r = uf.find(v);
        let g = *root_to_group.entry(r).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        group_of[v] = g;
        members[g].push(v);
    }
    let mut coarse = FrameGraph::new(graph.h);
    let mut fallbacks = 0;
    for mem in &members {
        let k = mem.len() as f64;
        let mean_o = mem.iter().map(|&v| graph.origins[v]).sum::<Vector<K>>() / k;
        let spread = mem.iter().map(|&v| (graph.origins[v] - mean_o).norm()).fold(0.0, f64::max);
        let s = mem.iter().map(|&v| graph.scales[v]).sum::<Vector<K>>() / k;
        let x = mem.iter().map(|&v| graph.positions[v]).sum::<Vector<K>>() / k;
        let id = coarse.add_vertex(x, graph.frames[mem[0]], s);
        coarse.origins[id] = if spread > 0.5 * min_unit {
            fallbacks += 1;
            x
        } else {
            mean_o
        };
    }
    stats.fallback_groups = fallbacks;
    let mut edges: Vec<(usize, usize)> = graph
        .edges()
        .iter()
        .map(|&(a, b)| (group_of[a].min(group_of[b]), group_of[a].max(group_of[b])))
        .filter(|(a, b)| a != b)
        .collect();
    edges.sort_unstable();
    edges.dedup();
    coarse.extend_edges_unchecked(edges);
    let labels = edge_labels(&coarse);
    (coarse, labels, group_of)
}

#[derive(Serialize, Deserialize)]
struct LatticeFile {
    format: String,
    dim: usize,
    vertices: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    provenance: Vec<EdgeKind>,
    stats: ExtractionStats,
}

impl<const K: usize> LatticeGraph<K> {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edge_lengths(&self) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&(a, b)| (self.vertices[a] - self.vertices[b]).norm())
            .collect()
    }

    /// Worst angle (radians), over interior vertices and the `2K` signed frame
    /// axes, between an axis and its closest incident strut. `None` if there
    /// are no interior vertices with struts.
    pub fn direction_coverage(&self) -> Option<f64> {
        let mut incident = vec![Vec::new(); self.n_vertices()];
        for &(a, b) in &self.edges {
            let d = self.vertices[b] - self.vertices[a];
            if d.norm() > 0.0 {
                incident[a].push(d.normalize());
                incident[b].push(-d.normalize());
            }
        }
        let mut worst: Option<f64> = None;
        for v in 0..self.n_vertices() {
            if !self.interior[v] || incident[v].is_empty() {
                continue;
            }
            for k in 0..K {
                let axis = self.frames[v].column(k).normalize();
                for sign in [1.0, -1.0] {
                    let best = incident[v]
                        .iter()
                        .map(|d| (sign * axis.dot(d)).clamp(-1.0, 1.0).acos())
                        .fold(f64::INFINITY, f64::min);
                    worst = Some(worst.map_or(best, |w: f64| w.max(best)));
                }
            }
        }
        worst
    }

    pub fn to_json(&self) -> String {
        let file = LatticeFile {
            format: "latopt-lattice 1".into(),
            dim: K,
            vertices: self.vertices.iter().map(|v| v.iter().copied().collect()).collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            provenance: self.kinds.clone(),
            stats: self.stats.clone(),
        };
        serde_json::to_string_pretty(&file).expect("lattice serializes")
    }

    /// Reads a lattice written by `to_json`; frames are not stored and come
    /// back as identity.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: LatticeFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.line(), e.to_string()))?;
        if file.dim != K {
            return Err(Error::parse(origin, 0, format!("lattice is {}D, expected {K}D", file.dim)));
        }
        let n = file.vertices.len();
        if file.edges.len() != file.provenance.len() {
            return Err(Error::parse(origin, 0, "edge and provenance counts differ"));
        }
        let mut vertices = Vec::with_capacity(n);
        for v in &file.vertices {
            if v.len() != K || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::parse(origin, 0, "vertex with wrong arity or non-finite coordinate"));
            }
            vertices.push(Vector::<K>::from_column_slice(v));
        }
        if file.edges.iter().any(|&[a, b]| a == b || a >= n || b >= n) {
            return Err(Error::parse(origin, 0, "edge refers to a missing vertex or is a self-loop"));
        }
        Ok(Self {
            frames: vec![Frame::<K>::identity(); n],
            interior: vec![false; n],
            vertices,
            edges: file.edges.iter().map(|&[a, b]| (a, b)).collect(),
            kinds: file.provenance,
            stats: file.stats,
        })
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::from("# latopt lattice\n");
        for v in &self.vertices {
            let mut c: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            while c.len() < 3 {
                c.push("0.0".into());
            }
            let _ = writeln!(out, "v {}", c.join(" "));
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "l {} {}", a + 1, b + 1);
        }
        out
    }
}

impl LatticeGraph<2> {
    /// Struts drawn as round-capped lines of width `thickness`, y up.
    pub fn to_svg(&self, thickness: f64) -> String {
        let (mut lo, mut hi) = (Vector::<2>::repeat(f64::INFINITY), Vector::<2>::repeat(f64::NEG_INFINITY));
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        if self.vertices.is_empty() {
            lo = Vector::<2>::zeros();
            hi = Vector::<2>::zeros();
        }
        let pad = thickness.max(1e-9);
        let (w, h) = (hi.x - lo.x + 2.0 * pad, hi.y - lo.y + 2.0 * pad);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.6} {:.6} {:.6} {:.6}">"#,
            lo.x - pad,
            -(hi.y + pad),
            w,
            h
        );
        let _ = writeln!(
            out,
            r#"<g stroke="black" stroke-width="{thickness:.6}" stroke-linecap="round" fill="none">"#
        );
        for (&(a, b), kind) in self.edges.iter().zip(&self.kinds) {
            let (p, q) = (self.vertices[a], self.vertices[b]);
            let class = match kind {
                EdgeKind::Axis => "axis",
                EdgeKind::RelabeledDiagonal => "diagonal",
            };
            let _ = writeln!(
                out,
                r#"<line class="{class}" x1="{:.6}" y1="{:.6}" x2="{:.6}" y2="{:.6}"/>"#,
                p.x, -p.y, q.x, -q.y
            );
        }
        out.push_str("</g>\n</svg>\n");
        out
    }
}

/// Parameterize and extract in one call.
pub fn compile<const K: usize>(graph: &mut FrameGraph<K>, iters_per_level: usize, seed: u64) -> Result<LatticeGraph<K>> {
    optimize_parameterization(graph, iters_per_level, seed)?;
    extract_lattice(graph)
}

/// Regular grid graph with constant frame and scale; diagonal neighbours are
/// connected so extraction has diagonals to classify.
pub fn constant_grid_2d(nx: usize, ny: usize, spacing: f64, frame: Frame<2>, scale: Vector<2>, h: f64) -> FrameGraph<2> {
    let mut g = FrameGraph::new(h);
    for iy in 0..ny {
        for ix in 0..nx {
            g.add_vertex(Vector::<2>::new(ix as f64 * spacing, iy as f64 * spacing), frame, scale);
        }
    }
    let id = |x: usize, y: usize| y * nx + x;
    let mut edges = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            if ix + 1 < nx {
                edges.push((id(ix, iy), id(ix + 1, iy)));
            }
            if iy + 1 < ny {
                edges.push((id(ix, iy), id(ix, iy + 1)));
                if ix + 1 < nx {
                    edges.push((id(ix, iy), id(ix + 1, iy + 1)));
                }
                if ix > 0 {
                    edges.push((id(ix, iy), id(ix - 1, iy + 1)));
                }
            }
        }
    }
    g.extend_edges_unchecked(edges);
    g
}

/// 3D analogue of [`constant_grid_2d`] with the 26-neighbourhood.
pub fn constant_grid_3d(n: [usize; 3], spacing: f64, frame: Frame<3>, scale: Vector<3>, h: f64) -> FrameGraph<3> {
    let mut g = FrameGraph::new(h);
    for iz in 0..n[2] {
        for iy in 0..n[1] {
            for ix in 0..n[0] {
                g.add_vertex(Vector::<3>::new(ix as f64, iy as f64, iz as f64) * spacing, frame, scale);
            }
        }
    }
    let id = |x: usize, y: usize, z: usize| (z * n[1] + y) * n[0] + x;
    let mut edges = Vec::new();
    for iz in 0..n[2] {
        for iy in 0..n[1] {
            for ix in 0..n[0] {
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            // half of the neighbourhood, lexicographically positive
                            if (dz, dy, dx) <= (0, 0, 0) {
                                continue;
                            }
                            let (x, y, z) = (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                            if x < 0 || y < 0 || z < 0 || x >= n[0] as i64 || y >= n[1] as i64 || z >= n[2] as i64 {
                                continue;
                            }
                            edges.push((id(ix, iy, iz), id(x as usize, y as usize, z as usize)));
                        }
                    }
                }
            }
        }
    }
    g.extend_edges_unchecked(edges);
    g
}
