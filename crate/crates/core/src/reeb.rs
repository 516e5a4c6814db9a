//! The orbit space `Γ`: connected components of level sets of `H`, arranged
//! as a tree whose edges are parameterized by energy.
//!
//! Construction works on a grid atlas. Each open band between consecutive
//! critical values is flood-filled; every connected component of a band is a
//! piece of one edge. Pieces in neighbouring bands are glued when they touch
//! across a regular part of the separating level, and critical points are
//! attached to the pieces found on a small ring around them.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Rect, Vec2};
use crate::levelset::{flow_to_level, trace_level_curve, DEFAULT_STEP, TRACE_TOL};
use crate::model::{HamiltonianSystem, Plateau};

const DEDUP_TOL: f64 = 1e-6;
const DET_TOL: f64 = 1e-8;
const MASK_CELLS: f64 = 4.0;
const RING_CELLS: f64 = 2.0;
const MIN_COMPONENT: usize = 3;
const NONE: u32 = u32::MAX;
/// Default number of Newton seeds per axis.
pub const DEFAULT_SEEDS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexKind {
    Minimum,
    Saddle,
    Maximum,
    Plateau,
    Infinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub point: Vec2,
    pub level: f64,
    pub kind: VertexKind,
}

fn near_plateau(sys: &HamiltonianSystem, p: Vec2) -> bool {
    sys.plateaus.iter().any(|pl| p.dist(pl.center) <= pl.radius + 1e-3)
}

fn newton_critical(sys: &HamiltonianSystem, seed: Vec2, domain: &Rect) -> Option<Vec2> {
    let max_step = 0.25 * domain.width().max(domain.height());
    let mut p = seed;
    // the gradient test is far stricter than needed for Morse points so that
    // linear convergence towards a degenerate point runs long enough for the
    // Hessian to reveal it
    for _ in 0..300 {
        let g = sys.grad_energy(p);
        if g.norm() <= 1e-14 {
            return Some(p);
        }
        let Some(mut dx) = sys.hessian_energy(p).solve(g) else {
            return (g.norm() <= 1e-10).then_some(p);
        };
        let len = dx.norm();
        if len > max_step {
            dx = dx * (max_step / len);
        }
        p -= dx;
        if !domain.contains(p) || !p.is_finite() {
            return None;
        }
        if len <= 1e-14 * (1.0 + p.norm()) {
            return (sys.grad_energy(p).norm() <= 1e-10).then_some(p);
        }
    }
    None
}

/// Locates the nondegenerate critical points of `H` in `domain` by Newton
/// iteration from an `n_seed × n_seed` grid of starts.
///
/// Points on or next to declared plateaus are skipped.
pub fn find_critical_points(sys: &HamiltonianSystem, domain: Rect, n_seed: usize) -> Result<Vec<CriticalPoint>> {
    if n_seed < 2 {
        return Err(Error::InvalidParameter(format!("n_seed must be >= 2, got {n_seed}")));
    }
    let mut found: Vec<CriticalPoint> = Vec::new();
    for i in 0..n_seed {
        for j in 0..n_seed {
            let Some(p) = newton_critical(sys, domain.grid_node(n_seed, i, j), &domain) else {
                continue;
            };
            if near_plateau(sys, p) || found.iter().any(|c| c.point.dist(p) < DEDUP_TOL) {
                continue;
            }
            let hess = sys.hessian_energy(p);
            let det = hess.det();
            if det.abs() < DET_TOL {
                return Err(Error::DegenerateCritical { point: p, det });
            }
            let kind = if det < 0.0 {
                VertexKind::Saddle
            } else if hess.trace() > 0.0 {
                VertexKind::Minimum
            } else {
                VertexKind::Maximum
            };
            found.push(CriticalPoint { point: p, level: sys.energy(p), kind });
        }
    }
    found.sort_by(|a, b| {
        a.level
            .total_cmp(&b.level)
            .then(a.point.x.total_cmp(&b.point.x))
            .then(a.point.y.total_cmp(&b.point.y))
    });
    Ok(found)
}

/// A position on `Γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GraphPoint {
    Edge { edge: usize, m: f64 },
    Vertex { vertex: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vertex {
    pub id: usize,
    pub level: f64,
    pub kind: VertexKind,
    /// Critical points making up the vertex (empty for plateaus and `∞`).
    pub points: Vec<Vec2>,
    pub plateau: Option<Plateau>,
    /// Lebesgue area of the preimage.
    pub mass: f64,
    /// `−∬ ∇·e` over the preimage.
    pub gamma: f64,
    /// One-sided limits of `∮ |∇H| dl` per incident edge.
    pub alpha: BTreeMap<usize, f64>,
    /// Incident edges lying above the vertex level.
    pub j_plus: Vec<usize>,
    /// Incident edges lying below the vertex level.
    pub j_minus: Vec<usize>,
}

impl Vertex {
    pub fn degree(&self) -> usize {
        self.j_plus.len() + self.j_minus.len()
    }

    pub fn incident(&self) -> impl Iterator<Item = usize> + '_ {
        self.j_plus.iter().chain(&self.j_minus).copied()
    }

    /// `|Σ_{J+} α − Σ_{J−} α| / Σ_{J+} α` at interior vertices; `None` at
    /// the cap and wherever all weights vanish.
    pub fn flux_residual(&self) -> Option<f64> {
        if self.kind == VertexKind::Infinity {
            return None;
        }
        let plus: f64 = self.j_plus.iter().map(|e| self.alpha.get(e).copied().unwrap_or(0.0)).sum();
        let minus: f64 = self.j_minus.iter().map(|e| self.alpha.get(e).copied().unwrap_or(0.0)).sum();
        (plus > 0.0).then(|| (plus - minus).abs() / plus)
    }

    /// Splitting probabilities `α_i / Σ_j α_j` over all incident edges.
    ///
    /// Falls back to equal weights when every `α_i` vanishes.
    pub fn walsh_probabilities(&self) -> BTreeMap<usize, f64> {
        let total: f64 = self.incident().map(|e| self.alpha.get(&e).copied().unwrap_or(0.0).max(0.0)).sum();
        let deg = self.degree() as f64;
        self.incident()
            .map(|e| {
                let p = if total > 0.0 {
                    self.alpha.get(&e).copied().unwrap_or(0.0).max(0.0) / total
                } else {
                    1.0 / deg
                };
                (e, p)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Edge {
    pub id: usize,
    /// Level interval `[lo, hi]`.
    pub lo: f64,
    pub hi: f64,
    /// Vertex at `lo`.
    pub lower: usize,
    /// Vertex at `hi` (the `∞` vertex for edges capped by `h_max`).
    pub upper: usize,
    /// Atlas nodes of the edge as `(H, point)`, sorted by `H`.
    #[serde(skip)]
    samples: Vec<(f64, Vec2)>,
}

impl Edge {
    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains_level(&self, m: f64) -> bool {
        m >= self.lo && m <= self.hi
    }

    pub fn other_end(&self, v: usize) -> usize {
        if v == self.lower {
            self.upper
        } else {
            self.lower
        }
    }
}

/// Grid bookkeeping behind [`ReebGraph::project_point`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atlas {
    pub domain: Rect,
    pub resolution: usize,
    /// Critical values below `h_max`, ascending; band `k` is `[levels[k], levels[k+1])`.
    pub band_levels: Vec<f64>,
    pub mask_radius: f64,
    #[serde(skip)]
    labels: Vec<u32>,
}

impl Atlas {
    fn spacing(&self) -> (f64, f64) {
        let n = (self.resolution - 1) as f64;
        (self.domain.width() / n, self.domain.height() / n)
    }

    fn label(&self, i: usize, j: usize) -> Option<usize> {
        let l = self.labels[j * self.resolution + i];
        (l != NONE).then_some(l as usize)
    }

    fn cell(&self, p: Vec2) -> (usize, usize) {
        let (hx, hy) = self.spacing();
        let n = self.resolution;
        let i = (((p.x - self.domain.x0) / hx).floor().max(0.0) as usize).min(n - 2);
        let j = (((p.y - self.domain.y0) / hy).floor().max(0.0) as usize).min(n - 2);
        (i, j)
    }

    fn band(&self, m: f64) -> usize {
        self.band_levels.partition_point(|&c| c <= m).saturating_sub(1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReebGraph {
    pub system: String,
    pub h_max: f64,
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
    pub atlas: Atlas,
    #[serde(skip)]
    vertex_dist: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct Site {
    center: Vec2,
    radius: f64,
    level: f64,
    kind: VertexKind,
    plateau: Option<Plateau>,
}

#[derive(Debug, Default, Clone)]
struct Component {
    band: usize,
    count: usize,
    sum: Vec2,
    lower_sites: BTreeSet<usize>,
    upper_sites: BTreeSet<usize>,
}

/// Topology of one atlas build, before vertex data.
struct Skeleton {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    atlas: Atlas,
}

impl Skeleton {
    fn signature(&self) -> (Vec<(VertexKind, i64, usize)>, Vec<(i64, i64)>) {
        let q = |x: f64| (x * 1e9).round() as i64;
        let mut v: Vec<_> = self.vertices.iter().map(|v| (v.kind, q(v.level), v.degree())).collect();
        let mut e: Vec<_> = self.edges.iter().map(|e| (q(e.lo), q(e.hi))).collect();
        v.sort();
        e.sort();
        (v, e)
    }
}

fn too_coarse(resolution: usize, detail: impl Into<String>) -> Error {
    Error::ResolutionTooCoarse { resolution, detail: detail.into() }
}

fn build_skeleton(sys: &HamiltonianSystem, domain: Rect, h_max: f64, n: usize, crit: &[CriticalPoint]) -> Result<Skeleton> {
    let mut sites: Vec<Site> = crit
        .iter()
        .filter(|c| c.level < h_max)
        .map(|c| Site { center: c.point, radius: 0.0, level: c.level, kind: c.kind, plateau: None })
        .collect();
    sites.extend(sys.plateaus.iter().filter(|p| p.level < h_max).map(|p| Site {
        center: p.center,
        radius: p.radius,
        level: p.level,
        kind: VertexKind::Plateau,
        plateau: Some(*p),
    }));
    if sites.is_empty() {
        return Err(Error::InvalidParameter("no critical point below h_max in the domain".into()));
    }

    let mut levels: Vec<f64> = Vec::new();
    let mut by_level: Vec<f64> = sites.iter().map(|s| s.level).collect();
    by_level.sort_by(f64::total_cmp);
    for c in by_level {
        if levels.last().is_none_or(|&l| (c - l).abs() > 1e-9 * (1.0 + c.abs())) {
            levels.push(c);
        }
    }
    let level_index = |c: f64| levels.iter().position(|&l| (c - l).abs() <= 1e-9 * (1.0 + c.abs())).unwrap();

    let (hx, hy) = (domain.width() / (n - 1) as f64, domain.height() / (n - 1) as f64);
    let cell = hx.max(hy);
    let mask_r = MASK_CELLS * cell;
    let ring_r = mask_r + RING_CELLS * cell;
    let mut atlas = Atlas { domain, resolution: n, band_levels: levels.clone(), mask_radius: mask_r, labels: vec![NONE; n * n] };

    let idx = |i: usize, j: usize| j * n + i;
    let mut band = vec![usize::MAX; n * n];
    for j in 0..n {
        for i in 0..n {
            let p = domain.grid_node(n, i, j);
            let v = sys.energy(p);
            let masked = sites.iter().any(|s| p.dist(s.center) <= s.radius + mask_r);
            if v < h_max && !masked {
                band[idx(i, j)] = atlas.band(v);
            }
        }
    }

    // flood fill within bands
    let mut uf = UnionFind::<usize>::new(n * n);
    for j in 0..n {
        for i in 0..n {
            let b = band[idx(i, j)];
            if b == usize::MAX {
                continue;
            }
            if i + 1 < n && band[idx(i + 1, j)] == b {
                uf.union(idx(i, j), idx(i + 1, j));
            }
            if j + 1 < n && band[idx(i, j + 1)] == b {
                uf.union(idx(i, j), idx(i, j + 1));
            }
        }
    }
    let mut comp_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut comps: Vec<Component> = Vec::new();
    let mut comp = vec![usize::MAX; n * n];
    for k in 0..n * n {
        if band[k] == usize::MAX {
            continue;
        }
        let root = uf.find(k);
        let c = *comp_of_root.entry(root).or_insert_with(|| {
            comps.push(Component { band: band[k], ..Default::default() });
            comps.len() - 1
        });
        comp[k] = c;
        comps[c].count += 1;
        comps[c].sum += domain.grid_node(n, k % n, k / n);
    }
    let keep: Vec<bool> = comps.iter().map(|c| c.count >= MIN_COMPONENT).collect();
    for c in comp.iter_mut() {
        if *c != usize::MAX && !keep[*c] {
            *c = usize::MAX;
        }
    }

    // incidence rings
    for (s_id, s) in sites.iter().enumerate() {
        let k = level_index(s.level);
        let reach = s.radius + ring_r;
        let i0 = ((s.center.x - reach - domain.x0) / hx).floor().max(0.0) as usize;
        let i1 = (((s.center.x + reach - domain.x0) / hx).ceil().max(0.0) as usize).min(n - 1);
        let j0 = ((s.center.y - reach - domain.y0) / hy).floor().max(0.0) as usize;
        let j1 = (((s.center.y + reach - domain.y0) / hy).ceil().max(0.0) as usize).min(n - 1);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let c = comp[idx(i, j)];
                if c == usize::MAX {
                    continue;
                }
                let d = domain.grid_node(n, i, j).dist(s.center);
                if d <= s.radius + mask_r || d > reach {
                    continue;
                }
                if comps[c].band == k {
                    comps[c].lower_sites.insert(s_id);
                } else if k > 0 && comps[c].band == k - 1 {
                    comps[c].upper_sites.insert(s_id);
                }
            }
        }
    }

    // sites sharing a component at their level form one vertex
    let mut site_uf = UnionFind::<usize>::new(sites.len());
    for c in comps.iter() {
        for set in [&c.lower_sites, &c.upper_sites] {
            let mut it = set.iter();
            if let Some(&first) = it.next() {
                for &s in it {
                    site_uf.union(first, s);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in 0..sites.len() {
        groups.entry(site_uf.find(s)).or_default().push(s);
    }
    let mut group_list: Vec<Vec<usize>> = groups.into_values().collect();
    let group_key = |g: &Vec<usize>| {
        let s = &sites[g[0]];
        let c = g.iter().fold(Vec2::ZERO, |acc, &i| acc + sites[i].center) * (1.0 / g.len() as f64);
        (s.level, c.x, c.y)
    };
    group_list.sort_by(|a, b| {
        let (ka, kb) = (group_key(a), group_key(b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
    });
    let mut vertex_of_site = vec![0usize; sites.len()];
    let mut vertices: Vec<Vertex> = Vec::new();
    for (vid, g) in group_list.iter().enumerate() {
        let kinds: BTreeSet<VertexKind> = g.iter().map(|&s| sites[s].kind).collect();
        let kind = if kinds.contains(&VertexKind::Plateau) {
            VertexKind::Plateau
        } else if kinds.contains(&VertexKind::Saddle) {
            VertexKind::Saddle
        } else if kinds.contains(&VertexKind::Maximum) && kinds.contains(&VertexKind::Minimum) {
            return Err(too_coarse(n, "a minimum and a maximum share a component"));
        } else {
            *kinds.iter().next().unwrap()
        };
        for &s in g {
            vertex_of_site[s] = vid;
        }
        vertices.push(Vertex {
            id: vid,
            level: sites[g[0]].level,
            kind,
            points: g.iter().filter(|&&s| sites[s].plateau.is_none()).map(|&s| sites[s].center).collect(),
            plateau: g.iter().find_map(|&s| sites[s].plateau),
            mass: 0.0,
            gamma: 0.0,
            alpha: BTreeMap::new(),
            j_plus: Vec::new(),
            j_minus: Vec::new(),
        });
    }
    let inf_id = vertices.len();
    vertices.push(Vertex {
        id: inf_id,
        level: h_max,
        kind: VertexKind::Infinity,
        points: Vec::new(),
        plateau: None,
        mass: 0.0,
        gamma: 0.0,
        alpha: BTreeMap::new(),
        j_plus: Vec::new(),
        j_minus: Vec::new(),
    });

    // glue pieces across regular parts of critical levels
    let mut comp_uf = UnionFind::<usize>::new(comps.len());
    for j in 0..n {
        for i in 0..n {
            let a = comp[idx(i, j)];
            if a == usize::MAX {
                continue;
            }
            for (di, dj) in [(1i64, 0i64), (0, 1), (1, 1), (1, -1), (-1, 0), (0, -1), (-1, -1), (-1, 1)] {
                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                if ii < 0 || jj < 0 || ii >= n as i64 || jj >= n as i64 {
                    continue;
                }
                let b = comp[idx(ii as usize, jj as usize)];
                if b == usize::MAX || comps[b].band != comps[a].band + 1 {
                    continue;
                }
                if comps[a].upper_sites.is_empty() && comps[b].lower_sites.is_empty() {
                    comp_uf.union(a, b);
                }
            }
        }
    }
    let mut edge_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in 0..comps.len() {
        if keep[c] {
            edge_groups.entry(comp_uf.find(c)).or_default().push(c);
        }
    }

    struct Proto {
        members: Vec<usize>,
        lo: f64,
        hi: f64,
        lower: usize,
        upper: usize,
        centroid: Vec2,
    }
    let top_band = levels.len() - 1;
    let mut protos: Vec<Proto> = Vec::new();
    for members in edge_groups.into_values() {
        let mut bands: Vec<usize> = members.iter().map(|&c| comps[c].band).collect();
        bands.sort_unstable();
        if bands.windows(2).any(|w| w[0] == w[1]) {
            return Err(too_coarse(n, "one edge meets a band twice"));
        }
        let bottom = *members.iter().min_by_key(|&&c| comps[c].band).unwrap();
        let top = *members.iter().max_by_key(|&&c| comps[c].band).unwrap();
        let lower_v: BTreeSet<usize> = comps[bottom].lower_sites.iter().map(|&s| vertex_of_site[s]).collect();
        if lower_v.len() != 1 {
            return Err(too_coarse(n, format!("edge piece at level {} has {} lower vertices", levels[comps[bottom].band], lower_v.len())));
        }
        let upper = if comps[top].band == top_band {
            inf_id
        } else {
            let up: BTreeSet<usize> = comps[top].upper_sites.iter().map(|&s| vertex_of_site[s]).collect();
            if up.len() != 1 {
                return Err(too_coarse(n, format!("edge piece below level {} has {} upper vertices", levels[comps[top].band + 1], up.len())));
            }
            *up.iter().next().unwrap()
        };
        let (count, sum) = members.iter().fold((0usize, Vec2::ZERO), |(k, s), &c| (k + comps[c].count, s + comps[c].sum));
        protos.push(Proto {
            lo: levels[comps[bottom].band],
            hi: levels.get(comps[top].band + 1).copied().unwrap_or(h_max),
            lower: *lower_v.iter().next().unwrap(),
            upper,
            centroid: sum * (1.0 / count as f64),
            members,
        });
    }
    protos.sort_by(|a, b| {
        a.lo.total_cmp(&b.lo)
            .then(a.lower.cmp(&b.lower))
            .then(a.hi.total_cmp(&b.hi))
            .then(a.centroid.x.total_cmp(&b.centroid.x))
            .then(a.centroid.y.total_cmp(&b.centroid.y))
    });

    let mut edge_of_comp = vec![NONE; comps.len()];
    let mut edges = Vec::with_capacity(protos.len());
    for (eid, p) in protos.iter().enumerate() {
        for &c in &p.members {
            edge_of_comp[c] = eid as u32;
        }
        vertices[p.lower].j_plus.push(eid);
        vertices[p.upper].j_minus.push(eid);
        edges.push(Edge { id: eid, lo: p.lo, hi: p.hi, lower: p.lower, upper: p.upper, samples: Vec::new() });
    }
    for j in 0..n {
        for i in 0..n {
            let c = comp[idx(i, j)];
            if c == usize::MAX {
                continue;
            }
            let e = edge_of_comp[c];
            atlas.labels[idx(i, j)] = e;
            let p = domain.grid_node(n, i, j);
            edges[e as usize].samples.push((sys.energy(p), p));
        }
    }
    for e in edges.iter_mut() {
        e.samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    // tree check
    if edges.len() + 1 != vertices.len() {
        return Err(too_coarse(n, format!("{} edges for {} vertices is not a tree", edges.len(), vertices.len())));
    }
    let mut vuf = UnionFind::<usize>::new(vertices.len());
    for e in &edges {
        if e.lower == e.upper || !vuf.union(e.lower, e.upper) {
            return Err(too_coarse(n, "orbit graph has a cycle"));
        }
    }
    if let Some(v) = vertices.iter().find(|v| v.degree() == 0) {
        return Err(too_coarse(n, format!("vertex at level {} has no incident edge", v.level)));
    }

    Ok(Skeleton { vertices, edges, atlas })
}

/// Options for [`build_reeb_graph_with`].
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub resolution: usize,
    pub n_seed: usize,
    /// Rebuild at twice the resolution and insist on the same topology.
    pub check_refinement: bool,
    /// Fill in `α`, mass and `γ` for every vertex.
    pub vertex_data: bool,
    pub trace_step: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { resolution: 256, n_seed: DEFAULT_SEEDS, check_refinement: true, vertex_data: true, trace_step: DEFAULT_STEP }
    }
}

/// Builds `Γ` for `{H < h_max}` inside `domain` at `resolution²` grid nodes.
pub fn build_reeb_graph(sys: &HamiltonianSystem, domain: Rect, h_max: f64, resolution: usize) -> Result<ReebGraph> {
    build_reeb_graph_with(sys, domain, h_max, BuildOptions { resolution, ..Default::default() })
}

pub fn build_reeb_graph_with(sys: &HamiltonianSystem, domain: Rect, h_max: f64, opts: BuildOptions) -> Result<ReebGraph> {
    if !domain.is_valid() {
        return Err(Error::InvalidParameter("degenerate domain".into()));
    }
    if opts.resolution < 8 {
        return Err(Error::InvalidParameter(format!("resolution must be >= 8, got {}", opts.resolution)));
    }
    if !h_max.is_finite() {
        return Err(Error::InvalidParameter("h_max must be finite".into()));
    }
    let crit = find_critical_points(sys, domain, opts.n_seed)?;
    let base = build_skeleton(sys, domain, h_max, opts.resolution, &crit)?;
    if opts.check_refinement {
        let fine = build_skeleton(sys, domain, h_max, 2 * opts.resolution, &crit)?;
        if fine.signature() != base.signature() {
            return Err(too_coarse(
                opts.resolution,
                format!(
                    "{} vertices / {} edges, but {} / {} at twice the resolution",
                    base.vertices.len(),
                    base.edges.len(),
                    fine.vertices.len(),
                    fine.edges.len()
                ),
            ));
        }
    }
    let mut graph = ReebGraph {
        system: sys.label.clone(),
        h_max,
        vertices: base.vertices,
        edges: base.edges,
        atlas: base.atlas,
        vertex_dist: Vec::new(),
    };
    graph.vertex_dist = graph.all_pairs();
    if opts.vertex_data {
        for v in 0..graph.vertices.len() {
            let filled = vertex_data(&graph, sys, v, opts.trace_step)?;
            graph.vertices[v] = filled;
        }
    }
    Ok(graph)
}

/// Fills `α_i`, mass and `γ` for vertex `vertex_id`.
///
/// At a saddle `α_i` is the intercept of a least-squares fit of `∮|∇H| dl`
/// against `a + bΔ + cΔ ln Δ + dΔ²`, `Δ = |m − H(O)|`, over levels
/// approaching the vertex geometrically. Extrema and plateaus get `α = 0`:
/// the curves shrink onto a point, or onto the rim of a flat region, where
/// `∇H` vanishes. The cap vertex uses the curve at `h_max` itself.
pub fn vertex_data(graph: &ReebGraph, sys: &HamiltonianSystem, vertex_id: usize, step: f64) -> Result<Vertex> {
    let mut v = graph.vertex(vertex_id)?.clone();
    v.alpha.clear();
    let incident: Vec<usize> = v.incident().collect();
    let base = incident.iter().map(|&e| graph.edges[e].span()).fold(f64::INFINITY, f64::min);
    for &e in &incident {
        let alpha = match v.kind {
            VertexKind::Minimum | VertexKind::Maximum | VertexKind::Plateau => 0.0,
            VertexKind::Infinity => {
                let curve = trace_level_curve(sys, graph.edge_seed(sys, e, graph.h_max)?, step)?;
                curve.weights.iter().zip(&curve.grad_norms).map(|(w, g)| w * g).sum()
            }
            VertexKind::Saddle => {
                let edge = graph.edge(e)?;
                let dir = if edge.lower == v.id { 1.0 } else { -1.0 };
                let mut rows = Vec::new();
                for k in 4..=11 {
                    let delta = base * 0.5f64.powi(k);
                    let seed = graph.edge_seed(sys, e, v.level + dir * delta)?;
                    let curve = trace_level_curve(sys, seed, step)?;
                    let y: f64 = curve.weights.iter().zip(&curve.grad_norms).map(|(w, g)| w * g).sum();
                    rows.push(([1.0, delta, delta * delta.ln(), delta * delta], y));
                }
                crate::numeric::least_squares(&rows).ok_or_else(|| Error::InvalidParameter("singular vertex fit".into()))?[0]
            }
        };
        v.alpha.insert(e, alpha);
    }
    if let Some(pl) = v.plateau {
        let (mass, gamma) = plateau_integrals(sys, &pl, 801);
        v.mass = mass;
        v.gamma = gamma;
    } else {
        v.mass = 0.0;
        v.gamma = 0.0;
    }
    Ok(v)
}

/// Midpoint-rule area of the plateau and `−∬ ∇·e` over it.
fn plateau_integrals(sys: &HamiltonianSystem, pl: &Plateau, n: usize) -> (f64, f64) {
    let h = 2.0 * pl.radius / n as f64;
    let mut area = 0.0;
    let mut div = 0.0;
    for j in 0..n {
        for i in 0..n {
            let p = pl.center + Vec2::new(-pl.radius + (i as f64 + 0.5) * h, -pl.radius + (j as f64 + 0.5) * h);
            if pl.contains(p) {
                area += h * h;
                div += sys.drift_divergence(p) * h * h;
            }
        }
    }
    (area, -div)
}

impl ReebGraph {
    pub fn vertex(&self, id: usize) -> Result<&Vertex> {
        self.vertices.get(id).ok_or(Error::UnknownVertex(id))
    }

    pub fn edge(&self, id: usize) -> Result<&Edge> {
        self.edges.get(id).ok_or(Error::UnknownEdge(id))
    }

    pub fn infinity(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn vertex_band(level: f64) -> f64 {
        10.0 * TRACE_TOL * level.abs().max(1.0)
    }

    /// Level coordinate of a graph point.
    pub fn level(&self, p: GraphPoint) -> f64 {
        match p {
            GraphPoint::Edge { m, .. } => m,
            GraphPoint::Vertex { vertex } => self.vertices[vertex].level,
        }
    }

    /// A point on `{H = level}` within edge `edge_id`.
    pub fn edge_seed(&self, sys: &HamiltonianSystem, edge_id: usize, level: f64) -> Result<Vec2> {
        let e = self.edge(edge_id)?;
        let top_open = e.upper != self.infinity();
        if !(level > e.lo && (level < e.hi || (!top_open && level <= e.hi))) {
            return Err(Error::InvalidParameter(format!("level {level} is not inside edge {edge_id} [{}, {}]", e.lo, e.hi)));
        }
        if e.samples.is_empty() {
            return Err(too_coarse(self.atlas.resolution, format!("edge {edge_id} has no atlas nodes")));
        }
        // among the atlas nodes closest in energy, start from the steepest one
        const WINDOW: usize = 32;
        let k = e.samples.partition_point(|s| s.0 < level);
        let lo = k.saturating_sub(WINDOW / 2);
        let hi = (lo + WINDOW).min(e.samples.len());
        let lo = hi.saturating_sub(WINDOW);
        let start = e.samples[lo..hi]
            .iter()
            .max_by(|a, b| sys.grad_energy(a.1).norm().total_cmp(&sys.grad_energy(b.1).norm()))
            .unwrap()
            .1;
        flow_to_level(sys, start, level)
    }

    fn all_pairs(&self) -> Vec<Vec<f64>> {
        let nv = self.vertices.len();
        let mut dist = vec![vec![f64::INFINITY; nv]; nv];
        for (s, row) in dist.iter_mut().enumerate() {
            row[s] = 0.0;
            let mut stack = vec![s];
            while let Some(u) = stack.pop() {
                for e in self.vertices[u].incident() {
                    let w = self.edges[e].other_end(u);
                    if row[w].is_infinite() {
                        row[w] = row[u] + self.edges[e].span();
                        stack.push(w);
                    }
                }
            }
        }
        dist
    }

    /// Path metric: total level variation along the unique tree path.
    pub fn distance(&self, p: GraphPoint, q: GraphPoint) -> f64 {
        let ends = |x: GraphPoint| -> [(usize, f64); 2] {
            match x {
                GraphPoint::Vertex { vertex } => [(vertex, 0.0), (vertex, 0.0)],
                GraphPoint::Edge { edge, m } => {
                    let e = &self.edges[edge];
                    [(e.lower, m - e.lo), (e.upper, e.hi - m)]
                }
            }
        };
        if let (GraphPoint::Edge { edge: a, m: ma }, GraphPoint::Edge { edge: b, m: mb }) = (p, q) {
            if a == b {
                return (ma - mb).abs();
            }
        }
        let mut best = f64::INFINITY;
        for (u, du) in ends(p) {
            for (w, dw) in ends(q) {
                best = best.min(du + self.vertex_dist[u][w] + dw);
            }
        }
        best
    }

    /// `π(x)`: the edge and level of `x`, or a vertex when `H(x)` is within
    /// the vertex band of a critical level and `x` belongs to that vertex's
    /// component.
    pub fn project_point(&self, sys: &HamiltonianSystem, x: Vec2) -> Result<GraphPoint> {
        let m = sys.energy(x);
        if !self.atlas.domain.contains(x) || !(m <= self.h_max) {
            return Err(Error::OutOfDomain { point: x });
        }
        for v in &self.vertices {
            if let Some(pl) = v.plateau {
                if pl.contains(x) {
                    return Ok(GraphPoint::Vertex { vertex: v.id });
                }
            }
            if (m - v.level).abs() <= Self::vertex_band(v.level)
                && v.points.iter().any(|c| c.dist(x) <= self.atlas.mask_radius)
            {
                return Ok(GraphPoint::Vertex { vertex: v.id });
            }
        }
        let edge = self.locate_edge(sys, x, m)?;
        let e = &self.edges[edge];
        for v in [e.lower, e.upper] {
            if (m - self.vertices[v].level).abs() <= Self::vertex_band(self.vertices[v].level) {
                return Ok(GraphPoint::Vertex { vertex: v });
            }
        }
        Ok(GraphPoint::Edge { edge, m: m.clamp(e.lo, e.hi) })
    }

    fn lookup(&self, x: Vec2, m: f64) -> Option<usize> {
        let (i, j) = self.atlas.cell(x);
        let mut found: Option<usize> = None;
        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            if let Some(l) = self.atlas.label(i + di, j + dj) {
                if self.edges[l].contains_level(m) {
                    match found {
                        Some(f) if f != l => return None,
                        _ => found = Some(l),
                    }
                }
            }
        }
        found
    }

    fn locate_edge(&self, sys: &HamiltonianSystem, x: Vec2, m: f64) -> Result<usize> {
        let mut candidates = self.edges.iter().filter(|e| e.contains_level(m));
        let first = candidates.next().ok_or(Error::OutOfDomain { point: x })?;
        if candidates.next().is_none() {
            return Ok(first.id);
        }
        if let Some(l) = self.lookup(x, m) {
            return Ok(l);
        }
        // slide along the gradient into the interior of the band, which
        // keeps the point in its component
        let k = self.atlas.band(m);
        let lo = self.atlas.band_levels[k];
        let hi = self.atlas.band_levels.get(k + 1).copied().unwrap_or(self.h_max);
        let mid = 0.5 * (lo + hi);
        for frac in [1.0 / 64.0, 1.0 / 8.0, 1.0] {
            let target = m + (mid - m) * frac;
            if let Ok(y) = flow_to_level(sys, x, target) {
                if let Some(l) = self.lookup(y, target) {
                    return Ok(l);
                }
            }
        }
        // last resort: nearest labelled node of the band
        let (i, j) = self.atlas.cell(x);
        let n = self.atlas.resolution;
        for r in 1..n {
            let mut best: Option<(f64, usize)> = None;
            let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(n - 1));
            let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(n - 1));
            for jj in j0..=j1 {
                for ii in i0..=i1 {
                    if let Some(l) = self.atlas.label(ii, jj) {
                        if self.edges[l].contains_level(m) {
                            let d = self.atlas.domain.grid_node(n, ii, jj).dist(x);
                            if best.is_none_or(|b| d < b.0) {
                                best = Some((d, l));
                            }
                        }
                    }
                }
            }
            if let Some((_, l)) = best {
                return Ok(l);
            }
        }
        Err(Error::OutOfDomain { point: x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_builtin, Builtin, DensitySpec, DriftSpec};

    fn sys(b: Builtin) -> HamiltonianSystem {
        make_builtin(b, DriftSpec::Zero, DensitySpec::Lebesgue, 0.5).unwrap()
    }

    fn quick(b: Builtin, h_max: f64) -> ReebGraph {
        let opts = BuildOptions { resolution: 128, vertex_data: false, ..Default::default() };
        build_reeb_graph_with(&sys(b), Rect::square(3.0), h_max, opts).unwrap()
    }

    #[test]
    fn critical_points_of_builtins() {
        let d = Rect::square(3.0);
        let c1 = find_critical_points(&sys(Builtin::H1), d, 16).unwrap();
        assert_eq!(c1.len(), 1);
        assert_eq!(c1[0].kind, VertexKind::Minimum);
        assert!(c1[0].point.norm() < 1e-12);

        let c2 = find_critical_points(&sys(Builtin::H2), d, 16).unwrap();
        let kinds: Vec<_> = c2.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, [VertexKind::Minimum, VertexKind::Minimum, VertexKind::Saddle]);
        assert!((c2[0].level + 0.25).abs() < 1e-14 && c2[2].level.abs() < 1e-14);

        let c3 = find_critical_points(&sys(Builtin::H3), d, 24).unwrap();
        assert_eq!(c3.len(), 9);
        let count = |k| c3.iter().filter(|c| c.kind == k).count();
        assert_eq!((count(VertexKind::Minimum), count(VertexKind::Saddle), count(VertexKind::Maximum)), (4, 4, 1));
    }

    #[test]
    fn degenerate_critical_point_rejected() {
        use crate::model::{CallbackHamiltonian, Density, Drift};
        use std::sync::Arc;
        let h = CallbackHamiltonian {
            value: Arc::new(|p: Vec2| p.x.powi(4) + p.y * p.y),
            gradient: Arc::new(|p: Vec2| Vec2::new(4.0 * p.x.powi(3), 2.0 * p.y)),
            laplacian: Arc::new(|p: Vec2| 12.0 * p.x * p.x + 2.0),
        };
        let s = HamiltonianSystem::custom("quartic", Arc::new(h), Drift::Zero, Density::Lebesgue, 1.0).unwrap();
        let r = find_critical_points(&s, Rect::square(2.0), 8);
        assert!(matches!(r, Err(Error::DegenerateCritical { .. })), "{r:?}");
    }

    #[test]
    fn topology_of_builtins() {
        let g1 = quick(Builtin::H1, 4.0);
        assert_eq!((g1.vertices.len(), g1.edges.len()), (2, 1));
        let g2 = quick(Builtin::H2, 3.0);
        assert_eq!((g2.vertices.len(), g2.edges.len()), (4, 3));
        let levels: Vec<f64> = g2.vertices.iter().map(|v| v.level).collect();
        assert!((levels[0] + 0.25).abs() < 1e-14 && (levels[1] + 0.25).abs() < 1e-14 && levels[2].abs() < 1e-14);
        let g3 = quick(Builtin::H3, 3.0);
        assert_eq!((g3.vertices.len(), g3.edges.len()), (7, 6));
        let saddle = g3.vertices.iter().find(|v| v.kind == VertexKind::Saddle).unwrap();
        assert_eq!((saddle.j_minus.len(), saddle.j_plus.len(), saddle.points.len()), (4, 2, 4));
        let gp = quick(Builtin::H1Plateau, 3.0);
        assert_eq!(gp.vertices[0].kind, VertexKind::Plateau);
        assert_eq!(gp.edges.len(), 1);
    }

    #[test]
    fn projection_examples() {
        let s2 = sys(Builtin::H2);
        let g2 = quick(Builtin::H2, 3.0);
        let right = g2.vertices.iter().position(|v| v.points.first().is_some_and(|p| p.x > 0.5)).unwrap();
        assert_eq!(g2.project_point(&s2, Vec2::new(1.0, 0.0)).unwrap(), GraphPoint::Vertex { vertex: right });
        let GraphPoint::Edge { edge, m } = g2.project_point(&s2, Vec2::new(0.5, 0.0)).unwrap() else { panic!() };
        assert_eq!(g2.edges[edge].lower, right);
        assert!((m + 0.109375).abs() < 1e-15);
        assert!(g2.project_point(&s2, Vec2::new(5.0, 0.0)).is_err());
        // points hugging the figure eight from both sides
        let GraphPoint::Edge { edge: inside, .. } = g2.project_point(&s2, Vec2::new(-1e-3, 1e-4)).unwrap() else { panic!() };
        assert_eq!(g2.edges[inside].upper, 2);
        assert!(g2.edges[inside].lower != right);
        let GraphPoint::Edge { edge: outside, .. } = g2.project_point(&s2, Vec2::new(1e-4, 1e-3)).unwrap() else { panic!() };
        assert_eq!(g2.edges[outside].upper, g2.infinity());
    }

    #[test]
    fn distance_through_saddle() {
        let g2 = quick(Builtin::H2, 3.0);
        let p = GraphPoint::Edge { edge: 0, m: -0.2 };
        let q = GraphPoint::Edge { edge: 1, m: -0.2 };
        assert!((g2.distance(p, q) - 0.4).abs() < 1e-15);
        assert_eq!(g2.distance(p, p), 0.0);
        let r = GraphPoint::Edge { edge: 2, m: 1.0 };
        assert!((g2.distance(p, r) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_keeps_topology() {
        let g = quick(Builtin::H2, 3.0);
        let text = serde_json::to_string(&g).unwrap();
        let back: ReebGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back.edges.len(), 3);
        assert_eq!(back.atlas.band_levels, g.atlas.band_levels);
    }
}
