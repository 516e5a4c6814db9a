//! Statistical comparison of the projected planar process with the graph
//! diffusion: empirical marginals on `Γ`, Wasserstein-1 under the tree
//! metric, Kolmogorov–Smirnov on the level, and α-sweeps.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::graph_diffusion::{classify_boundary, simulate_graph, BoundaryClass, EdgeTable, GraphEnsemble, GraphInitial, GraphSdeConfig, VertexRule};
use crate::model::HamiltonianSystem;
use crate::reeb::{GraphPoint, ReebGraph};
use crate::sde::{project_trajectory, simulate_paths, InitialLaw, ProjectedEnsemble, Scheme, SdeConfig};

pub const DEFAULT_COALESCE_TOL: f64 = 1e-12;
/// Runs losing more than this fraction of paths are flagged invalid.
pub const MAX_DEFICIT: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Projected2d,
    Graph,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalMarginal {
    pub atoms: Vec<(GraphPoint, f64)>,
    pub t: f64,
    pub source: Source,
    /// Number of paths contributing.
    pub n_effective: usize,
    /// Mass lost to killed paths.
    pub deficit: f64,
}

fn point_order(a: &GraphPoint, b: &GraphPoint) -> Ordering {
    match (a, b) {
        (GraphPoint::Vertex { vertex: x }, GraphPoint::Vertex { vertex: y }) => x.cmp(y),
        (GraphPoint::Vertex { .. }, GraphPoint::Edge { .. }) => Ordering::Less,
        (GraphPoint::Edge { .. }, GraphPoint::Vertex { .. }) => Ordering::Greater,
        (GraphPoint::Edge { edge: e, m: x }, GraphPoint::Edge { edge: f, m: y }) => e.cmp(f).then(x.total_cmp(y)),
    }
}

fn same_point(a: &GraphPoint, b: &GraphPoint, tol: f64) -> bool {
    match (a, b) {
        (GraphPoint::Vertex { vertex: x }, GraphPoint::Vertex { vertex: y }) => x == y,
        (GraphPoint::Edge { edge: e, m: x }, GraphPoint::Edge { edge: f, m: y }) => e == f && (x - y).abs() <= tol,
        _ => false,
    }
}

impl EmpiricalMarginal {
    /// Merges atoms closer than `tol` along the same edge.
    pub fn from_points(points: impl IntoIterator<Item = GraphPoint>, total: usize, t: f64, source: Source, tol: f64) -> Self {
        let mut pts: Vec<GraphPoint> = points.into_iter().collect();
        let n = pts.len();
        pts.sort_by(point_order);
        let w = 1.0 / total.max(1) as f64;
        let mut atoms: Vec<(GraphPoint, f64)> = Vec::new();
        for p in pts {
            match atoms.last_mut() {
                Some((q, wq)) if same_point(q, &p, tol) => *wq += w,
                _ => atoms.push((p, w)),
            }
        }
        let deficit = (total - n) as f64 * w;
        Self { atoms, t, source, n_effective: n, deficit }
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    /// The law conditioned on survival: weights rescaled to sum to one.
    pub fn conditioned(&self) -> Self {
        let total = self.total_weight();
        let mut out = self.clone();
        if total > 0.0 {
            for a in &mut out.atoms {
                a.1 /= total;
            }
        }
        out.deficit = 0.0;
        out
    }
}

fn snapshot_index(times: &[f64], t: f64) -> Result<usize> {
    times.iter().position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0)).ok_or(Error::MissingSnapshot(t))
}

/// Marginal at time `t` of a projected planar ensemble.
pub fn empirical_marginal_2d(ens: &ProjectedEnsemble, t: f64, tol: f64) -> Result<EmpiricalMarginal> {
    let k = snapshot_index(&ens.times, t)?;
    let pts = ens.paths.iter().filter_map(|p| p.get(k).copied());
    Ok(EmpiricalMarginal::from_points(pts, ens.paths.len(), t, Source::Projected2d, tol))
}

/// Marginal at time `t` of a graph ensemble.
pub fn empirical_marginal_graph(ens: &GraphEnsemble, t: f64, tol: f64) -> Result<EmpiricalMarginal> {
    let k = snapshot_index(&ens.times, t)?;
    let pts = ens.paths.iter().map(|p| p[k]);
    Ok(EmpiricalMarginal::from_points(pts, ens.paths.len(), t, Source::Graph, tol))
}

/// Root-oriented view of the tree: for every edge, which end is the child.
struct Rooted {
    child_is_lower: Vec<bool>,
    /// Edges in an order where every edge comes after all edges below it.
    post_order: Vec<usize>,
}

fn rooted(graph: &ReebGraph) -> Rooted {
    let root = graph.infinity();
    let mut child_is_lower = vec![true; graph.edges.len()];
    let mut seen = vec![false; graph.vertices.len()];
    let mut order = Vec::new();
    let mut stack = vec![root];
    seen[root] = true;
    while let Some(v) = stack.pop() {
        for e in graph.vertices[v].incident() {
            let edge = &graph.edges[e];
            let other = edge.other_end(v);
            if !seen[other] {
                seen[other] = true;
                child_is_lower[e] = edge.lower == other;
                order.push(e);
                stack.push(other);
            }
        }
    }
    order.reverse();
    Rooted { child_is_lower, post_order: order }
}

/// Exact `W1` under the tree metric `ρ`: the sum over edges of
/// `∫ |F_P − F_Q| dm`, where `F` is the mass beyond the cut at `m`.
pub fn w1_tree_distance(p: &EmpiricalMarginal, q: &EmpiricalMarginal, graph: &ReebGraph) -> Result<f64> {
    let (wp, wq) = (p.total_weight(), q.total_weight());
    if (wp - wq).abs() > 1e-9 * wp.max(wq).max(1.0) {
        return Err(Error::WeightMismatch(wp, wq));
    }
    let tree = rooted(graph);
    let mut vertex_mass = vec![0.0; graph.vertices.len()];
    // signed atoms per edge as (distance from the child end, weight)
    let mut on_edge: Vec<Vec<(f64, f64)>> = vec![Vec::new(); graph.edges.len()];
    for (atoms, sign) in [(&p.atoms, 1.0), (&q.atoms, -1.0)] {
        for &(pt, w) in atoms.iter() {
            match pt {
                GraphPoint::Vertex { vertex } => {
                    graph.vertex(vertex)?;
                    vertex_mass[vertex] += sign * w;
                }
                GraphPoint::Edge { edge, m } => {
                    let e = graph.edge(edge)?;
                    let d = if tree.child_is_lower[edge] { m - e.lo } else { e.hi - m };
                    on_edge[edge].push((d.clamp(0.0, e.span()), sign * w));
                }
            }
        }
    }
    let mut subtree = vertex_mass;
    let mut total = 0.0;
    for &e in &tree.post_order {
        let edge = &graph.edges[e];
        let (child, parent) = if tree.child_is_lower[e] { (edge.lower, edge.upper) } else { (edge.upper, edge.lower) };
        let atoms = &mut on_edge[e];
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut flow = subtree[child];
        let mut pos = 0.0;
        for &(d, w) in atoms.iter() {
            total += flow.abs() * (d - pos);
            pos = d;
            flow += w;
        }
        total += flow.abs() * (edge.span() - pos);
        subtree[parent] += flow;
    }
    Ok(total)
}

/// Two-sample Kolmogorov–Smirnov statistic of the level coordinate, each
/// marginal normalized to unit mass. Edge ids are ignored.
pub fn ks_on_h(p: &EmpiricalMarginal, q: &EmpiricalMarginal, graph: &ReebGraph) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(p.atoms.len() + q.atoms.len());
    let (wp, wq) = (p.total_weight(), q.total_weight());
    if wp <= 0.0 || wq <= 0.0 {
        return if wp == wq { 0.0 } else { 1.0 };
    }
    pts.extend(p.atoms.iter().map(|(g, w)| (graph.level(*g), w / wp)));
    pts.extend(q.atoms.iter().map(|(g, w)| (graph.level(*g), -w / wq)));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf = 0.0f64;
    let mut best = 0.0f64;
    let mut k = 0;
    while k < pts.len() {
        let m = pts[k].0;
        while k < pts.len() && pts[k].0 == m {
            cdf += pts[k].1;
            k += 1;
        }
        best = best.max(cdf.abs());
    }
    best.min(1.0)
}

/// Split-half distance of a graph ensemble at time `t`: even against odd
/// paths.
pub fn split_half_noise(ens: &GraphEnsemble, t: f64, graph: &ReebGraph) -> Result<f64> {
    let k = snapshot_index(&ens.times, t)?;
    let half = |r: usize| {
        let pts: Vec<GraphPoint> = ens.paths.iter().skip(r).step_by(2).map(|p| p[k]).collect();
        let n = pts.len();
        EmpiricalMarginal::from_points(pts, n, t, Source::Graph, DEFAULT_COALESCE_TOL)
    };
    w1_tree_distance(&half(0), &half(1), graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    Na,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub sde_dt: f64,
    pub graph_dt: f64,
    pub scheme: Scheme,
    pub fast_substeps_cap: usize,
    /// Initial law: uniform (Liouville) on the level `m` of edge `edge`.
    pub initial_edge: usize,
    pub initial_level: f64,
    pub coalesce_tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRow {
    pub alpha: f64,
    pub t: f64,
    pub w1: f64,
    pub ks: f64,
    pub noise_floor: f64,
    pub deficit: f64,
    pub anomalies: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub edge: usize,
    pub vertex: usize,
    pub class: Option<BoundaryClass>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub alphas: Vec<f64>,
    pub rows: Vec<StudyRow>,
    /// Split-half noise floor per snapshot time.
    pub noise_floor: Vec<(f64, f64)>,
    pub boundaries: Vec<BoundaryReport>,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
}

/// Boundary class of every finite edge end, with failures recorded.
pub fn classify_all(graph: &ReebGraph, tables: &[EdgeTable]) -> Vec<BoundaryReport> {
    let mut out = Vec::new();
    for t in tables {
        for v in [t.lower_vertex, t.upper_vertex] {
            let (class, note) = match classify_boundary(t, &graph.vertices[v]) {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(BoundaryReport { edge: t.edge_id, vertex: v, class, note });
        }
    }
    out
}

/// Applies the study verdict rule to finished rows.
pub fn judge(alphas: &[f64], rows: &[StudyRow], floors: &[(f64, f64)]) -> (Verdict, Vec<String>) {
    let mut reasons = Vec::new();
    if alphas.len() < 2 {
        return (Verdict::Na, vec!["a single alpha gives no trend".into()]);
    }
    for r in rows.iter().filter(|r| !r.valid) {
        reasons.push(format!("alpha {} t {}: deficit {:.4} exceeds {}", r.alpha, r.t, r.deficit, MAX_DEFICIT));
    }
    for &(t, floor) in floors {
        let series: Vec<&StudyRow> = rows.iter().filter(|r| r.t == t).collect();
        for w in series.windows(2) {
            if w[1].w1 > w[0].w1 + floor {
                reasons.push(format!("t {t}: W1 grows from {:.5} (alpha {}) to {:.5} (alpha {})", w[0].w1, w[0].alpha, w[1].w1, w[1].alpha));
            }
        }
        if let Some(last) = series.last() {
            if last.w1 > 2.0 * floor {
                reasons.push(format!("t {t}: final W1 {:.5} exceeds twice the noise floor {:.5}", last.w1, floor));
            }
        }
    }
    (if reasons.is_empty() { Verdict::Pass } else { Verdict::Fail }, reasons)
}

/// α-sweep of the planar process against the graph diffusion started from
/// the same law on `Γ`.
pub fn convergence_study(
    sys: &HamiltonianSystem,
    graph: &ReebGraph,
    tables: &[EdgeTable],
    rules: &[VertexRule],
    alphas: &[f64],
    cfg: &StudyConfig,
) -> Result<ConvergenceReport> {
    if alphas.is_empty() {
        return Err(Error::InvalidParameter("study needs at least one alpha".into()));
    }
    let t_end = cfg.times.iter().cloned().fold(0.0, f64::max);
    let gcfg = GraphSdeConfig { dt: cfg.graph_dt, t_end, n_paths: cfg.n_paths, seed: cfg.seed, snapshot_times: cfg.times.clone() };
    let start = GraphPoint::Edge { edge: cfg.initial_edge, m: cfg.initial_level };
    let reference = simulate_graph(graph, tables, rules, &gcfg, &GraphInitial::Point(start))?;
    let seed_point: Vec2 = graph.edge_seed(sys, cfg.initial_edge, cfg.initial_level)?;
    let law = InitialLaw::level_set(sys, seed_point, 0.25 * crate::levelset::DEFAULT_STEP, true)?;

    let mut floors = Vec::new();
    let mut refs = Vec::new();
    for &t in &cfg.times {
        floors.push((t, split_half_noise(&reference, t, graph)?));
        refs.push(empirical_marginal_graph(&reference, t, cfg.coalesce_tol)?);
    }
    let mut rows = Vec::new();
    for (k, &alpha) in alphas.iter().enumerate() {
        let mut scfg = SdeConfig::new(alpha, cfg.sde_dt, t_end, cfg.n_paths, cfg.seed.wrapping_add(1 + k as u64));
        scfg.scheme = cfg.scheme;
        scfg.fast_substeps_cap = cfg.fast_substeps_cap;
        scfg.h_max = graph.h_max;
        scfg.snapshot_times = cfg.times.clone();
        let ens = simulate_paths(sys, &scfg, &law)?;
        let proj = project_trajectory(graph, sys, &ens);
        for (j, &t) in cfg.times.iter().enumerate() {
            let m2 = empirical_marginal_2d(&proj, t, cfg.coalesce_tol)?;
            let deficit = m2.deficit;
            let cond = m2.conditioned();
            let w1 = w1_tree_distance(&cond, &refs[j], graph)?;
            let ks = ks_on_h(&cond, &refs[j], graph);
            rows.push(StudyRow { alpha, t, w1, ks, noise_floor: floors[j].1, deficit, anomalies: proj.anomalies, valid: deficit <= MAX_DEFICIT });
        }
    }
    let (verdict, reasons) = judge(alphas, &rows, &floors);
    Ok(ConvergenceReport { alphas: alphas.to_vec(), rows, noise_floor: floors, boundaries: classify_all(graph, tables), verdict, reasons })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rect;
    use crate::model::{make_builtin, Builtin, DensitySpec, DriftSpec};
    use crate::reeb::build_reeb_graph;

    fn h2_graph() -> ReebGraph {
        let sys = make_builtin(Builtin::H2, DriftSpec::Zero, DensitySpec::Lebesgue, 0.5).unwrap();
        build_reeb_graph(&sys, Rect::square(3.0), 3.0, 128).unwrap()
    }

    fn marginal(atoms: Vec<(GraphPoint, f64)>) -> EmpiricalMarginal {
        let n = atoms.len();
        EmpiricalMarginal { atoms, t: 0.0, source: Source::Graph, n_effective: n, deficit: 0.0 }
    }

    #[test]
    fn coalescing_and_bookkeeping() {
        let p = GraphPoint::Edge { edge: 1, m: 0.3 };
        let m = EmpiricalMarginal::from_points(vec![p, p], 2, 0.0, Source::Graph, 1e-12);
        assert_eq!(m.atoms, vec![(p, 1.0)]);
        let v = EmpiricalMarginal::from_points(vec![GraphPoint::Vertex { vertex: 2 }], 1, 0.0, Source::Graph, 1e-12);
        assert_eq!(v.atoms.len(), 1);
        let d = EmpiricalMarginal::from_points(vec![p], 4, 0.0, Source::Graph, 1e-12);
        assert!((d.deficit - 0.75).abs() < 1e-15 && d.n_effective == 1);
    }

    #[test]
    fn w1_between_wells() {
        let g = h2_graph();
        let a = marginal(vec![(GraphPoint::Edge { edge: 0, m: -0.2 }, 1.0)]);
        let b = marginal(vec![(GraphPoint::Edge { edge: 1, m: -0.2 }, 1.0)]);
        assert!((w1_tree_distance(&a, &b, &g).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(w1_tree_distance(&a, &a, &g).unwrap(), 0.0);
        let c = marginal(vec![(GraphPoint::Edge { edge: 1, m: -0.2 }, 0.5)]);
        assert!(matches!(w1_tree_distance(&a, &c, &g), Err(Error::WeightMismatch(..))));
    }

    #[test]
    fn ks_blind_to_edges() {
        let g = h2_graph();
        let a = marginal(vec![(GraphPoint::Edge { edge: 0, m: -0.2 }, 0.5), (GraphPoint::Edge { edge: 1, m: -0.1 }, 0.5)]);
        let b = marginal(vec![(GraphPoint::Edge { edge: 1, m: -0.2 }, 0.5), (GraphPoint::Edge { edge: 0, m: -0.1 }, 0.5)]);
        assert_eq!(ks_on_h(&a, &b, &g), 0.0);
        assert!((w1_tree_distance(&a, &b, &g).unwrap() - 0.1).abs() < 1e-12);
        let c = marginal(vec![(GraphPoint::Edge { edge: 2, m: 1.0 }, 1.0)]);
        assert_eq!(ks_on_h(&a, &c, &g), 1.0);
    }

    #[test]
    fn verdict_rules() {
        let row = |alpha, w1| StudyRow { alpha, t: 1.0, w1, ks: 0.0, noise_floor: 0.01, deficit: 0.0, anomalies: 0, valid: true };
        let floors = [(1.0, 0.01)];
        assert_eq!(judge(&[0.5], &[row(0.5, 0.1)], &floors).0, Verdict::Na);
        assert_eq!(judge(&[0.5, 0.1], &[row(0.5, 0.1), row(0.1, 0.015)], &floors).0, Verdict::Pass);
        assert_eq!(judge(&[0.5, 0.1], &[row(0.5, 0.1), row(0.1, 0.05)], &floors).0, Verdict::Fail);
    }
}
