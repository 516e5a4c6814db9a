//! The limiting diffusion on `Γ`.
//!
//! On edge `i` the generator is `ε S² u″ + (B⁰ + ε B¹) u′` with coefficients
//! read from an [`EdgeTable`]. Vertices act through [`VertexRule`]s: Walsh
//! splitting at interior point vertices, reflection at entrance vertices and
//! at the `h_max` cap, and sticky holding at plateau vertices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levelset::{coefficient_sample_refined, CoefficientSample};
use crate::model::HamiltonianSystem;
use crate::numeric::{least_squares, HermiteSpline};
use crate::reeb::{GraphPoint, ReebGraph, Vertex, VertexKind};
use crate::rng::{par_map, PathRng};

/// Default number of uniformly spaced levels per edge.
pub const DEFAULT_LEVELS: usize = 32;
/// Geometric clustering toward vertices: `Δ = span · 2^{-k}` for these `k`.
const CLUSTER: std::ops::RangeInclusive<i32> = 3..=14;
const FIT_POINTS: usize = 6;
const MAX_HALVINGS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndKind {
    Saddle,
    Extremum,
    Plateau,
    Cap,
}

impl EndKind {
    fn of(kind: VertexKind) -> Self {
        match kind {
            VertexKind::Saddle => EndKind::Saddle,
            VertexKind::Minimum | VertexKind::Maximum => EndKind::Extremum,
            VertexKind::Plateau => EndKind::Plateau,
            VertexKind::Infinity => EndKind::Cap,
        }
    }
}

/// Averaged coefficients at one level of one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub m: f64,
    pub period: f64,
    pub s2: f64,
    pub b0: f64,
    pub b1: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

// Interpolated quantities: T, ∮|∇H|, T·B⁰, T·B¹, a, b, c, d. The ratios
// S², B⁰, B¹ are formed after interpolation so that the log divergence of
// the period at saddles is carried by a single factor.
const NQ: usize = 8;
// Whether the quantity stays bounded at a saddle and vanishes at an extremum.
const BOUNDED: [bool; NQ] = [false, true, true, false, true, true, false, false];

fn quantities(s: &CoefficientSample) -> [f64; NQ] {
    [s.period, s.grad_integral, s.period * s.b0, s.period * s.b1, s.a, s.b, s.c, s.d]
}

fn basis(kind: EndKind, bounded: bool, delta: f64) -> [f64; 4] {
    let d = delta;
    match (kind, bounded) {
        (EndKind::Saddle, true) => [1.0, d, d * d.ln(), d * d],
        (EndKind::Saddle, false) => [1.0, d, d.ln(), d * d.ln()],
        (EndKind::Extremum, true) => [d, d * d, d * d * d, d * d * d * d],
        (EndKind::Extremum, false) => [1.0, d, d * d, d * d * d],
        (EndKind::Plateau, true) => {
            let s = d.sqrt();
            [s, s * s, s * s * s, s * s * s * s]
        }
        (EndKind::Plateau, false) => {
            let s = d.sqrt();
            [1.0 / s, 1.0, s, s * s]
        }
        (EndKind::Cap, _) => [1.0, d, d * d, d * d * d],
    }
}

/// Asymptotic form of the tabulated quantities next to a vertex.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndFit {
    pub kind: EndKind,
    pub level: f64,
    /// The fit replaces interpolation for `Δ` below this.
    pub threshold: f64,
    pub coef: Vec<[f64; 4]>,
    /// Largest relative misfit over the fitted samples.
    pub max_rel_residual: f64,
}

impl EndFit {
    fn new(kind: EndKind, level: f64, near: &[(f64, [f64; NQ])]) -> Option<Self> {
        let mut coef = Vec::with_capacity(NQ);
        let mut worst: f64 = 0.0;
        for q in 0..NQ {
            let rows: Vec<([f64; 4], f64)> = near.iter().map(|(d, v)| (basis(kind, BOUNDED[q], *d), v[q])).collect();
            let all_zero = rows.iter().all(|r| r.1 == 0.0);
            let c = if all_zero { [0.0; 4] } else { least_squares(&rows)? };
            let scale = rows.iter().fold(0.0f64, |a, r| a.max(r.1.abs()));
            for (b, y) in &rows {
                let fit: f64 = b.iter().zip(&c).map(|(x, k)| x * k).sum();
                if scale > 0.0 {
                    worst = worst.max((fit - y).abs() / scale);
                }
            }
            coef.push(c);
        }
        Some(Self { kind, level, threshold: near[1].0, coef, max_rel_residual: worst })
    }

    fn eval(&self, delta: f64) -> [f64; NQ] {
        std::array::from_fn(|q| {
            let b = basis(self.kind, BOUNDED[q], delta);
            b.iter().zip(&self.coef[q]).map(|(x, k)| x * k).sum()
        })
    }

    /// Limit of `∮ |∇H| dl` at the vertex.
    pub fn alpha(&self) -> f64 {
        match self.kind {
            EndKind::Saddle => self.coef[1][0],
            _ => 0.0,
        }
    }

    /// Coefficient `k` of `k·ln(1/Δ)` in the period near a saddle.
    pub fn log_rate(&self) -> Option<f64> {
        (self.kind == EndKind::Saddle).then(|| -self.coef[0][2])
    }
}

/// Tabulated coefficients of one edge.
#[derive(Debug, Clone, Serialize)]
pub struct EdgeTable {
    pub edge_id: usize,
    pub lo: f64,
    pub hi: f64,
    pub epsilon: f64,
    pub lower_vertex: usize,
    pub upper_vertex: usize,
    pub samples: Vec<CoefficientSample>,
    pub lower_fit: Option<EndFit>,
    pub upper_fit: Option<EndFit>,
    #[serde(skip)]
    splines: Vec<HermiteSpline>,
}

impl EdgeTable {
    fn from_samples(graph: &ReebGraph, edge_id: usize, epsilon: f64, samples: Vec<CoefficientSample>) -> Result<Self> {
        let e = graph.edge(edge_id)?;
        let ms: Vec<f64> = samples.iter().map(|s| s.m).collect();
        let qs: Vec<[f64; NQ]> = samples.iter().map(quantities).collect();
        let splines = (0..NQ)
            .map(|q| {
                let y: Vec<f64> = qs.iter().map(|v| v[q]).collect();
                match q {
                    4 => HermiteSpline::with_slopes(ms.clone(), y, samples.iter().map(|s| s.a_prime).collect()),
                    5 => HermiteSpline::with_slopes(ms.clone(), y, samples.iter().map(|s| s.c).collect()),
                    _ => HermiteSpline::pchip(ms.clone(), y),
                }
            })
            .collect();
        let fit_end = |vertex: usize, level: f64| -> Result<Option<EndFit>> {
            let kind = EndKind::of(graph.vertex(vertex)?.kind);
            if kind == EndKind::Cap {
                return Ok(None);
            }
            let mut near: Vec<(f64, [f64; NQ])> = ms.iter().zip(&qs).map(|(m, q)| ((m - level).abs(), *q)).collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0));
            near.truncate(FIT_POINTS);
            EndFit::new(kind, level, &near)
                .map(Some)
                .ok_or_else(|| Error::InvalidParameter(format!("singular asymptotic fit at level {level} on edge {edge_id}")))
        };
        Ok(Self {
            edge_id,
            lo: e.lo,
            hi: e.hi,
            epsilon,
            lower_vertex: e.lower,
            upper_vertex: e.upper,
            lower_fit: fit_end(e.lower, e.lo)?,
            upper_fit: fit_end(e.upper, e.hi)?,
            samples,
            splines,
        })
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    /// The same edge re-fitted on every other sample, for error estimates.
    pub fn decimated(&self, graph: &ReebGraph) -> Result<Self> {
        let mut samples: Vec<CoefficientSample> = self.samples.iter().step_by(2).cloned().collect();
        if let Some(last) = self.samples.last() {
            if samples.last().map(|s| s.m) != Some(last.m) {
                samples.push(*last);
            }
        }
        Self::from_samples(graph, self.edge_id, self.epsilon, samples)
    }

    fn raw(&self, m: f64) -> [f64; NQ] {
        let tiny = 1e-300f64.max(1e-16 * self.span());
        if let Some(f) = &self.lower_fit {
            let d = m - self.lo;
            if d < f.threshold {
                return f.eval(d.max(tiny));
            }
        }
        if let Some(f) = &self.upper_fit {
            let d = self.hi - m;
            if d < f.threshold {
                return f.eval(d.max(tiny));
            }
        }
        std::array::from_fn(|q| self.splines[q].value(m))
    }

    pub fn eval(&self, m: f64) -> Coefficients {
        let q = self.raw(m);
        Coefficients { m, period: q[0], s2: q[1] / q[0], b0: q[2] / q[0], b1: q[3] / q[0], a: q[4], b: q[5], c: q[6], d: q[7] }
    }

    /// `(B⁰ + εB¹, 2εS²)` at level `m`.
    pub fn drift_diffusion(&self, m: f64) -> (f64, f64) {
        let c = self.eval(m);
        (c.b0 + self.epsilon * c.b1, (2.0 * self.epsilon * c.s2).max(0.0))
    }

    /// `∮ |∇H| dl` at level `m`.
    pub fn grad_integral(&self, m: f64) -> f64 {
        self.raw(m)[1]
    }

    pub fn fit_at(&self, vertex: usize) -> Option<&EndFit> {
        if vertex == self.lower_vertex {
            self.lower_fit.as_ref()
        } else if vertex == self.upper_vertex {
            self.upper_fit.as_ref()
        } else {
            None
        }
    }

    /// Level at distance `delta` into the edge from `vertex`.
    pub fn level_from(&self, vertex: usize, delta: f64) -> f64 {
        if vertex == self.lower_vertex {
            self.lo + delta
        } else {
            self.hi - delta
        }
    }
}

/// Levels sampled on one edge: uniform interior points plus geometric
/// clusters toward finite vertices.
pub fn table_levels(graph: &ReebGraph, edge_id: usize, n_levels: usize) -> Result<Vec<f64>> {
    let e = graph.edge(edge_id)?;
    let span = e.span();
    let mut ms: Vec<f64> = (0..n_levels).map(|k| e.lo + span * (k as f64 + 0.5) / n_levels as f64).collect();
    for k in CLUSTER {
        let d = span * 0.5f64.powi(k);
        ms.push(e.lo + d);
        if e.upper != graph.infinity() {
            ms.push(e.hi - d);
        }
    }
    if e.upper == graph.infinity() {
        ms.push(e.hi);
    }
    ms.sort_by(f64::total_cmp);
    ms.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * span);
    Ok(ms)
}

/// Tabulates every edge of `graph`.
pub fn build_tables(graph: &ReebGraph, sys: &HamiltonianSystem, n_levels: usize, step: f64) -> Result<Vec<EdgeTable>> {
    if n_levels < 8 {
        return Err(Error::InvalidParameter(format!("need at least 8 levels per edge, got {n_levels}")));
    }
    let mut tables = Vec::with_capacity(graph.edges.len());
    for e in &graph.edges {
        let ms = table_levels(graph, e.id, n_levels)?;
        let samples: Vec<CoefficientSample> = par_map(ms.len(), |k| {
            let seed = graph.edge_seed(sys, e.id, ms[k])?;
            coefficient_sample_refined(sys, seed, step)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        tables.push(EdgeTable::from_samples(graph, e.id, sys.epsilon, samples)?);
    }
    Ok(tables)
}

/// Feller's classification of a boundary point of a 1D diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryClass {
    Entrance,
    Exit,
    Regular,
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Finiteness {
    Finite,
    Infinite,
    Unclear,
}

fn finiteness(values: &[f64]) -> Finiteness {
    let n = values.len();
    let last = values[n - 1];
    if !last.is_finite() {
        return Finiteness::Infinite;
    }
    let inc2 = last - values[n - 2];
    let inc1 = values[n - 2] - values[n - 3];
    if inc2.abs() <= 1e-3 * last.abs() {
        Finiteness::Finite
    } else if inc2 >= 0.5 * inc1 {
        Finiteness::Infinite
    } else {
        Finiteness::Unclear
    }
}

/// Numerical Feller test at the end of `table` attached to `vertex`.
///
/// With `Δ` the distance from the vertex, scale density `s` and speed
/// density `1/(εS² s)`, the integrals `∫ S(0, ξ] dM(ξ)` and
/// `∫ M(0, ξ] dS(ξ)` are evaluated with inner cutoffs `Δ₀·2^{-15j}`; a
/// sequence that settles counts as finite, one whose increments do not
/// shrink as infinite. The `h_max` cap is regular by construction.
pub fn classify_boundary(table: &EdgeTable, vertex: &Vertex) -> Result<BoundaryClass> {
    if vertex.kind == VertexKind::Infinity {
        return Ok(BoundaryClass::Regular);
    }
    let dir = if vertex.id == table.lower_vertex {
        1.0
    } else if vertex.id == table.upper_vertex {
        -1.0
    } else {
        return Err(Error::InvalidParameter(format!("vertex {} is not an end of edge {}", vertex.id, table.edge_id)));
    };
    let eps = table.epsilon;
    let d0 = 0.25 * table.span();
    // log-spaced nodes from Δ₀ down to Δ₀·2^{-60}
    const PER_OCTAVE: usize = 8;
    const OCTAVES: usize = 60;
    let n = PER_OCTAVE * OCTAVES + 1;
    let du = std::f64::consts::LN_2 / PER_OCTAVE as f64;
    let deltas: Vec<f64> = (0..n).map(|j| d0 * (-(j as f64) * du).exp()).collect();
    let coeff: Vec<(f64, f64)> = deltas
        .iter()
        .map(|&d| {
            let (mu, var) = table.drift_diffusion(table.level_from(vertex.id, d));
            (dir * mu, 0.5 * var)
        })
        .collect();
    // ln s(Δ) = −∫_{Δ₀}^{Δ} μ/(εS²) dη, trapezoid in u = ln Δ
    let mut ln_s = vec![0.0; n];
    for j in 1..n {
        let f = |k: usize| coeff[k].0 / coeff[k].1 * deltas[k];
        ln_s[j] = ln_s[j - 1] + 0.5 * (f(j - 1) + f(j)) * du;
    }
    let s: Vec<f64> = ln_s.iter().map(|l| l.exp()).collect();
    let speed: Vec<f64> = (0..n).map(|k| 1.0 / (coeff[k].1 * s[k])).collect();
    let _ = eps;

    let integrals = |cut: usize| -> (f64, f64) {
        // nodes cut (smallest Δ) .. 0 (largest), integrate outward
        let mut big_s = 0.0;
        let mut big_m = 0.0;
        let mut sigma = 0.0;
        let mut nu = 0.0;
        for j in (0..cut).rev() {
            let (k0, k1) = (j + 1, j);
            let ds = 0.5 * (s[k0] * deltas[k0] + s[k1] * deltas[k1]) * du;
            let dm = 0.5 * (speed[k0] * deltas[k0] + speed[k1] * deltas[k1]) * du;
            let (s_prev, m_prev) = (big_s, big_m);
            big_s += ds;
            big_m += dm;
            sigma += 0.5 * (s_prev + big_s) * dm;
            nu += 0.5 * (m_prev + big_m) * ds;
        }
        (sigma, nu)
    };
    let cuts: Vec<usize> = [15, 30, 45, 60].iter().map(|o| o * PER_OCTAVE).collect();
    let vals: Vec<(f64, f64)> = cuts.iter().map(|&c| integrals(c)).collect();
    let sigma: Vec<f64> = vals.iter().map(|v| v.0).collect();
    let nu: Vec<f64> = vals.iter().map(|v| v.1).collect();
    let (fs, fn_) = (finiteness(&sigma), finiteness(&nu));
    match (fs, fn_) {
        (Finiteness::Finite, Finiteness::Finite) => Ok(BoundaryClass::Regular),
        (Finiteness::Finite, Finiteness::Infinite) => Ok(BoundaryClass::Exit),
        (Finiteness::Infinite, Finiteness::Finite) => Ok(BoundaryClass::Entrance),
        (Finiteness::Infinite, Finiteness::Infinite) => Ok(BoundaryClass::Natural),
        _ => Err(Error::InconclusiveClassification {
            vertex: vertex.id,
            detail: format!("scale-speed integrals {sigma:?}, speed-scale integrals {nu:?}"),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexBehavior {
    WalshSplit,
    ReflectCap,
    Entrance,
    Sticky,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VertexRule {
    pub vertex_id: usize,
    pub behavior: VertexBehavior,
    /// Exit probabilities per incident edge.
    pub split_probs: BTreeMap<usize, f64>,
    /// Exponential holding rate at sticky vertices.
    pub hold_rate: Option<f64>,
    /// Distance from the vertex at which excursions restart.
    pub delta_v: f64,
}

/// Splitting probabilities at `vertex` from the tables' own near-vertex fits.
pub fn table_walsh_probabilities(tables: &[EdgeTable], vertex: &Vertex) -> BTreeMap<usize, f64> {
    let alphas: Vec<(usize, f64)> =
        vertex.incident().map(|e| (e, tables[e].fit_at(vertex.id).map_or(0.0, |f| f.alpha().max(0.0)))).collect();
    let total: f64 = alphas.iter().map(|a| a.1).sum();
    alphas.into_iter().map(|(e, a)| (e, if total > 0.0 { a / total } else { 1.0 / vertex.degree() as f64 })).collect()
}

/// Default vertex rules: Walsh splitting with `p_i ∝ α_i` at interior point
/// vertices, reflection at extrema and at the cap, and sticky holding at
/// vertices with positive mass.
///
/// `delta_v_frac` sets the restart distance as a fraction of the shortest
/// incident edge.
pub fn default_rules(graph: &ReebGraph, tables: &[EdgeTable], delta_v_frac: f64) -> Vec<VertexRule> {
    graph
        .vertices
        .iter()
        .map(|v| {
            let span = v.incident().map(|e| graph.edges[e].span()).fold(f64::INFINITY, f64::min);
            let delta_v = delta_v_frac * span;
            let (behavior, split_probs, hold_rate) = if v.kind == VertexKind::Infinity {
                (VertexBehavior::ReflectCap, BTreeMap::new(), None)
            } else if v.mass > 0.0 {
                // exits weighted by ∮|∇H| just off the vertex; the rate makes
                // the held fraction match the vertex's share of μ
                let weights: Vec<(usize, f64)> =
                    v.incident().map(|e| (e, tables[e].grad_integral(tables[e].level_from(v.id, delta_v)))).collect();
                let total: f64 = weights.iter().map(|w| w.1).sum();
                let eps = tables[weights[0].0].epsilon;
                let rate = eps * total / (v.mass * delta_v);
                (VertexBehavior::Sticky, weights.into_iter().map(|(e, w)| (e, w / total)).collect(), Some(rate))
            } else if v.degree() == 1 {
                (VertexBehavior::Entrance, BTreeMap::new(), None)
            } else {
                (VertexBehavior::WalshSplit, v.walsh_probabilities(), None)
            };
            VertexRule { vertex_id: v.id, behavior, split_probs, hold_rate, delta_v }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSdeConfig {
    pub dt: f64,
    pub t_end: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub snapshot_times: Vec<f64>,
}

impl GraphSdeConfig {
    pub fn validate(&self) -> Result<Vec<f64>> {
        validate_schedule(self.dt, self.t_end, self.n_paths, &self.snapshot_times)
    }
}

/// Checks step, horizon and snapshot schedule; returns the snapshot times
/// (`[t_end]` when none are given).
pub(crate) fn validate_schedule(dt: f64, t_end: f64, n_paths: usize, snapshots: &[f64]) -> Result<Vec<f64>> {
    if n_paths < 1 {
        return Err(Error::InvalidParameter("n_paths must be at least 1".into()));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidParameter(format!("t_end must be finite and non-negative, got {t_end}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if t_end > 0.0 && dt > t_end {
        return Err(Error::InvalidParameter(format!("dt = {dt} exceeds t_end = {t_end}")));
    }
    let times = if snapshots.is_empty() { vec![t_end] } else { snapshots.to_vec() };
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("snapshot times must be strictly increasing".into()));
    }
    if times.iter().any(|&t| !(0.0..=t_end).contains(&t)) {
        return Err(Error::InvalidParameter(format!("snapshot times must lie in [0, {t_end}]")));
    }
    Ok(times)
}

/// Initial law on `Γ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphInitial {
    Point(GraphPoint),
    /// Weighted atoms, sampled independently per path.
    Atoms(Vec<(GraphPoint, f64)>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphEnsemble {
    pub times: Vec<f64>,
    /// `paths[p][k]` is path `p` at `times[k]`.
    pub paths: Vec<Vec<GraphPoint>>,
    pub step_rejections: u64,
    /// Exits chosen at Walsh and sticky vertices: vertex → edge → count.
    pub split_counts: BTreeMap<usize, BTreeMap<usize, u64>>,
}

#[derive(Debug, Clone, Copy)]
enum State {
    Edge { e: usize, m: f64 },
    Held { v: usize, remaining: f64 },
}

#[derive(Default)]
struct PathStats {
    rejections: u64,
    splits: Vec<(usize, usize)>,
}

struct Stepper<'a> {
    graph: &'a ReebGraph,
    tables: &'a [EdgeTable],
    rules: &'a [VertexRule],
}

impl Stepper<'_> {
    /// Leaves vertex `v` along an edge drawn from its rule, `dist` in.
    fn exit(&self, v: usize, dist: f64, rng: &mut PathRng, stats: &mut PathStats) -> Option<State> {
        let rule = &self.rules[v];
        let (edges, probs): (Vec<usize>, Vec<f64>) = rule.split_probs.iter().map(|(e, p)| (*e, *p)).unzip();
        let j = edges[rng.choose(&probs)];
        let t = &self.tables[j];
        if dist >= t.span() {
            return None;
        }
        stats.splits.push((v, j));
        Some(State::Edge { e: j, m: t.level_from(v, dist) })
    }

    /// Resolves a proposed level `m2` on edge `e`; `None` asks for a smaller step.
    fn settle(&self, e: usize, m2: f64, rng: &mut PathRng, stats: &mut PathStats) -> Option<State> {
        let t = &self.tables[e];
        for (v, c, sign) in [(t.lower_vertex, t.lo, 1.0), (t.upper_vertex, t.hi, -1.0)] {
            let rule = &self.rules[v];
            // signed distance into the edge
            let inside = sign * (m2 - c);
            match rule.behavior {
                VertexBehavior::WalshSplit if inside < rule.delta_v => {
                    return self.exit(v, rule.delta_v.max(-inside), rng, stats);
                }
                VertexBehavior::Sticky if inside <= 0.0 => {
                    let rate = rule.hold_rate.unwrap_or(f64::INFINITY);
                    return Some(State::Held { v, remaining: rng.exponential(rate) });
                }
                VertexBehavior::Entrance | VertexBehavior::ReflectCap if inside < 0.0 => {
                    let m3 = c - sign * inside;
                    return (m3 >= t.lo && m3 <= t.hi).then_some(State::Edge { e, m: m3 });
                }
                _ => {}
            }
        }
        (m2 >= t.lo && m2 <= t.hi).then_some(State::Edge { e, m: m2 })
    }

    fn advance(&self, state: State, h: f64, rng: &mut PathRng, stats: &mut PathStats, depth: u32) -> State {
        match state {
            State::Held { v, remaining } => {
                if remaining > h {
                    return State::Held { v, remaining: remaining - h };
                }
                let delta = self.rules[v].delta_v;
                match self.exit(v, delta, rng, stats) {
                    Some(s) => s,
                    None => State::Held { v, remaining: 0.0 },
                }
            }
            State::Edge { e, m } => {
                let (mu, var) = self.tables[e].drift_diffusion(m);
                let xi = rng.normal();
                let m2 = m + mu * h + (var * h).sqrt() * xi;
                if (m2 - m).abs() < self.tables[e].span() {
                    if let Some(s) = self.settle(e, m2, rng, stats) {
                        return s;
                    }
                }
                stats.rejections += 1;
                if depth >= MAX_HALVINGS {
                    return state;
                }
                let mid = self.advance(state, 0.5 * h, rng, stats, depth + 1);
                self.advance(mid, 0.5 * h, rng, stats, depth + 1)
            }
        }
    }

    fn point(&self, s: State) -> GraphPoint {
        match s {
            State::Edge { e, m } => GraphPoint::Edge { edge: e, m },
            State::Held { v, .. } => GraphPoint::Vertex { vertex: v },
        }
    }

    fn initial(&self, p: GraphPoint, rng: &mut PathRng) -> State {
        match p {
            GraphPoint::Edge { edge, m } => State::Edge { e: edge, m },
            GraphPoint::Vertex { vertex } => {
                let rule = &self.rules[vertex];
                match rule.behavior {
                    VertexBehavior::Sticky => {
                        State::Held { v: vertex, remaining: rng.exponential(rule.hold_rate.unwrap_or(f64::INFINITY)) }
                    }
                    _ => {
                        let e = self.graph.vertices[vertex].incident().next().unwrap();
                        let d = rule.delta_v.max(1e-12 * self.tables[e].span());
                        State::Edge { e, m: self.tables[e].level_from(vertex, d) }
                    }
                }
            }
        }
    }
}

/// Euler–Maruyama on the edge coordinate with vertex rules applied at every
/// step. Paths run independently on their own random streams.
pub fn simulate_graph(
    graph: &ReebGraph,
    tables: &[EdgeTable],
    rules: &[VertexRule],
    cfg: &GraphSdeConfig,
    initial: &GraphInitial,
) -> Result<GraphEnsemble> {
    let times = cfg.validate()?;
    if tables.len() != graph.edges.len() || rules.len() != graph.vertices.len() {
        return Err(Error::InvalidParameter("tables and rules must cover the whole graph".into()));
    }
    for r in rules {
        let total: f64 = r.split_probs.values().sum();
        let needs = matches!(r.behavior, VertexBehavior::WalshSplit | VertexBehavior::Sticky);
        if needs && (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("split probabilities at vertex {} sum to {total}", r.vertex_id)));
        }
    }
    let check_point = |p: &GraphPoint| -> Result<()> {
        match *p {
            GraphPoint::Edge { edge, m } => {
                let e = graph.edge(edge)?;
                if !(m > e.lo && m <= e.hi) {
                    return Err(Error::InvalidParameter(format!("initial level {m} outside edge {edge}")));
                }
                Ok(())
            }
            GraphPoint::Vertex { vertex } => graph.vertex(vertex).map(|_| ()),
        }
    };
    match initial {
        GraphInitial::Point(p) => check_point(p)?,
        GraphInitial::Atoms(atoms) => {
            if atoms.is_empty() {
                return Err(Error::InvalidParameter("empty initial law".into()));
            }
            for (p, _) in atoms {
                check_point(p)?;
            }
        }
    }
    let stepper = Stepper { graph, tables, rules };
    let results: Vec<(Vec<GraphPoint>, PathStats)> = par_map(cfg.n_paths, |path| {
        let mut rng = PathRng::new(cfg.seed, path as u64);
        let mut stats = PathStats::default();
        let start = match initial {
            GraphInitial::Point(p) => *p,
            GraphInitial::Atoms(atoms) => {
                let w: Vec<f64> = atoms.iter().map(|a| a.1).collect();
                atoms[rng.choose(&w)].0
            }
        };
        let mut state = stepper.initial(start, &mut rng);
        let mut t = 0.0;
        let mut snaps = Vec::with_capacity(times.len());
        for &target in &times {
            while t < target - 1e-12 * cfg.dt {
                let h = cfg.dt.min(target - t);
                state = stepper.advance(state, h, &mut rng, &mut stats, 0);
                t += h;
            }
            t = t.max(target);
            snaps.push(stepper.point(state));
        }
        (snaps, stats)
    });
    let mut ensemble = GraphEnsemble { times, paths: Vec::with_capacity(cfg.n_paths), step_rejections: 0, split_counts: BTreeMap::new() };
    for (snaps, stats) in results {
        ensemble.paths.push(snaps);
        ensemble.step_rejections += stats.rejections;
        for (v, e) in stats.splits {
            *ensemble.split_counts.entry(v).or_default().entry(e).or_insert(0) += 1;
        }
    }
    Ok(ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rect;
    use crate::model::{make_builtin, Builtin, DensitySpec, DriftSpec};
    use crate::reeb::build_reeb_graph;

    fn setup(b: Builtin, drift: DriftSpec, density: DensitySpec, eps: f64, h_max: f64) -> (HamiltonianSystem, ReebGraph, Vec<EdgeTable>) {
        let sys = make_builtin(b, drift, density, eps).unwrap();
        let g = build_reeb_graph(&sys, Rect::square(3.0), h_max, 128).unwrap();
        let t = build_tables(&g, &sys, 16, 0.02).unwrap();
        (sys, g, t)
    }

    #[test]
    fn h1_tables_match_closed_forms() {
        let (_, _, t) = setup(Builtin::H1, DriftSpec::Zero, DensitySpec::Lebesgue, 0.5, 4.0);
        for k in 0..=40 {
            let m = 0.1 + 3.8 * k as f64 / 40.0;
            let c = t[0].eval(m);
            assert!((c.s2 / (2.0 * m) - 1.0).abs() < 5e-3, "m={m} s2={}", c.s2);
            let (mu, _) = t[0].drift_diffusion(m);
            assert!((mu - 1.0).abs() < 5e-3, "m={m} drift={mu}");
        }
        // the fit takes over next to the minimum
        let c = t[0].eval(1e-9);
        assert!((c.period / (2.0 * std::f64::consts::PI) - 1.0).abs() < 1e-3);
        assert!((c.s2 / 2e-9 - 1.0).abs() < 1e-2);
    }

    #[test]
    fn gibbs_friction_drift() {
        let (_, _, t) = setup(Builtin::H1, DriftSpec::GradH, DensitySpec::Gibbs, 0.5, 4.0);
        for m in [0.2, 1.0, 3.5] {
            let (mu, _) = t[0].drift_diffusion(m);
            assert!((mu - (-2.0 * m + 1.0)).abs() < 5e-3 * (1.0 + 2.0 * m), "m={m} drift={mu}");
        }
    }

    #[test]
    fn boundary_classes() {
        let (_, g, t) = setup(Builtin::H1, DriftSpec::Zero, DensitySpec::Lebesgue, 0.5, 4.0);
        assert_eq!(classify_boundary(&t[0], &g.vertices[0]).unwrap(), BoundaryClass::Entrance);
        assert_eq!(classify_boundary(&t[0], &g.vertices[1]).unwrap(), BoundaryClass::Regular);
        let (_, g2, t2) = setup(Builtin::H2, DriftSpec::GradH, DensitySpec::Gibbs, 0.25, 3.0);
        let saddle = &g2.vertices[2];
        assert_eq!(classify_boundary(&t2[0], saddle).unwrap(), BoundaryClass::Regular);
        assert_eq!(classify_boundary(&t2[2], saddle).unwrap(), BoundaryClass::Regular);
        assert_eq!(classify_boundary(&t2[0], &g2.vertices[0]).unwrap(), BoundaryClass::Entrance);
    }

    #[test]
    fn table_alphas_agree_with_vertex_data() {
        let (_, g, t) = setup(Builtin::H2, DriftSpec::Zero, DensitySpec::Lebesgue, 0.5, 3.0);
        let v = &g.vertices[2];
        let from_tables = table_walsh_probabilities(&t, v);
        for (e, p) in v.walsh_probabilities() {
            assert!((from_tables[&e] - p).abs() < 1e-3, "edge {e}: {} vs {p}", from_tables[&e]);
        }
        let fit = t[0].fit_at(2).unwrap();
        assert!(fit.log_rate().unwrap() > 0.0);
    }

    #[test]
    fn deterministic_without_noise() {
        let mut sys = make_builtin(Builtin::H1, DriftSpec::GradH, DensitySpec::Lebesgue, 1.0).unwrap();
        sys.epsilon = 0.0;
        let g = build_reeb_graph(&sys, Rect::square(3.0), 4.0, 128).unwrap();
        let t = build_tables(&g, &sys, 16, 0.02).unwrap();
        let rules = default_rules(&g, &t, 1e-3);
        let cfg = GraphSdeConfig { dt: 1e-3, t_end: 0.5, n_paths: 3, seed: 1, snapshot_times: vec![] };
        let ens = simulate_graph(&g, &t, &rules, &cfg, &GraphInitial::Point(GraphPoint::Edge { edge: 0, m: 2.0 })).unwrap();
        // ṁ = B⁰(m) = −2m
        let expect = 2.0 * (-1.0f64).exp();
        for p in &ens.paths {
            assert!((g.level(p[0]) - expect).abs() < 2e-3);
            assert_eq!(p[0], ens.paths[0][0]);
        }
    }

    #[test]
    fn splitting_probabilities_reproduced() {
        let (_, g, t) = setup(Builtin::H2, DriftSpec::Zero, DensitySpec::Lebesgue, 0.5, 3.0);
        let rules = default_rules(&g, &t, 1e-3);
        let cfg = GraphSdeConfig { dt: 1e-3, t_end: 1.0, n_paths: 400, seed: 5, snapshot_times: vec![] };
        let ens = simulate_graph(&g, &t, &rules, &cfg, &GraphInitial::Point(GraphPoint::Edge { edge: 2, m: 0.05 })).unwrap();
        let counts = &ens.split_counts[&2];
        let total: u64 = counts.values().sum();
        assert!(total > 2000);
        for (e, p) in &rules[2].split_probs {
            let f = counts.get(e).copied().unwrap_or(0) as f64 / total as f64;
            let se = (p * (1.0 - p) / total as f64).sqrt();
            assert!((f - p).abs() < 4.0 * se, "edge {e}: {f} vs {p}");
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(validate_schedule(0.1, 0.05, 1, &[]).is_err());
        assert!(validate_schedule(0.01, 1.0, 0, &[]).is_err());
        assert!(validate_schedule(0.01, 1.0, 1, &[0.5, 0.5]).is_err());
        assert_eq!(validate_schedule(0.01, 0.0, 1, &[]).unwrap(), vec![0.0]);
    }
}
