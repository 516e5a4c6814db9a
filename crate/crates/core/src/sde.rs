//! Simulation of `dY = (1/α) A∇H dt − e dt + √(2ε) dB` and projection of
//! the resulting paths onto `Γ`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Rect, Vec2};
use crate::graph_diffusion::validate_schedule;
use crate::levelset::{trace_level_curve, LevelCurve};
use crate::model::HamiltonianSystem;
use crate::reeb::{GraphPoint, ReebGraph};
use crate::rng::{par_map, PathRng};

pub const DEFAULT_SUBSTEP_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Strang splitting around a resolved Hamiltonian substep.
    Splitting,
    EulerMaruyama,
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "splitting" | "strang" => Ok(Scheme::Splitting),
            "euler_maruyama" | "euler-maruyama" | "em" => Ok(Scheme::EulerMaruyama),
            other => Err(Error::InvalidParameter(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdeConfig {
    pub alpha: f64,
    pub dt: f64,
    pub t_end: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub fast_substeps_cap: usize,
    /// Paths with `H > h_max` are killed.
    pub h_max: f64,
    pub snapshot_times: Vec<f64>,
}

impl SdeConfig {
    pub fn new(alpha: f64, dt: f64, t_end: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            alpha,
            dt,
            t_end,
            n_paths,
            seed,
            scheme: Scheme::Splitting,
            fast_substeps_cap: DEFAULT_SUBSTEP_CAP,
            h_max: f64::INFINITY,
            snapshot_times: Vec::new(),
        }
    }

    /// Checks the configuration and returns the snapshot times.
    pub fn validate(&self) -> Result<Vec<f64>> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.fast_substeps_cap < 1 {
            return Err(Error::InvalidParameter("fast_substeps_cap must be at least 1".into()));
        }
        if self.scheme == Scheme::EulerMaruyama && self.dt > 0.1 * self.alpha {
            return Err(Error::InvalidParameter(format!(
                "euler_maruyama needs dt <= 0.1 alpha (dt = {}, alpha = {})",
                self.dt, self.alpha
            )));
        }
        validate_schedule(self.dt, self.t_end, self.n_paths, &self.snapshot_times)
    }
}

/// Integrates `ẋ = A∇H(x)` for time `tau`: exactly when the Hamiltonian
/// provides its flow, else with `min(cap, ⌈4τ⌉)` RK4 steps followed by a
/// projection back onto the starting level.
pub fn fast_flow(sys: &HamiltonianSystem, x: Vec2, tau: f64, cap: usize) -> Vec2 {
    if let Some(y) = sys.hamiltonian.exact_flow(x, tau) {
        return y;
    }
    let n = ((4.0 * tau).ceil() as usize).clamp(1, cap.max(1));
    let h = tau / n as f64;
    let f = |p: Vec2| sys.symplectic_gradient(p);
    let mut y = x;
    for _ in 0..n {
        let k1 = f(y);
        let k2 = f(y + k1 * (0.5 * h));
        let k3 = f(y + k2 * (0.5 * h));
        let k4 = f(y + k3 * h);
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    let level = sys.energy(x);
    for _ in 0..3 {
        let g = sys.grad_energy(y);
        let g2 = g.norm_sq();
        let r = sys.energy(y) - level;
        if g2 < 1e-20 || r == 0.0 {
            break;
        }
        y -= g * (r / g2);
    }
    y
}

fn step_h(sys: &HamiltonianSystem, cfg: &SdeConfig, x: Vec2, h: f64, noise: [Vec2; 2]) -> Result<Vec2> {
    let y = match cfg.scheme {
        Scheme::Splitting => {
            let amp = (sys.epsilon * h).sqrt();
            let x1 = x - sys.drift(x) * (0.5 * h) + noise[0] * amp;
            let x2 = fast_flow(sys, x1, h / cfg.alpha, cfg.fast_substeps_cap);
            x2 - sys.drift(x2) * (0.5 * h) + noise[1] * amp
        }
        Scheme::EulerMaruyama => {
            let xi = (noise[0] + noise[1]) * FRAC_1_SQRT_2;
            let v = sys.symplectic_gradient(x) * (1.0 / cfg.alpha) - sys.drift(x);
            x + v * h + xi * (2.0 * sys.epsilon * h).sqrt()
        }
    };
    let level = sys.energy(y);
    if !(level <= cfg.h_max) || !y.is_finite() {
        return Err(Error::TruncationBreach { level, h_max: cfg.h_max });
    }
    Ok(y)
}

/// One step of size `cfg.dt`. `noise` holds the standard normals of the two
/// half steps; Euler–Maruyama uses their normalized sum.
pub fn step(sys: &HamiltonianSystem, cfg: &SdeConfig, x: Vec2, noise: [Vec2; 2]) -> Result<Vec2> {
    step_h(sys, cfg, x, cfg.dt, noise)
}

/// Initial law of the 2D process.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    Point(Vec2),
    /// Nodes of a traced level curve with weights `dl` or `dl/|∇H|`.
    LevelSet { curve: LevelCurve, weights: Vec<f64> },
    /// Piecewise constant density on an `n × n` cell grid, row-major in `y`.
    Grid { domain: Rect, n: usize, weights: Vec<f64> },
}

impl InitialLaw {
    /// Uniform law on the level curve through `seed`; `liouville` selects the
    /// invariant measure `dl/|∇H|`, otherwise arc length.
    pub fn level_set(sys: &HamiltonianSystem, seed: Vec2, step: f64, liouville: bool) -> Result<Self> {
        let curve = trace_level_curve(sys, seed, step)?;
        let weights = curve
            .weights
            .iter()
            .zip(&curve.grad_norms)
            .map(|(w, g)| if liouville { w / g } else { *w })
            .collect();
        Ok(InitialLaw::LevelSet { curve, weights })
    }

    pub fn grid(domain: Rect, n: usize, density: impl Fn(Vec2) -> f64) -> Result<Self> {
        if n < 1 || !domain.is_valid() {
            return Err(Error::InvalidParameter("grid law needs n >= 1 and a valid domain".into()));
        }
        let (dx, dy) = (domain.width() / n as f64, domain.height() / n as f64);
        let weights: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k % n, k / n);
                density(Vec2::new(domain.x0 + (i as f64 + 0.5) * dx, domain.y0 + (j as f64 + 0.5) * dy)).max(0.0)
            })
            .collect();
        if !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::InvalidParameter("grid density has no mass".into()));
        }
        Ok(InitialLaw::Grid { domain, n, weights })
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self, InitialLaw::Point(_))
    }

    pub fn sample(&self, sys: &HamiltonianSystem, rng: &mut PathRng) -> Vec2 {
        match self {
            InitialLaw::Point(p) => *p,
            InitialLaw::LevelSet { curve, weights } => {
                let k = rng.choose(weights);
                // spread within the node's cell and pull back onto the level
                let n = curve.len();
                let u = rng.uniform() - 0.5;
                let nb = if u >= 0.0 { curve.points[(k + 1) % n] } else { curve.points[(k + n - 1) % n] };
                let mut p = curve.points[k] + (nb - curve.points[k]) * u.abs();
                for _ in 0..3 {
                    let g = sys.grad_energy(p);
                    p = p - g * ((sys.energy(p) - curve.level) / g.norm_sq());
                }
                p
            }
            InitialLaw::Grid { domain, n, weights } => {
                let k = rng.choose(weights);
                let (i, j) = (k % n, k / n);
                let (dx, dy) = (domain.width() / *n as f64, domain.height() / *n as f64);
                Vec2::new(domain.x0 + (i as f64 + rng.uniform()) * dx, domain.y0 + (j as f64 + rng.uniform()) * dy)
            }
        }
    }
}

/// Counts which edge paths take after visiting a vertex: a path is armed
/// once `|H − level| < delta_in` next to the vertex, and the edge is read
/// off when it next reaches `|H − level| ≥ delta_out`.
#[derive(Debug, Clone, Copy)]
pub struct CrossingObserver<'a> {
    pub graph: &'a ReebGraph,
    pub vertex: usize,
    pub delta_in: f64,
    pub delta_out: f64,
}

impl CrossingObserver<'_> {
    fn near_vertex(&self, sys: &HamiltonianSystem, x: Vec2) -> bool {
        match self.graph.project_point(sys, x) {
            Ok(GraphPoint::Vertex { vertex }) => vertex == self.vertex,
            Ok(GraphPoint::Edge { edge, .. }) => self.graph.edges[edge].lower == self.vertex || self.graph.edges[edge].upper == self.vertex,
            Err(_) => false,
        }
    }

    fn exit_edge(&self, sys: &HamiltonianSystem, x: Vec2) -> Option<usize> {
        match self.graph.project_point(sys, x) {
            Ok(GraphPoint::Edge { edge, .. }) => {
                let e = &self.graph.edges[edge];
                (e.lower == self.vertex || e.upper == self.vertex).then_some(edge)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ensemble {
    pub times: Vec<f64>,
    /// `states[p][k]` is path `p` at `times[k]`; killed paths stop early.
    pub states: Vec<Vec<Vec2>>,
    pub alive: Vec<bool>,
    pub death_times: Vec<Option<f64>>,
    pub breaches: usize,
    /// Set when the initial law is a point mass rather than a density.
    pub point_mass_start: bool,
    /// Exit counts per edge recorded by a [`CrossingObserver`].
    pub crossings: BTreeMap<usize, u64>,
}

impl Ensemble {
    pub fn breach_fraction(&self) -> f64 {
        self.breaches as f64 / self.states.len().max(1) as f64
    }
}

pub fn simulate_paths(sys: &HamiltonianSystem, cfg: &SdeConfig, initial: &InitialLaw) -> Result<Ensemble> {
    simulate_paths_observed(sys, cfg, initial, None)
}

/// Independent paths on per-path random streams, with an optional vertex
/// crossing observer evaluated after every step.
pub fn simulate_paths_observed(
    sys: &HamiltonianSystem,
    cfg: &SdeConfig,
    initial: &InitialLaw,
    observer: Option<&CrossingObserver<'_>>,
) -> Result<Ensemble> {
    let times = cfg.validate()?;
    if let Some(obs) = observer {
        obs.graph.vertex(obs.vertex)?;
        if !(obs.delta_in > 0.0 && obs.delta_out > obs.delta_in) {
            return Err(Error::InvalidParameter("observer needs 0 < delta_in < delta_out".into()));
        }
    }
    struct PathOut {
        states: Vec<Vec2>,
        death: Option<f64>,
        crossings: Vec<usize>,
        bad_start: Option<Vec2>,
    }
    let outs = par_map(cfg.n_paths, |path| {
        let mut rng = PathRng::new(cfg.seed, path as u64);
        let mut x = initial.sample(sys, &mut rng);
        let mut out = PathOut { states: Vec::with_capacity(times.len()), death: None, crossings: Vec::new(), bad_start: None };
        if !(sys.energy(x) <= cfg.h_max) {
            out.bad_start = Some(x);
            return out;
        }
        let level = observer.map(|o| o.graph.vertices[o.vertex].level);
        let mut armed = false;
        let mut t = 0.0;
        'outer: for &target in &times {
            while t < target - 1e-12 * cfg.dt {
                let h = cfg.dt.min(target - t);
                let noise = [Vec2::new(rng.normal(), rng.normal()), Vec2::new(rng.normal(), rng.normal())];
                match step_h(sys, cfg, x, h, noise) {
                    Ok(y) => x = y,
                    Err(_) => {
                        out.death = Some(t + h);
                        break 'outer;
                    }
                }
                t += h;
                if let (Some(obs), Some(level)) = (observer, level) {
                    let d = (sys.energy(x) - level).abs();
                    if !armed && d < obs.delta_in {
                        armed = obs.near_vertex(sys, x);
                    } else if armed && d >= obs.delta_out {
                        if let Some(e) = obs.exit_edge(sys, x) {
                            out.crossings.push(e);
                        }
                        armed = false;
                    }
                }
            }
            t = t.max(target);
            out.states.push(x);
        }
        out
    });
    if let Some(p) = outs.iter().find_map(|o| o.bad_start) {
        return Err(Error::InvalidParameter(format!("initial point ({}, {}) lies above h_max", p.x, p.y)));
    }
    let mut ens = Ensemble {
        times,
        states: Vec::with_capacity(cfg.n_paths),
        alive: Vec::with_capacity(cfg.n_paths),
        death_times: Vec::with_capacity(cfg.n_paths),
        breaches: 0,
        point_mass_start: initial.is_point_mass(),
        crossings: BTreeMap::new(),
    };
    for o in outs {
        ens.alive.push(o.death.is_none());
        ens.breaches += o.death.is_some() as usize;
        ens.death_times.push(o.death);
        ens.states.push(o.states);
        for e in o.crossings {
            *ens.crossings.entry(e).or_insert(0) += 1;
        }
    }
    Ok(ens)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectedEnsemble {
    pub times: Vec<f64>,
    /// Graph positions per path; killed paths are truncated at death.
    pub paths: Vec<Vec<GraphPoint>>,
    pub alive: Vec<bool>,
    /// Consecutive snapshots whose graph positions share no vertex.
    pub anomalies: usize,
}

fn touches(graph: &ReebGraph, p: GraphPoint, q: GraphPoint) -> bool {
    let ends = |x: GraphPoint| -> Vec<usize> {
        match x {
            GraphPoint::Edge { edge, .. } => vec![graph.edges[edge].lower, graph.edges[edge].upper],
            GraphPoint::Vertex { vertex } => vec![vertex],
        }
    };
    match (p, q) {
        (GraphPoint::Edge { edge: a, .. }, GraphPoint::Edge { edge: b, .. }) if a == b => true,
        _ => {
            let (a, b) = (ends(p), ends(q));
            a.iter().any(|v| b.contains(v))
        }
    }
}

/// Maps every snapshot through `π`. A jump between graph positions with no
/// common vertex cannot come from a continuous path sampled finely enough
/// and is counted as an anomaly.
pub fn project_trajectory(graph: &ReebGraph, sys: &HamiltonianSystem, ens: &Ensemble) -> ProjectedEnsemble {
    let results: Vec<(Vec<GraphPoint>, usize, bool)> = par_map(ens.states.len(), |p| {
        let mut out = Vec::with_capacity(ens.states[p].len());
        let mut anomalies = 0;
        for &x in &ens.states[p] {
            match graph.project_point(sys, x) {
                Ok(g) => {
                    if let Some(&prev) = out.last() {
                        if !touches(graph, prev, g) {
                            anomalies += 1;
                        }
                    }
                    out.push(g);
                }
                Err(_) => {
                    anomalies += 1;
                    return (out, anomalies, false);
                }
            }
        }
        (out, anomalies, ens.alive[p])
    });
    let mut proj = ProjectedEnsemble { times: ens.times.clone(), paths: Vec::new(), alive: Vec::new(), anomalies: 0 };
    for (path, a, alive) in results {
        proj.paths.push(path);
        proj.anomalies += a;
        proj.alive.push(alive);
    }
    proj
}
