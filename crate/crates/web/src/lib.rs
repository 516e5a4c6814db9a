//! Browser bindings for the hamavg demo page.
//!
//! Each exported function takes plain numbers and strings and returns a JSON
//! string, so the page needs no generated types. The work is done by the
//! `*_json` functions, which also run natively under `cargo test`.

use hamavg::graph_diffusion::build_tables;
use hamavg::levelset::DEFAULT_STEP;
use hamavg::model::{make_builtin, Builtin, DensitySpec, DriftSpec, HamiltonianSystem};
use hamavg::reeb::{build_reeb_graph, GraphPoint, ReebGraph};
use hamavg::sde::{project_trajectory, simulate_paths, InitialLaw, SdeConfig};
use hamavg::{Rect, Vec2};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const HALF_WIDTH: f64 = 3.0;
const RESOLUTION: usize = 160;
const HEAT_GRID: usize = 120;
const MAX_PATHS: usize = 5000;

type Res<T> = Result<T, String>;

fn system(name: &str, drift: &str, density: &str, epsilon: f64) -> Res<HamiltonianSystem> {
    let b: Builtin = name.parse().map_err(|e: hamavg::Error| e.to_string())?;
    let d: DriftSpec = drift.parse().map_err(|e: hamavg::Error| e.to_string())?;
    let rho: DensitySpec = density.parse().map_err(|e: hamavg::Error| e.to_string())?;
    make_builtin(b, d, rho, epsilon).map_err(|e| e.to_string())
}

fn graph(sys: &HamiltonianSystem, h_max: f64) -> Res<ReebGraph> {
    build_reeb_graph(sys, Rect::square(HALF_WIDTH), h_max, RESOLUTION).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct VertexView {
    id: usize,
    level: f64,
    kind: String,
    /// Exit probabilities per incident edge at interior vertices.
    split: Vec<(usize, f64)>,
}

#[derive(Serialize)]
struct EdgeView {
    id: usize,
    lo: f64,
    hi: f64,
    lower: usize,
    upper: usize,
}

#[derive(Serialize)]
struct GraphView {
    vertices: Vec<VertexView>,
    edges: Vec<EdgeView>,
}

pub fn orbit_graph_json(name: &str, h_max: f64) -> Res<String> {
    let sys = system(name, "zero", "lebesgue", 1.0)?;
    let g = graph(&sys, h_max)?;
    let view = GraphView {
        vertices: g
            .vertices
            .iter()
            .map(|v| VertexView {
                id: v.id,
                level: v.level,
                kind: format!("{:?}", v.kind),
                split: if v.degree() > 1 { v.walsh_probabilities().into_iter().collect() } else { Vec::new() },
            })
            .collect(),
        edges: g.edges.iter().map(|e| EdgeView { id: e.id, lo: e.lo, hi: e.hi, lower: e.lower, upper: e.upper }).collect(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CoefficientView {
    edge: usize,
    m: Vec<f64>,
    period: Vec<f64>,
    s2: Vec<f64>,
    b0: Vec<f64>,
    b1: Vec<f64>,
}

pub fn coefficients_json(name: &str, drift: &str, density: &str, epsilon: f64, h_max: f64) -> Res<String> {
    let sys = system(name, drift, density, epsilon)?;
    let g = graph(&sys, h_max)?;
    let tables = build_tables(&g, &sys, 24, DEFAULT_STEP).map_err(|e| e.to_string())?;
    let views: Vec<CoefficientView> = tables
        .iter()
        .map(|t| CoefficientView {
            edge: t.edge_id,
            m: t.samples.iter().map(|s| s.m).collect(),
            period: t.samples.iter().map(|s| s.period).collect(),
            s2: t.samples.iter().map(|s| s.s2).collect(),
            b0: t.samples.iter().map(|s| s.b0).collect(),
            b1: t.samples.iter().map(|s| s.b1).collect(),
        })
        .collect();
    serde_json::to_string(&views).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SimulationView {
    half_width: f64,
    /// `H` on a `grid × grid` lattice, row by row from the bottom.
    grid: usize,
    energy: Vec<f64>,
    /// Final positions `[x, y, edge]`, with edge −1 at vertices.
    points: Vec<[f64; 3]>,
    killed: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_json(
    name: &str,
    drift: &str,
    density: &str,
    epsilon: f64,
    alpha: f64,
    t_end: f64,
    n_paths: usize,
    seed: u64,
) -> Res<String> {
    if n_paths > MAX_PATHS {
        return Err(format!("at most {MAX_PATHS} paths in the browser"));
    }
    let sys = system(name, drift, density, epsilon)?;
    let h_max = 3.0;
    let g = graph(&sys, h_max)?;
    let mut cfg = SdeConfig::new(alpha, (t_end / 200.0).min(1e-2), t_end, n_paths, seed);
    cfg.h_max = h_max;
    let start = Vec2::new(0.3 * HALF_WIDTH, 0.1 * HALF_WIDTH);
    let ens = simulate_paths(&sys, &cfg, &InitialLaw::Point(start)).map_err(|e| e.to_string())?;
    let proj = project_trajectory(&g, &sys, &ens);
    let points = ens
        .states
        .iter()
        .zip(&proj.paths)
        .zip(&ens.alive)
        .filter(|(_, alive)| **alive)
        .filter_map(|((s, p), _)| {
            let x = s.last()?;
            let edge = match p.last() {
                Some(GraphPoint::Edge { edge, .. }) => *edge as f64,
                _ => -1.0,
            };
            Some([x.x, x.y, edge])
        })
        .collect();
    let dom = Rect::square(HALF_WIDTH);
    let energy = (0..HEAT_GRID)
        .flat_map(|j| (0..HEAT_GRID).map(move |i| (i, j)))
        .map(|(i, j)| sys.energy(dom.grid_node(HEAT_GRID, i, j)))
        .collect();
    let killed = ens.alive.iter().filter(|a| !**a).count();
    let view = SimulationView { half_width: HALF_WIDTH, grid: HEAT_GRID, energy, points, killed };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// Vertices and edges of the orbit graph of a built-in Hamiltonian.
#[wasm_bindgen]
pub fn orbit_graph(name: &str, h_max: f64) -> Result<String, JsValue> {
    orbit_graph_json(name, h_max).map_err(|e| JsValue::from_str(&e))
}

/// Averaged coefficients `T, S², B⁰, B¹` along every edge.
#[wasm_bindgen]
pub fn coefficients(name: &str, drift: &str, density: &str, epsilon: f64, h_max: f64) -> Result<String, JsValue> {
    coefficients_json(name, drift, density, epsilon, h_max).map_err(|e| JsValue::from_str(&e))
}

/// Endpoints of planar sample paths, tagged with the edge they project to.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    name: &str,
    drift: &str,
    density: &str,
    epsilon: f64,
    alpha: f64,
    t_end: f64,
    n_paths: usize,
    seed: u64,
) -> Result<String, JsValue> {
    simulate_json(name, drift, density, epsilon, alpha, t_end, n_paths, seed).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_view_of_double_well() {
        let v: serde_json::Value = serde_json::from_str(&orbit_graph_json("H2", 3.0).unwrap()).unwrap();
        assert_eq!(v["edges"].as_array().unwrap().len(), 3);
        let saddle = v["vertices"].as_array().unwrap().iter().find(|x| x["kind"] == "Saddle").unwrap();
        let total: f64 = saddle["split"].as_array().unwrap().iter().map(|p| p[1].as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coefficient_view_of_single_well() {
        let v: serde_json::Value = serde_json::from_str(&coefficients_json("H1", "zero", "lebesgue", 0.5, 4.0).unwrap()).unwrap();
        let e = &v[0];
        for (m, t) in e["m"].as_array().unwrap().iter().zip(e["period"].as_array().unwrap()) {
            if m.as_f64().unwrap() > 0.05 {
                assert!((t.as_f64().unwrap() - 2.0 * std::f64::consts::PI).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn simulation_view_and_limits() {
        let v: serde_json::Value =
            serde_json::from_str(&simulate_json("H2", "grad_h", "gibbs", 0.25, 0.1, 0.2, 50, 1).unwrap()).unwrap();
        assert_eq!(v["energy"].as_array().unwrap().len(), HEAT_GRID * HEAT_GRID);
        let n = v["points"].as_array().unwrap().len() + v["killed"].as_u64().unwrap() as usize;
        assert_eq!(n, 50);
        assert!(simulate_json("H2", "grad_h", "gibbs", 0.25, 0.1, 0.2, MAX_PATHS + 1, 1).is_err());
        assert!(orbit_graph_json("H9", 3.0).is_err());
    }
}
