//! Brute-force optimal transport between small discrete laws on `Γ`.
//!
//! Enumerates every basis of the transportation polytope (spanning trees of
//! the bipartite supply/demand graph), solves each tree for its flows and
//! keeps the cheapest feasible one. Exponential, so only for a few atoms.

#![allow(dead_code)]

use hamavg::harness::{EmpiricalMarginal, Source};
use hamavg::reeb::{GraphPoint, ReebGraph};
use hamavg::rng::PathRng;

pub fn marginal(atoms: Vec<(GraphPoint, f64)>) -> EmpiricalMarginal {
    EmpiricalMarginal { atoms, t: 0.0, source: Source::Graph, n_effective: 0, deficit: 0.0 }
}

/// Flows on the tree `cells` (pairs `(i, j)`), or `None` if the cells do
/// not form a spanning tree on the `k + l` nodes.
fn tree_flows(cells: &[(usize, usize)], supply: &[f64], demand: &[f64]) -> Option<Vec<f64>> {
    let k = supply.len();
    let mut rest: Vec<f64> = supply.iter().chain(demand).copied().collect();
    let mut used = vec![false; cells.len()];
    let mut flows = vec![0.0; cells.len()];
    for _ in 0..cells.len() {
        let mut degree = vec![0usize; rest.len()];
        for (c, &(i, j)) in cells.iter().enumerate() {
            if !used[c] {
                degree[i] += 1;
                degree[k + j] += 1;
            }
        }
        let (c, leaf) = cells.iter().enumerate().filter(|(c, _)| !used[*c]).find_map(|(c, &(i, j))| {
            if degree[i] == 1 {
                Some((c, i))
            } else if degree[k + j] == 1 {
                Some((c, k + j))
            } else {
                None
            }
        })?;
        let (i, j) = cells[c];
        let other = if leaf == i { k + j } else { i };
        flows[c] = rest[leaf];
        rest[other] -= rest[leaf];
        rest[leaf] = 0.0;
        used[c] = true;
    }
    // a spanning tree balances every node
    rest.iter().all(|r| r.abs() < 1e-12).then_some(flows)
}

pub fn brute_force_w1(p: &EmpiricalMarginal, q: &EmpiricalMarginal, graph: &ReebGraph) -> f64 {
    let (k, l) = (p.atoms.len(), q.atoms.len());
    let supply: Vec<f64> = p.atoms.iter().map(|a| a.1).collect();
    let demand: Vec<f64> = q.atoms.iter().map(|a| a.1).collect();
    let all: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..l).map(move |j| (i, j))).collect();
    let r = k + l - 1;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << all.len()) {
        if mask.count_ones() as usize != r {
            continue;
        }
        let cells: Vec<(usize, usize)> = (0..all.len()).filter(|b| mask >> b & 1 == 1).map(|b| all[b]).collect();
        let Some(flows) = tree_flows(&cells, &supply, &demand) else { continue };
        if flows.iter().any(|&f| f < -1e-14) {
            continue;
        }
        let cost: f64 = cells.iter().zip(&flows).map(|(&(i, j), f)| f * graph.distance(p.atoms[i].0, q.atoms[j].0)).sum();
        best = best.min(cost);
    }
    best
}

/// A random point of `graph`: a vertex one time in five, otherwise a
/// uniform level on a uniform edge.
pub fn random_point(graph: &ReebGraph, rng: &mut PathRng) -> GraphPoint {
    if rng.uniform() < 0.2 {
        let v = rng.choose(&vec![1.0; graph.vertices.len()]);
        GraphPoint::Vertex { vertex: v }
    } else {
        let e = &graph.edges[rng.choose(&vec![1.0; graph.edges.len()])];
        GraphPoint::Edge { edge: e.id, m: e.lo + rng.uniform() * e.span() }
    }
}

/// Random law with `n` atoms and total mass one.
pub fn random_law(graph: &ReebGraph, n: usize, rng: &mut PathRng) -> EmpiricalMarginal {
    let pts: Vec<GraphPoint> = (0..n).map(|_| random_point(graph, rng)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let total: f64 = w.iter().sum();
    marginal(pts.into_iter().zip(w.into_iter().map(|x| x / total)).collect())
}
