use thiserror::Error;

use crate::geom::Vec2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown built-in system `{0}`")]
    UnknownSystem(String),

    #[error("custom {0} requested without callbacks")]
    MissingCallbacks(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("seed ({:.6}, {:.6}) is (numerically) a critical point: |grad H| = {grad_norm:e}", point.x, point.y)]
    CriticalSeed { point: Vec2, grad_norm: f64 },

    #[error("level curve at m = {level} did not close after {steps} steps")]
    NoClosure { level: f64, steps: usize },

    #[error("window [{lo}, {hi}] straddles a critical value or leaves the edge interval [{edge_lo}, {edge_hi}]")]
    EdgeStraddle { lo: f64, hi: f64, edge_lo: f64, edge_hi: f64 },

    #[error("degenerate critical point at ({:.6}, {:.6}), det Hess = {det:e}", point.x, point.y)]
    DegenerateCritical { point: Vec2, det: f64 },

    #[error("orbit graph is not resolved at resolution {resolution}: {detail}")]
    ResolutionTooCoarse { resolution: usize, detail: String },

    #[error("point ({:.6}, {:.6}) is outside the truncated domain", point.x, point.y)]
    OutOfDomain { point: Vec2 },

    #[error("boundary classification inconclusive at vertex {vertex}: {detail}")]
    InconclusiveClassification { vertex: usize, detail: String },

    #[error("path left {{H <= {h_max}}} at level {level}")]
    TruncationBreach { level: f64, h_max: f64 },

    #[error("no snapshot at t = {0}")]
    MissingSnapshot(f64),

    #[error("marginal weights differ: {0} vs {1}")]
    WeightMismatch(f64, f64),

    #[error("graph has no edge {0}")]
    UnknownEdge(usize),

    #[error("graph has no vertex {0}")]
    UnknownVertex(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
