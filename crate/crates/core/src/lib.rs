//! Stochastic averaging for planar Hamiltonian diffusions.
//!
//! Builds the orbit graph `Γ` of a Hamiltonian, averages the coefficients of
//! the fast-slow SDE over level curves, simulates both the planar process and
//! the limiting diffusion on `Γ`, and checks the identities that connect them.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forms;
pub mod geom;
pub mod graph_diffusion;
pub mod harness;
pub mod levelset;
pub mod model;
pub mod numeric;
pub mod reeb;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
pub use geom::{Rect, Vec2};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
