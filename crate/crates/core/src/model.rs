//! Problem data for the fast-slow diffusion
//!
//! ```text
//! dY = (1/α) A∇H(Y) dt − e(Y) dt + √(2ε) dB
//! ```
//!
//! with a reference density `h` for the measure `μ = h dx`. The built-in
//! Hamiltonians carry analytic first and second derivatives; user systems are
//! accepted as callbacks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Rect, Sym2, Vec2};

/// Scalar energy with its derivatives.
pub trait Hamiltonian: Send + Sync {
    fn value(&self, p: Vec2) -> f64;
    fn gradient(&self, p: Vec2) -> Vec2;
    fn laplacian(&self, p: Vec2) -> f64;

    /// Defaults to central differences of the gradient.
    fn hessian(&self, p: Vec2) -> Sym2 {
        let d = 1e-5 * (1.0 + p.norm());
        let gxp = self.gradient(p + Vec2::new(d, 0.0));
        let gxm = self.gradient(p - Vec2::new(d, 0.0));
        let gyp = self.gradient(p + Vec2::new(0.0, d));
        let gym = self.gradient(p - Vec2::new(0.0, d));
        let xx = (gxp.x - gxm.x) / (2.0 * d);
        let yy = (gyp.y - gym.y) / (2.0 * d);
        let xy = 0.5 * ((gxp.y - gxm.y) + (gyp.x - gym.x)) / (2.0 * d);
        Sym2 { xx, xy, yy }
    }

    /// Exact time-`t` map of `ẋ = A∇H`, when known in closed form.
    fn exact_flow(&self, _p: Vec2, _t: f64) -> Option<Vec2> {
        None
    }
}

/// The shipped example Hamiltonians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Builtin {
    /// `|x|²/2`: one well, Γ is a half line.
    H1,
    /// Flat bottom: `0` on the unit disk, `(|x| − 1)²` outside. Only C¹.
    H1Plateau,
    /// Double well `x⁴/4 − x²/2 + y²/2`.
    H2,
    /// Four wells `x⁴/4 − x²/2 + y⁴/4 − y²/2`.
    H3,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [Builtin::H1, Builtin::H1Plateau, Builtin::H2, Builtin::H3];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::H1 => "H1",
            Builtin::H1Plateau => "H1_plateau",
            Builtin::H2 => "H2",
            Builtin::H3 => "H3",
        }
    }
}

impl fmt::Display for Builtin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h1" => Ok(Builtin::H1),
            "h1_plateau" | "h1plateau" | "h1-plateau" => Ok(Builtin::H1Plateau),
            "h2" => Ok(Builtin::H2),
            "h3" => Ok(Builtin::H3),
            _ => Err(Error::UnknownSystem(s.to_string())),
        }
    }
}

impl Hamiltonian for Builtin {
    fn value(&self, p: Vec2) -> f64 {
        let (x, y) = (p.x, p.y);
        match self {
            Builtin::H1 => 0.5 * (x * x + y * y),
            Builtin::H1Plateau => {
                let r = p.norm();
                if r <= 1.0 {
                    0.0
                } else {
                    (r - 1.0) * (r - 1.0)
                }
            }
            Builtin::H2 => 0.25 * x.powi(4) - 0.5 * x * x + 0.5 * y * y,
            Builtin::H3 => 0.25 * x.powi(4) - 0.5 * x * x + 0.25 * y.powi(4) - 0.5 * y * y,
        }
    }

    fn gradient(&self, p: Vec2) -> Vec2 {
        let (x, y) = (p.x, p.y);
        match self {
            Builtin::H1 => p,
            Builtin::H1Plateau => {
                let r = p.norm();
                if r <= 1.0 {
                    Vec2::ZERO
                } else {
                    p * (2.0 * (r - 1.0) / r)
                }
            }
            Builtin::H2 => Vec2::new(x * x * x - x, y),
            Builtin::H3 => Vec2::new(x * x * x - x, y * y * y - y),
        }
    }

    fn laplacian(&self, p: Vec2) -> f64 {
        let (x, y) = (p.x, p.y);
        match self {
            Builtin::H1 => 2.0,
            Builtin::H1Plateau => {
                let r = p.norm();
                if r <= 1.0 {
                    0.0
                } else {
                    2.0 + 2.0 * (r - 1.0) / r
                }
            }
            Builtin::H2 => 3.0 * x * x,
            Builtin::H3 => 3.0 * x * x + 3.0 * y * y - 2.0,
        }
    }

    fn hessian(&self, p: Vec2) -> Sym2 {
        let (x, y) = (p.x, p.y);
        match self {
            Builtin::H1 => Sym2 { xx: 1.0, xy: 0.0, yy: 1.0 },
            Builtin::H1Plateau => {
                let r = p.norm();
                if r <= 1.0 {
                    return Sym2 { xx: 0.0, xy: 0.0, yy: 0.0 };
                }
                // f(r) = (r-1)²: Hess = f'' r̂r̂ᵀ + (f'/r)(I − r̂r̂ᵀ)
                let (ux, uy) = (x / r, y / r);
                let radial = 2.0;
                let tangential = 2.0 * (r - 1.0) / r;
                Sym2 {
                    xx: radial * ux * ux + tangential * (1.0 - ux * ux),
                    xy: (radial - tangential) * ux * uy,
                    yy: radial * uy * uy + tangential * (1.0 - uy * uy),
                }
            }
            Builtin::H2 => Sym2 { xx: 3.0 * x * x - 1.0, xy: 0.0, yy: 1.0 },
            Builtin::H3 => Sym2 { xx: 3.0 * x * x - 1.0, xy: 0.0, yy: 3.0 * y * y - 1.0 },
        }
    }

    fn exact_flow(&self, p: Vec2, t: f64) -> Option<Vec2> {
        match self {
            // A∇H = (−y, x): rigid rotation at unit angular speed
            Builtin::H1 => {
                let (s, c) = t.sin_cos();
                Some(Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y))
            }
            _ => None,
        }
    }
}

pub type ScalarFn = Arc<dyn Fn(Vec2) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(Vec2) -> Vec2 + Send + Sync>;

/// User Hamiltonian given as the triple `(H, ∇H, ΔH)`.
#[derive(Clone)]
pub struct CallbackHamiltonian {
    pub value: ScalarFn,
    pub gradient: VectorFn,
    pub laplacian: ScalarFn,
}

impl Hamiltonian for CallbackHamiltonian {
    fn value(&self, p: Vec2) -> f64 {
        (self.value)(p)
    }
    fn gradient(&self, p: Vec2) -> Vec2 {
        (self.gradient)(p)
    }
    fn laplacian(&self, p: Vec2) -> f64 {
        (self.laplacian)(p)
    }
}

/// Friction field `e` together with its divergence.
#[derive(Clone)]
pub enum Drift {
    Zero,
    /// `e = k ∇H`; `k = 1` is the gradient friction, `k = −1` anti-friction.
    ScaledGradient(f64),
    /// `e = k x`, an expanding (`k > 0`) or contracting field.
    Linear(f64),
    Custom { value: VectorFn, divergence: ScalarFn },
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Zero => write!(f, "Zero"),
            Drift::ScaledGradient(k) => write!(f, "ScaledGradient({k})"),
            Drift::Linear(k) => write!(f, "Linear({k})"),
            Drift::Custom { .. } => write!(f, "Custom"),
        }
    }
}

/// Reference density `h`. Supplied analytically with gradient and Laplacian.
#[derive(Clone)]
pub enum Density {
    Lebesgue,
    /// `h = exp(−H/ε)`.
    Gibbs,
    Custom { value: ScalarFn, gradient: VectorFn, laplacian: ScalarFn },
}

impl fmt::Debug for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Density::Lebesgue => write!(f, "Lebesgue"),
            Density::Gibbs => write!(f, "Gibbs"),
            Density::Custom { .. } => write!(f, "Custom"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftSpec {
    Zero,
    GradH,
    Custom,
}

impl FromStr for DriftSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" | "none" => Ok(DriftSpec::Zero),
            "grad_h" | "gradh" | "gradient" => Ok(DriftSpec::GradH),
            "custom" => Ok(DriftSpec::Custom),
            _ => Err(Error::InvalidParameter(format!("unknown drift `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensitySpec {
    Lebesgue,
    Gibbs,
}

impl FromStr for DensitySpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lebesgue" | "uniform" => Ok(DensitySpec::Lebesgue),
            "gibbs" => Ok(DensitySpec::Gibbs),
            _ => Err(Error::InvalidParameter(format!("unknown density `{s}`"))),
        }
    }
}

/// A flat region `{H = level}` of positive area, declared rather than detected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub center: Vec2,
    pub radius: f64,
    pub level: f64,
}

impl Plateau {
    pub fn contains(&self, p: Vec2) -> bool {
        p.dist(self.center) <= self.radius
    }
}

/// The analytic problem. Immutable and cheap to clone.
#[derive(Clone)]
pub struct HamiltonianSystem {
    pub hamiltonian: Arc<dyn Hamiltonian>,
    pub drift: Drift,
    pub density: Density,
    pub epsilon: f64,
    pub label: String,
    pub plateaus: Vec<Plateau>,
    /// Set for systems that knowingly break the smoothness assumption.
    pub assumption_relaxed: bool,
}

impl fmt::Debug for HamiltonianSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianSystem")
            .field("label", &self.label)
            .field("drift", &self.drift)
            .field("density", &self.density)
            .field("epsilon", &self.epsilon)
            .field("plateaus", &self.plateaus)
            .finish()
    }
}

/// Builds one of the shipped systems.
pub fn make_builtin(name: Builtin, drift: DriftSpec, density: DensitySpec, epsilon: f64) -> Result<HamiltonianSystem> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let drift = match drift {
        DriftSpec::Zero => Drift::Zero,
        DriftSpec::GradH => Drift::ScaledGradient(1.0),
        DriftSpec::Custom => return Err(Error::MissingCallbacks("drift")),
    };
    let density = match density {
        DensitySpec::Lebesgue => Density::Lebesgue,
        DensitySpec::Gibbs => Density::Gibbs,
    };
    let plateaus = match name {
        Builtin::H1Plateau => vec![Plateau { center: Vec2::ZERO, radius: 1.0, level: 0.0 }],
        _ => Vec::new(),
    };
    Ok(HamiltonianSystem {
        hamiltonian: Arc::new(name),
        drift,
        density,
        epsilon,
        label: name.name().to_string(),
        plateaus,
        assumption_relaxed: name == Builtin::H1Plateau,
    })
}

impl HamiltonianSystem {
    /// A system from user callbacks.
    pub fn custom(label: impl Into<String>, hamiltonian: Arc<dyn Hamiltonian>, drift: Drift, density: Density, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            hamiltonian,
            drift,
            density,
            epsilon,
            label: label.into(),
            plateaus: Vec::new(),
            assumption_relaxed: false,
        })
    }

    pub fn with_drift(mut self, drift: Drift) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_density(mut self, density: Density) -> Self {
        self.density = density;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_plateau(mut self, plateau: Plateau) -> Self {
        self.plateaus.push(plateau);
        self
    }

    #[inline]
    pub fn energy(&self, p: Vec2) -> f64 {
        self.hamiltonian.value(p)
    }

    #[inline]
    pub fn grad_energy(&self, p: Vec2) -> Vec2 {
        self.hamiltonian.gradient(p)
    }

    #[inline]
    pub fn laplacian_energy(&self, p: Vec2) -> f64 {
        self.hamiltonian.laplacian(p)
    }

    #[inline]
    pub fn hessian_energy(&self, p: Vec2) -> Sym2 {
        self.hamiltonian.hessian(p)
    }

    /// Symplectic gradient `A∇H = (−∂₂H, ∂₁H)`.
    #[inline]
    pub fn symplectic_gradient(&self, p: Vec2) -> Vec2 {
        self.grad_energy(p).perp()
    }

    pub fn drift(&self, p: Vec2) -> Vec2 {
        match &self.drift {
            Drift::Zero => Vec2::ZERO,
            Drift::ScaledGradient(k) => self.grad_energy(p) * *k,
            Drift::Linear(k) => p * *k,
            Drift::Custom { value, .. } => value(p),
        }
    }

    pub fn drift_divergence(&self, p: Vec2) -> f64 {
        match &self.drift {
            Drift::Zero => 0.0,
            Drift::ScaledGradient(k) => k * self.laplacian_energy(p),
            Drift::Linear(k) => 2.0 * k,
            Drift::Custom { divergence, .. } => divergence(p),
        }
    }

    pub fn density(&self, p: Vec2) -> f64 {
        match &self.density {
            Density::Lebesgue => 1.0,
            Density::Gibbs => (-self.energy(p) / self.epsilon).exp(),
            Density::Custom { value, .. } => value(p),
        }
    }

    pub fn density_gradient(&self, p: Vec2) -> Vec2 {
        match &self.density {
            Density::Lebesgue => Vec2::ZERO,
            Density::Gibbs => self.grad_energy(p) * (-self.density(p) / self.epsilon),
            Density::Custom { gradient, .. } => gradient(p),
        }
    }

    /// `∇h / h`, computed without forming `h` where possible.
    pub fn log_density_gradient(&self, p: Vec2) -> Vec2 {
        match &self.density {
            Density::Lebesgue => Vec2::ZERO,
            Density::Gibbs => self.grad_energy(p) * (-1.0 / self.epsilon),
            Density::Custom { value, gradient, .. } => gradient(p) * (1.0 / value(p)),
        }
    }

    /// `Δh / h`.
    pub fn relative_density_laplacian(&self, p: Vec2) -> f64 {
        match &self.density {
            Density::Lebesgue => 0.0,
            Density::Gibbs => {
                let g = self.grad_energy(p);
                let eps = self.epsilon;
                g.norm_sq() / (eps * eps) - self.laplacian_energy(p) / eps
            }
            Density::Custom { value, laplacian, .. } => laplacian(p) / value(p),
        }
    }

    /// `F = e + (ε/h)∇h`.
    pub fn field_f(&self, p: Vec2) -> Vec2 {
        match &self.density {
            Density::Lebesgue => self.drift(p),
            // (ε/h)∇h = −∇H exactly
            Density::Gibbs => self.drift(p) - self.grad_energy(p),
            Density::Custom { .. } => self.drift(p) + self.log_density_gradient(p) * self.epsilon,
        }
    }

    /// `∇·(hF) / h = ∇·e + (∇h/h)·e + ε Δh/h`.
    pub fn h_divergence_f(&self, p: Vec2) -> f64 {
        match &self.density {
            Density::Lebesgue => self.drift_divergence(p),
            Density::Gibbs => {
                // grouped so that e = ∇H cancels term by term
                let g = self.grad_energy(p);
                let e = self.drift(p);
                (self.drift_divergence(p) - self.laplacian_energy(p)) + (g.norm_sq() - g.dot(e)) / self.epsilon
            }
            Density::Custom { .. } => {
                self.drift_divergence(p) + self.log_density_gradient(p).dot(self.drift(p)) + self.epsilon * self.relative_density_laplacian(p)
            }
        }
    }

    /// `∇·(hF)`.
    pub fn divergence_hf(&self, p: Vec2) -> f64 {
        self.density(p) * self.h_divergence_f(p)
    }

    /// `∇h · A∇H`, the only surviving part of `∇·(h A∇H)`.
    pub fn density_transport(&self, p: Vec2) -> f64 {
        match &self.density {
            Density::Lebesgue => 0.0,
            _ => self.density_gradient(p).dot(self.symplectic_gradient(p)),
        }
    }

    pub fn in_plateau(&self, p: Vec2) -> Option<&Plateau> {
        self.plateaus.iter().find(|pl| pl.contains(p))
    }
}

/// Per-condition verdicts of [`check_assumptions`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub n_grid: usize,
    /// `max ∇·(hF)/h` over the grid; must be `≤ 0` up to roundoff.
    pub max_h_divergence: f64,
    /// Largest magnitude of the individual terms entering `∇·(hF)/h`.
    pub h_divergence_scale: f64,
    pub max_abs_h_divergence: f64,
    pub max_abs_f: f64,
    pub min_density: f64,
    pub min_boundary_energy: f64,
    pub h_max: f64,
    pub max_gradient_fd_error: f64,
    pub supermedian: bool,
    pub bounded: bool,
    pub positive_density: bool,
    pub compact_levels: bool,
    pub derivatives_consistent: bool,
    pub assumption_relaxed: bool,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.supermedian && self.bounded && self.positive_density && self.compact_levels && self.derivatives_consistent
    }
}

/// Spot-checks the standing assumptions on an `n_grid × n_grid` grid.
pub fn check_assumptions(sys: &HamiltonianSystem, domain: Rect, n_grid: usize, h_max: f64) -> Result<AssumptionReport> {
    if n_grid < 2 {
        return Err(Error::InvalidParameter(format!("n_grid must be >= 2, got {n_grid}")));
    }
    if !domain.is_valid() {
        return Err(Error::InvalidParameter("degenerate domain".into()));
    }
    let mut max_div = f64::NEG_INFINITY;
    let mut div_scale: f64 = 0.0;
    let mut max_abs_div: f64 = 0.0;
    let mut max_f: f64 = 0.0;
    let mut min_h = f64::INFINITY;
    let mut fd_err: f64 = 0.0;
    let mut supermedian = true;
    for i in 0..n_grid {
        for j in 0..n_grid {
            let p = domain.grid_node(n_grid, i, j);
            if sys.energy(p) > h_max {
                continue;
            }
            let d = sys.h_divergence_f(p);
            let scale = sys.drift_divergence(p).abs()
                + (sys.log_density_gradient(p).dot(sys.drift(p))).abs()
                + sys.epsilon * sys.relative_density_laplacian(p).abs();
            if d > 1e-10 * (1.0 + scale) {
                supermedian = false;
            }
            max_div = max_div.max(d);
            div_scale = div_scale.max(scale);
            max_abs_div = max_abs_div.max(d.abs());
            max_f = max_f.max(sys.field_f(p).norm());
            min_h = min_h.min(sys.density(p));
            let near_plateau = sys.plateaus.iter().any(|pl| p.dist(pl.center) <= pl.radius + 1e-3);
            if !near_plateau {
                fd_err = fd_err.max(gradient_fd_error(sys, p, 1e-4));
            }
        }
    }
    let min_boundary = domain
        .boundary_points(4 * n_grid)
        .map(|p| sys.energy(p))
        .fold(f64::INFINITY, f64::min);
    let finite = max_f.is_finite() && max_abs_div.is_finite();
    Ok(AssumptionReport {
        n_grid,
        max_h_divergence: max_div,
        h_divergence_scale: div_scale,
        max_abs_h_divergence: max_abs_div,
        max_abs_f: max_f,
        min_density: min_h,
        min_boundary_energy: min_boundary,
        h_max,
        max_gradient_fd_error: fd_err,
        supermedian,
        bounded: finite,
        positive_density: min_h > 0.0,
        compact_levels: min_boundary > h_max,
        derivatives_consistent: fd_err <= 1e-5,
        assumption_relaxed: sys.assumption_relaxed,
    })
}

/// Max-norm gap between the analytic gradient and central differences of `H`.
pub fn gradient_fd_error(sys: &HamiltonianSystem, p: Vec2, delta: f64) -> f64 {
    let dx = Vec2::new(delta, 0.0);
    let dy = Vec2::new(0.0, delta);
    let fd = Vec2::new(
        (sys.energy(p + dx) - sys.energy(p - dx)) / (2.0 * delta),
        (sys.energy(p + dy) - sys.energy(p - dy)) / (2.0 * delta),
    );
    let g = sys.grad_energy(p);
    (fd.x - g.x).abs().max((fd.y - g.y).abs())
}
