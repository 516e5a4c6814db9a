//! Level curves of `H` and the contour integrals defined on them.
//!
//! A curve is traced with a predictor along the unit symplectic gradient and a
//! Newton corrector back onto `{H = m}`. Nodes are placed at equal steps of a
//! smooth curve parameter `σ` with `dσ/dl = w(x)`, where
//!
//! ```text
//! w(x) = sqrt(1/step² + (‖Hess H‖ / (0.2 |∇H|))²)
//! ```
//!
//! so the spacing never exceeds `step` and shrinks where the curve bends or
//! approaches a saddle. Because the nodes are equispaced in a periodic smooth
//! parameter, the trapezoid rule over them converges faster than any power of
//! the step and node placement varies smoothly with the level. The latter
//! matters: every identity checked downstream differentiates contour
//! integrals with respect to `m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::model::HamiltonianSystem;

/// Nodes with `|∇H|` below this are treated as critical.
pub const GRAD_FLOOR: f64 = 1e-8;
/// Relative residual `|H − m| / max(1, |m|)` accepted after correction.
pub const TRACE_TOL: f64 = 1e-10;
/// Default arc-length step for tracing.
pub const DEFAULT_STEP: f64 = 0.01;

const MIN_NODES: usize = 48;
const MAX_STEPS: usize = 2_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelCurve {
    pub level: f64,
    /// Closed polyline, first point not repeated at the end.
    pub points: Vec<Vec2>,
    /// Arc-length element `dl` carried by each node.
    pub weights: Vec<f64>,
    /// Chord length from node `k` to node `k + 1` (cyclically).
    pub segment_lengths: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub closed: bool,
    /// Distance between the end of the last step and the first node.
    pub closure_gap: f64,
    pub step: f64,
}

impl LevelCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Total length `∮ dl`.
    pub fn length(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Period `T = ∮ dl / |∇H|`.
    pub fn period(&self) -> f64 {
        self.weights.iter().zip(&self.grad_norms).map(|(w, g)| w / g).sum()
    }

    /// Checks the stored invariants against `sys`.
    pub fn validate(&self, sys: &HamiltonianSystem) -> bool {
        let tol = TRACE_TOL * self.level.abs().max(1.0);
        self.closed
            && self.closure_gap <= 2.0 * self.step
            && self.grad_norms.iter().all(|&g| g > GRAD_FLOOR)
            && self.points.iter().all(|&p| (sys.energy(p) - self.level).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weight {
    /// `∮ f dl`
    Dl,
    /// `∮ f dl / |∇H|`
    DlOverGrad,
}

/// Composite quadrature of `∮ f dl` or `∮ f dl/|∇H|` over the traced nodes.
pub fn contour_integral(curve: &LevelCurve, integrand: impl Fn(Vec2) -> f64, weight: Weight) -> f64 {
    curve
        .points
        .iter()
        .zip(curve.weights.iter().zip(&curve.grad_norms))
        .map(|(&p, (&w, &g))| {
            let f = integrand(p);
            match weight {
                Weight::Dl => f * w,
                Weight::DlOverGrad => f * w / g,
            }
        })
        .sum()
}

struct Tracer<'a> {
    sys: &'a HamiltonianSystem,
    level: f64,
    inv_step_sq: f64,
}

impl Tracer<'_> {
    /// Node density per unit length.
    fn density(&self, p: Vec2, grad_norm: f64) -> f64 {
        let curv = self.sys.hessian_energy(p).frobenius() / (0.2 * grad_norm);
        (self.inv_step_sq + curv * curv).sqrt()
    }

    fn velocity(&self, p: Vec2) -> Vec2 {
        let g = self.sys.grad_energy(p);
        let n = g.norm();
        g.perp() * (1.0 / (n * self.density(p, n)))
    }

    fn correct(&self, mut p: Vec2) -> Vec2 {
        let tol = 0.01 * TRACE_TOL * self.level.abs().max(1.0);
        for _ in 0..4 {
            let r = self.sys.energy(p) - self.level;
            if r.abs() <= tol {
                break;
            }
            let g = self.sys.grad_energy(p);
            let n2 = g.norm_sq();
            if n2 <= GRAD_FLOOR * GRAD_FLOOR {
                break;
            }
            p -= g * (r / n2);
        }
        p
    }

    fn advance(&self, p: Vec2, h: f64) -> Vec2 {
        let k1 = self.velocity(p);
        let k2 = self.velocity(p + k1 * (0.5 * h));
        let k3 = self.velocity(p + k2 * (0.5 * h));
        let k4 = self.velocity(p + k3 * h);
        self.correct(p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
    }
}

fn check_node(sys: &HamiltonianSystem, p: Vec2, level: f64, steps: usize) -> Result<()> {
    if !p.is_finite() || p.norm() > 1e8 || sys.grad_energy(p).norm() <= GRAD_FLOOR {
        return Err(Error::NoClosure { level, steps });
    }
    Ok(())
}

/// Traces the connected component of `{H = H(seed)}` through `seed`.
///
/// The curve runs in the direction of `A∇H` (counterclockwise around minima).
pub fn trace_level_curve(sys: &HamiltonianSystem, seed: Vec2, step: f64) -> Result<LevelCurve> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!("trace step must be positive, got {step}")));
    }
    let g0 = sys.grad_energy(seed);
    if g0.norm() <= GRAD_FLOOR {
        return Err(Error::CriticalSeed { point: seed, grad_norm: g0.norm() });
    }
    let level = sys.energy(seed);
    let tracer = Tracer { sys, level, inv_step_sq: 1.0 / (step * step) };
    let x0 = tracer.correct(seed);
    let tangent = g0.perp() * (1.0 / g0.norm());
    let local = 1.0 / tracer.density(x0, sys.grad_energy(x0).norm());

    // First pass: unit σ-steps until the curve crosses the normal line at x0
    // from behind; the crossing pins down the total parameter length.
    let mut x = x0;
    let mut k = 0usize;
    let mut farthest: f64 = 0.0;
    let total = loop {
        let next = tracer.advance(x, 1.0);
        k += 1;
        if k > MAX_STEPS {
            return Err(Error::NoClosure { level, steps: k });
        }
        check_node(sys, next, level, k)?;
        let before = (x - x0).dot(tangent);
        let after = (next - x0).dot(tangent);
        let dist = next.dist(x0);
        farthest = farthest.max(dist);
        if k >= 3 && before < 0.0 && after >= 0.0 && dist < 4.0 * local && farthest > 2.0 * dist {
            let frac = crossing_fraction(&tracer, x, x0, tangent, before, after);
            break (k - 1) as f64 + frac;
        }
        x = next;
    };

    // Second pass: N equal σ-steps.
    let n = (total.ceil() as usize).max(MIN_NODES);
    let h = total / n as f64;
    let mut points = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut grad_norms = Vec::with_capacity(n);
    let mut x = x0;
    for i in 0..n {
        let gn = sys.grad_energy(x).norm();
        if gn <= GRAD_FLOOR {
            return Err(Error::NoClosure { level, steps: i });
        }
        points.push(x);
        grad_norms.push(gn);
        weights.push(h / tracer.density(x, gn));
        x = tracer.advance(x, h);
        check_node(sys, x, level, i)?;
    }
    let closure_gap = x.dist(x0);
    let segment_lengths = (0..n).map(|i| points[i].dist(points[(i + 1) % n])).collect();
    Ok(LevelCurve {
        level,
        points,
        weights,
        segment_lengths,
        grad_norms,
        closed: closure_gap <= 2.0 * step,
        closure_gap,
        step,
    })
}

/// Fraction `s ∈ (0, 1]` of a σ-step from `x` that lands on the normal line at `x0`.
fn crossing_fraction(tracer: &Tracer<'_>, x: Vec2, x0: Vec2, tangent: Vec2, g_lo: f64, g_hi: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    let (mut f_lo, mut f_hi) = (g_lo, g_hi);
    let mut s = 1.0;
    // Illinois variant of regula falsi
    let mut side = 0i8;
    for _ in 0..60 {
        s = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        let f = (tracer.advance(x, s) - x0).dot(tangent);
        if f.abs() < 1e-15 || (hi - lo) < 1e-15 {
            break;
        }
        if (f < 0.0) == (f_lo < 0.0) {
            lo = s;
            f_lo = f;
            if side == -1 {
                f_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = s;
            f_hi = f;
            if side == 1 {
                f_lo *= 0.5;
            }
            side = 1;
        }
    }
    s
}

/// Moves `x` along `∇H/|∇H|²` until `H = target`.
///
/// Along this flow `dH/dt = 1`, so connected components of a band of levels
/// are preserved as long as no critical point is met.
pub fn flow_to_level(sys: &HamiltonianSystem, x: Vec2, target: f64) -> Result<Vec2> {
    const MAX_DISPLACEMENT: f64 = 0.02;
    let field = |p: Vec2| -> Vec2 {
        let g = sys.grad_energy(p);
        g * (1.0 / g.norm_sq())
    };
    let mut p = x;
    for _ in 0..200_000 {
        let m = sys.energy(p);
        let remaining = target - m;
        if remaining.abs() <= 0.01 * TRACE_TOL * target.abs().max(1.0) {
            return Ok(p);
        }
        let g = sys.grad_energy(p).norm();
        if g <= GRAD_FLOOR {
            return Err(Error::CriticalSeed { point: p, grad_norm: g });
        }
        let dm = remaining.signum() * remaining.abs().min(MAX_DISPLACEMENT * g);
        let k1 = field(p);
        let k2 = field(p + k1 * (0.5 * dm));
        let k3 = field(p + k2 * (0.5 * dm));
        let k4 = field(p + k3 * dm);
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dm / 6.0);
        if dm == remaining {
            // final Newton polish onto the target level
            for _ in 0..4 {
                let r = sys.energy(p) - target;
                let gr = sys.grad_energy(p);
                if gr.norm_sq() <= GRAD_FLOOR * GRAD_FLOOR {
                    break;
                }
                p -= gr * (r / gr.norm_sq());
            }
        }
        if !p.is_finite() {
            break;
        }
    }
    Err(Error::NoClosure { level: target, steps: 200_000 })
}

/// Averaged coefficients on one level curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSample {
    pub m: f64,
    /// `T = ∮ dl/|∇H|`
    pub period: f64,
    /// `S² = (1/T) ∮ |∇H| dl`
    pub s2: f64,
    /// `B⁰ = −(1/T) ∮ e·∇H dl/|∇H|`
    pub b0: f64,
    /// `B¹ = (1/T) ∮ ΔH dl/|∇H|`
    pub b1: f64,
    /// `a = ∮ h |∇H| dl`
    pub a: f64,
    /// `b = ∮ h F·∇H dl/|∇H|`
    pub b: f64,
    /// `c = ∮ ∇·(hF) dl/|∇H|`
    pub c: f64,
    /// `d = ∮ h dl/|∇H|`
    pub d: f64,
    /// `∮ |∇H| dl`, whose one-sided limits are the vertex weights.
    pub grad_integral: f64,
    /// `∮ [∇h·∇H + hΔH] dl/|∇H|`, the derivative of `a`.
    pub a_prime: f64,
    /// Liouville average of `h`.
    pub theta: f64,
    /// `(max h − min h) / mean h` along the curve.
    pub theta_variation: f64,
    /// Richardson estimate (step vs step/2), relative; 0 when not computed.
    pub err_est: f64,
}

impl CoefficientSample {
    fn fields(&self) -> [f64; 10] {
        [self.period, self.s2, self.b0, self.b1, self.a, self.b, self.c, self.d, self.grad_integral, self.a_prime]
    }
}

/// Evaluates every averaged coefficient on `curve` in one sweep.
pub fn coefficient_sample(sys: &HamiltonianSystem, curve: &LevelCurve) -> CoefficientSample {
    let mut t = 0.0;
    let mut grad_int = 0.0;
    let mut flux_e = 0.0;
    let mut lap = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    let mut d = 0.0;
    let mut a_prime = 0.0;
    let mut h_lo = f64::INFINITY;
    let mut h_hi = f64::NEG_INFINITY;
    for ((&p, &w), &gn) in curve.points.iter().zip(&curve.weights).zip(&curve.grad_norms) {
        let g = sys.grad_energy(p);
        let h = sys.density(p);
        let lw = w / gn;
        let lap_h = sys.laplacian_energy(p);
        t += lw;
        grad_int += gn * w;
        flux_e += sys.drift(p).dot(g) * lw;
        lap += lap_h * lw;
        a += h * gn * w;
        b += h * sys.field_f(p).dot(g) * lw;
        c += sys.divergence_hf(p) * lw;
        d += h * lw;
        a_prime += (sys.density_gradient(p).dot(g) + h * lap_h) * lw;
        h_lo = h_lo.min(h);
        h_hi = h_hi.max(h);
    }
    let theta = d / t;
    CoefficientSample {
        m: curve.level,
        period: t,
        s2: grad_int / t,
        b0: -flux_e / t,
        b1: lap / t,
        a,
        b,
        c,
        d,
        grad_integral: grad_int,
        a_prime,
        theta,
        theta_variation: (h_hi - h_lo) / theta,
        err_est: 0.0,
    }
}

/// Coefficients at `step` with a Richardson error estimate from `step/2`.
///
/// The returned sample is the refined one.
pub fn coefficient_sample_refined(sys: &HamiltonianSystem, seed: Vec2, step: f64) -> Result<CoefficientSample> {
    let coarse = coefficient_sample(sys, &trace_level_curve(sys, seed, step)?);
    let mut fine = coefficient_sample(sys, &trace_level_curve(sys, seed, 0.5 * step)?);
    fine.err_est = relative_gap(&coarse, &fine);
    Ok(fine)
}

/// Largest relative difference over the coefficient fields.
pub fn relative_gap(x: &CoefficientSample, y: &CoefficientSample) -> f64 {
    let scale = x.fields().iter().chain(y.fields().iter()).fold(0.0f64, |acc, v| acc.max(v.abs()));
    x.fields()
        .iter()
        .zip(y.fields().iter())
        .map(|(u, v)| (u - v).abs() / u.abs().max(v.abs()).max(1e-9 * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeResiduals {
    /// `|d/dm ∮ G·∇H/|∇H| dl − ∮ ∇·G dl/|∇H||` with `G = hF`.
    pub res1: f64,
    /// `|d/dm ∮ h|∇H| dl − ∮ [∇h·∇H + hΔH] dl/|∇H||`.
    pub res2: f64,
    pub lhs1: f64,
    pub rhs1: f64,
    pub lhs2: f64,
    pub rhs2: f64,
}

/// Checks both contour-derivative identities at level `m` of one edge by
/// central differences over `[m − δm, m + δm]`.
///
/// `edge_interval` is the open level range of the edge containing
/// `edge_seed`; the window must lie strictly inside it.
pub fn derivative_residuals(
    sys: &HamiltonianSystem,
    edge_seed: Vec2,
    m: f64,
    dm: f64,
    edge_interval: (f64, f64),
    step: f64,
) -> Result<DerivativeResiduals> {
    let (lo, hi) = edge_interval;
    if !(dm > 0.0) || m - dm <= lo || m + dm >= hi {
        return Err(Error::EdgeStraddle { lo: m - dm, hi: m + dm, edge_lo: lo, edge_hi: hi });
    }
    let center = flow_to_level(sys, edge_seed, m)?;
    let up = flow_to_level(sys, center, m + dm)?;
    let down = flow_to_level(sys, center, m - dm)?;
    let s0 = coefficient_sample(sys, &trace_level_curve(sys, center, step)?);
    let sp = coefficient_sample(sys, &trace_level_curve(sys, up, step)?);
    let sm = coefficient_sample(sys, &trace_level_curve(sys, down, step)?);
    let lhs1 = (sp.b - sm.b) / (2.0 * dm);
    let lhs2 = (sp.a - sm.a) / (2.0 * dm);
    Ok(DerivativeResiduals {
        res1: (lhs1 - s0.c).abs(),
        res2: (lhs2 - s0.a_prime).abs(),
        lhs1,
        rhs1: s0.c,
        lhs2,
        rhs2: s0.a_prime,
    })
}
