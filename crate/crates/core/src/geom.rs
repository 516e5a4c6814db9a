//! Small planar geometry types shared by every module.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// A point or vector in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Quarter turn counterclockwise: `(x, y) -> (-y, x)`.
    ///
    /// Applied to a gradient this is the symplectic gradient `A∇H`, which is
    /// orthogonal to `∇H` bit-for-bit (`-a*b + b*a == 0` in IEEE arithmetic).
    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    #[inline]
    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    #[inline]
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    #[inline]
    fn mul(self, v: Vec2) -> Vec2 {
        v * self
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Symmetric 2×2 matrix, used for Hessians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn frobenius(&self) -> f64 {
        (self.xx * self.xx + 2.0 * self.xy * self.xy + self.yy * self.yy).sqrt()
    }

    pub fn apply(&self, v: Vec2) -> Vec2 {
        Vec2::new(self.xx * v.x + self.xy * v.y, self.xy * v.x + self.yy * v.y)
    }

    /// Solves `self * x = rhs`; `None` when the matrix is numerically singular.
    pub fn solve(&self, rhs: Vec2) -> Option<Vec2> {
        let det = self.det();
        let scale = self.frobenius().powi(2).max(f64::MIN_POSITIVE);
        if det.abs() <= 1e-14 * scale {
            return None;
        }
        Some(Vec2::new(
            (self.yy * rhs.x - self.xy * rhs.y) / det,
            (self.xx * rhs.y - self.xy * rhs.x) / det,
        ))
    }
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn square(half: f64) -> Self {
        Self::new(-half, half, -half, half)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0 && [self.x0, self.x1, self.y0, self.y1].iter().all(|v| v.is_finite())
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let r = Rect::new(
            self.x0.max(other.x0),
            self.x1.min(other.x1),
            self.y0.max(other.y0),
            self.y1.min(other.y1),
        );
        (r.x1 > r.x0 && r.y1 > r.y0).then_some(r)
    }

    /// `n` equally spaced nodes per axis including both ends.
    pub fn grid_node(&self, n: usize, i: usize, j: usize) -> Vec2 {
        let hx = self.width() / (n - 1) as f64;
        let hy = self.height() / (n - 1) as f64;
        Vec2::new(self.x0 + i as f64 * hx, self.y0 + j as f64 * hy)
    }

    /// Points along the boundary, `n` per side.
    pub fn boundary_points(&self, n: usize) -> impl Iterator<Item = Vec2> + '_ {
        let n = n.max(2);
        (0..n).flat_map(move |k| {
            let t = k as f64 / (n - 1) as f64;
            let x = self.x0 + t * self.width();
            let y = self.y0 + t * self.height();
            [
                Vec2::new(x, self.y0),
                Vec2::new(x, self.y1),
                Vec2::new(self.x0, y),
                Vec2::new(self.x1, y),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perp_is_orthogonal_exactly() {
        for &(x, y) in &[(0.3, -1.7), (1e-8, 3e5), (-2.25, 0.125)] {
            let g = Vec2::new(x, y);
            assert_eq!(g.perp().dot(g), 0.0);
        }
    }

    #[test]
    fn solve_inverts() {
        let m = Sym2 { xx: 2.0, xy: 0.5, yy: 1.0 };
        let x = Vec2::new(0.7, -0.3);
        let sol = m.solve(m.apply(x)).unwrap();
        assert!(sol.dist(x) < 1e-14);
        assert!(Sym2 { xx: 1.0, xy: 1.0, yy: 1.0 }.solve(x).is_none());
    }
}
