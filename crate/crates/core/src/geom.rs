//! Small fixed-size vector helpers.
//!
//! Points live in `[f64; 3]` regardless of the ambient dimension; planar data
//! (n = 2) keeps a zero third coordinate, which leaves every downstream
//! formula (cross products, kernels, flows) dimension-agnostic.

pub type Vec3 = [f64; 3];

pub const ZERO: Vec3 = [0.0, 0.0, 0.0];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn axpy(s: f64, a: Vec3, b: Vec3) -> Vec3 {
    [s * a[0] + b[0], s * a[1] + b[1], s * a[2] + b[2]]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm_sq(a: Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist_sq(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    norm_sq(d)
}

#[inline]
pub fn dist(a: Vec3, b: Vec3) -> f64 {
    dist_sq(a, b).sqrt()
}

/// `a / |a|`; returns `None` when `|a| <= tol`.
#[inline]
pub fn normalized(a: Vec3, tol: f64) -> Option<Vec3> {
    let n = norm(a);
    if n <= tol {
        None
    } else {
        Some(scale(a, 1.0 / n))
    }
}

/// Rodrigues rotation of `p` by `angle` radians about the unit `axis`.
pub fn rotate(p: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let k = axis;
    let kxp = cross(k, p);
    let kdp = dot(k, p);
    [
        p[0] * c + kxp[0] * s + k[0] * kdp * (1.0 - c),
        p[1] * c + kxp[1] * s + k[1] * kdp * (1.0 - c),
        p[2] * c + kxp[2] * s + k[2] * kdp * (1.0 - c),
    ]
}

/// Mean of a point set; the origin for an empty slice.
pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return ZERO;
    }
    let mut c = ZERO;
    for &p in points {
        c = add(c, p);
    }
    scale(c, 1.0 / points.len() as f64)
}

/// Neumaier compensated accumulator. Used wherever the spec pins a
/// deterministic, order-stable reduction.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    sum: f64,
    comp: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a sequence, in iteration order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Accumulator::new();
    for v in values {
        acc.add(v);
    }
    acc.total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_is_orthogonal() {
        let a = [1.0, 2.0, 3.0];
        let b = [-0.5, 4.0, 1.0];
        let c = cross(a, b);
        assert!(dot(a, c).abs() < 1e-14);
        assert!(dot(b, c).abs() < 1e-14);
    }

    #[test]
    fn compensated_sum_beats_naive_on_cancellation() {
        let values = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(values.iter().copied()), 2.0);
    }

    #[test]
    fn normalized_rejects_zero() {
        assert!(normalized(ZERO, 1e-12).is_none());
        let v = normalized([0.0, 0.0, 2.0], 1e-12).unwrap();
        assert_eq!(v, [0.0, 0.0, 1.0]);
    }
}
