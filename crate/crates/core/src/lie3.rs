//! Rotation and vector algebra on SO(3) and R³.
//!
//! Rotations are stored as plain 3×3 matrices. Integration always goes through
//! the exponential map, so orthogonality holds by construction up to roundoff;
//! [`RotationIntegrator`] additionally re-projects onto SO(3) at a fixed cadence.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `RᵀR = I` (Frobenius) and `det R = 1` for [`Rot3`].
pub const ROT_TOLERANCE: f64 = 1e-9;

/// Number of exponential-map steps between polar re-projections.
pub const RENORMALIZE_EVERY: u64 = 1000;

/// Skew-symmetric matrix with `hat(a) * b == a.cross(&b)`.
pub fn hat(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Inverse of [`hat`] for a skew-symmetric input (uses the antisymmetric part).
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Orthogonal projector onto the plane normal to `x`: `I − x xᵀ / |x|²`.
pub fn projector(x: &Vec3) -> Result<Mat3> {
    let n2 = x.norm_squared();
    if !(n2 > 0.0) || !n2.is_finite() {
        return Err(Error::Domain(format!("projector of non-positive-norm vector {x:?}")));
    }
    Ok(Mat3::identity() - x * x.transpose() / n2)
}

/// Projector for a vector already known to be unit length.
pub(crate) fn unit_projector(y: &Vec3) -> Mat3 {
    Mat3::identity() - y * y.transpose()
}

/// Closed-form Rodrigues exponential of `hat(phi)`.
pub fn exp_so3(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let (a, b) = if theta2 < 1e-8 {
        // Taylor expansions of sin(θ)/θ and (1 − cos θ)/θ².
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// A 3D rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot3(Mat3);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Mat3::identity())
    }

    /// Wraps `m` after checking orthonormality and orientation.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let ortho = (m.transpose() * m - Mat3::identity()).norm();
        let det = m.determinant();
        if !(ortho < ROT_TOLERANCE) || !((det - 1.0).abs() < ROT_TOLERANCE) {
            return Err(Error::Domain(format!(
                "matrix is not a rotation: |RᵀR − I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(Rot3(m))
    }

    /// Rotation `exp(hat(phi))` for a rotation vector `phi`.
    pub fn exp(phi: &Vec3) -> Self {
        Rot3(exp_so3(phi))
    }

    /// Rotation by `angle` about `axis` (axis need not be unit).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Nearest rotation in the Frobenius sense (polar factor via SVD).
    pub fn project(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rot3(u * d * v_t)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rot3(self.0.transpose())
    }

    pub fn compose(&self, other: &Rot3) -> Self {
        Rot3(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        self.0.tr_mul(v)
    }

    /// `‖RᵀR − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).norm()
    }

    pub fn renormalized(&self) -> Self {
        Self::project(&self.0)
    }
}

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

/// Normalized distance `sqrt(tr(I − R) / 4)`, in `[0, 1]`.
pub fn so3_distance(r: &Rot3) -> f64 {
    let radicand = 0.25 * (3.0 - r.0.trace());
    radicand.clamp(0.0, 1.0).sqrt()
}

/// One step of `Ṙ = R hat(Ω)` with `Ω` held constant over `dt`.
pub fn integrate_rotation(r: &Rot3, omega: &Vec3, dt: f64) -> Rot3 {
    Rot3(r.0 * exp_so3(&(omega * dt)))
}

/// Rotation vector for one step of `Ṙ = R hat(Ω(t))` given `Ω` at the start,
/// midpoint and end of the step.
///
/// Fourth-order Magnus expansion: Simpson quadrature of `Ω` plus the leading
/// commutator term `dt²/12 · Ω₀ × Ω₁`.
pub fn magnus_increment(w0: &Vec3, wm: &Vec3, w1: &Vec3, dt: f64) -> Vec3 {
    (w0 + wm * 4.0 + w1) * (dt / 6.0) + w0.cross(w1) * (dt * dt / 12.0)
}

/// Rotation vector from the step start to its midpoint, using the same three
/// samples of `Ω` (quadratic interpolation over the step).
pub fn magnus_half_increment(w0: &Vec3, wm: &Vec3, w1: &Vec3, dt: f64) -> Vec3 {
    let integral = (w0 * (5.0 / 24.0) + wm * (1.0 / 3.0) - w1 * (1.0 / 24.0)) * dt;
    let h = 0.5 * dt;
    integral + w0.cross(wm) * (h * h / 12.0)
}

/// Stateful exponential-map integrator that re-projects onto SO(3) every
/// [`RENORMALIZE_EVERY`] steps.
#[derive(Debug, Clone)]
pub struct RotationIntegrator {
    rot: Rot3,
    steps: u64,
}

impl RotationIntegrator {
    pub fn new(rot: Rot3) -> Self {
        Self { rot, steps: 0 }
    }

    pub fn rotation(&self) -> &Rot3 {
        &self.rot
    }

    /// Right-multiplies by `exp(hat(phi))`.
    pub fn advance(&mut self, phi: &Vec3) -> &Rot3 {
        self.rot = Rot3(self.rot.0 * exp_so3(phi));
        self.steps += 1;
        if self.steps % RENORMALIZE_EVERY == 0 {
            self.rot = self.rot.renormalized();
        }
        &self.rot
    }

    /// Left-multiplies by `exp(hat(phi))`.
    pub fn advance_left(&mut self, phi: &Vec3) -> &Rot3 {
        self.rot = Rot3(exp_so3(phi) * self.rot.0);
        self.steps += 1;
        if self.steps % RENORMALIZE_EVERY == 0 {
            self.rot = self.rot.renormalized();
        }
        &self.rot
    }
}

/// A unit-norm bearing vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitBearing(Vec3);

impl UnitBearing {
    pub const TOLERANCE: f64 = 1e-12;

    /// Normalizes `v`; fails for a zero or non-finite vector.
    pub fn new_normalize(v: &Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain(format!("cannot take bearing of {v:?}")));
        }
        Ok(UnitBearing(v / n))
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn into_inner(self) -> Vec3 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn hat_examples() {
        assert_eq!(hat(&Vec3::zeros()), Mat3::zeros());
        let a = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(hat(&a) * a, Vec3::zeros());
        let e1 = hat(&Vec3::x());
        assert_eq!(e1, Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn projector_examples() {
        let p = projector(&Vec3::z()).unwrap();
        assert_eq!(p, Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)));
        let x = Vec3::new(1.0, -2.0, 0.5);
        assert!((projector(&x).unwrap() * x).norm() < 1e-15);
        assert!(projector(&Vec3::zeros()).is_err());
    }

    #[test]
    fn projector_eigenvalues() {
        // Symmetric eigensolve as the independent route.
        let p = projector(&Vec3::new(3.0, 4.0, 0.0)).unwrap();
        let mut ev: Vec<f64> = p.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(ev[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(ev[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(so3_distance(&Rot3::identity()), 0.0);
        // Rotation by π about e₃ is diag(−1, −1, 1): tr(I − R) = 4.
        let r = Rot3::from_matrix(Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0))).unwrap();
        assert_relative_eq!(so3_distance(&r), 1.0, epsilon = 1e-15);
        assert_relative_eq!(so3_distance(&Rot3::from_axis_angle(&Vec3::z(), PI)), 1.0, epsilon = 1e-12);
        // π/2 about e₁: diag entries (1, 0, 0), tr(I − R) = 2.
        let r = Rot3::from_axis_angle(&Vec3::x(), FRAC_PI_2);
        assert_relative_eq!(so3_distance(&r), 0.5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn distance_clamps_roundoff() {
        let mut m = Mat3::identity();
        m[(0, 0)] += 1e-16;
        m[(1, 1)] += 1e-16;
        assert_eq!(so3_distance(&Rot3(m)), 0.0);
    }

    #[test]
    fn integrate_examples() {
        let r = Rot3::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.3);
        assert_eq!(integrate_rotation(&r, &Vec3::zeros(), 0.1), r);
        let out = integrate_rotation(&Rot3::identity(), &Vec3::new(0.0, 0.0, FRAC_PI_2), 1.0);
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((out.matrix() - expected).norm() < 1e-15);
    }

    #[test]
    fn from_matrix_rejects_reflection() {
        assert!(Rot3::from_matrix(Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0))).is_err());
        assert!(Rot3::from_matrix(Mat3::identity() * 1.001).is_err());
    }

    #[test]
    fn long_composition_stays_on_manifold() {
        let mut integ = RotationIntegrator::new(Rot3::identity());
        let mut s = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..1_000_000 {
            let phi = Vec3::new(next(), next(), next()) * 0.02;
            integ.advance(&phi);
        }
        let r = integ.rotation();
        assert!(r.orthogonality_error() < 1e-9);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
    }

    fn fine_reference(omega: impl Fn(f64) -> Vec3, t0: f64, t1: f64, n: usize) -> Rot3 {
        let h = (t1 - t0) / n as f64;
        (0..n).fold(Rot3::identity(), |r, j| integrate_rotation(&r, &omega(t0 + (j as f64 + 0.5) * h), h))
    }

    #[test]
    fn magnus_is_fourth_order() {
        let omega = |t: f64| Vec3::new((2.0 * t).sin(), 0.5 * (3.0 * t).cos(), 0.3 + t);
        let reference = fine_reference(omega, 0.0, 1.0, 80_000);
        let err = |n: usize| {
            let dt = 1.0 / n as f64;
            let r = (0..n).fold(Rot3::identity(), |r, k| {
                let t = k as f64 * dt;
                r.compose(&Rot3::exp(&magnus_increment(&omega(t), &omega(t + 0.5 * dt), &omega(t + dt), dt)))
            });
            (r.0 - reference.0).norm()
        };
        let (e1, e2) = (err(20), err(40));
        assert!(e2 < 1e-7, "{e2}");
        assert!((14.0..18.0).contains(&(e1 / e2)), "ratio {}", e1 / e2);
    }

    #[test]
    fn magnus_half_step_local_order() {
        let omega = |t: f64| Vec3::new(t.cos(), 0.5 * t * t, -0.2 + (0.7 * t).sin());
        let t0 = 0.4;
        let err = |dt: f64| {
            let half = Rot3::exp(&magnus_half_increment(&omega(t0), &omega(t0 + 0.5 * dt), &omega(t0 + dt), dt));
            (half.0 - fine_reference(omega, t0, t0 + 0.5 * dt, 4000).0).norm()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        assert!(e1 < 1e-6, "{e1}");
        // Local error O(dt⁴) from the quadratic interpolant, O(dt⁵) otherwise.
        assert!(e1 / e2 > 14.0, "ratio {}", e1 / e2);
    }

    proptest! {
        #[test]
        fn hat_antisymmetry(a in prop::array::uniform3(-10.0..10.0f64), b in prop::array::uniform3(-10.0..10.0f64)) {
            let (a, b) = (Vec3::from(a), Vec3::from(b));
            prop_assert!((hat(&a) * b + hat(&b) * a).norm() < 1e-12);
            prop_assert!((hat(&a) * b - a.cross(&b)).norm() < 1e-12);
            prop_assert!((hat(&a) + hat(&a).transpose()).norm() == 0.0);
        }

        #[test]
        fn projector_scale_invariant(x in prop::array::uniform3(-5.0..5.0f64), c in 0.1..20.0f64, neg in any::<bool>()) {
            let x = Vec3::from(x);
            prop_assume!(x.norm() > 1e-3);
            let c = if neg { -c } else { c };
            let p = projector(&x).unwrap();
            prop_assert!((p - projector(&(x * c)).unwrap()).norm() < 1e-12);
            prop_assert!((p * p - p).norm() < 1e-12);
            prop_assert!((p - p.transpose()).norm() < 1e-15);
        }

        #[test]
        fn integrate_preserves_rotation(w in prop::array::uniform3(-10.0..10.0f64), dt in 1e-4..1.0f64) {
            let r = integrate_rotation(&Rot3::identity(), &Vec3::from(w), dt);
            prop_assert!(r.orthogonality_error() < 1e-12);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        }
    }
}
