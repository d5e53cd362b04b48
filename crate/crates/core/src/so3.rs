//! Minimal SO(3) toolbox: exponential/logarithm maps, the skew operator, and
//! the right Jacobian of the exponential map.
//!
//! Rotations are stored as 3×3 orthonormal matrices so that residual
//! evaluation and covariance conjugation can use them directly without
//! conversions. Long composition chains are re-orthonormalized through a
//! polar projection to keep the orthonormality error below 1e-9.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

/// Context-dependent 3-vector (m, m/s, rad/s, m/s² …).
pub type Vec3 = Vector3<f64>;

/// Angle below which `exp`/`log` switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Angle above which `log` switches to the trace-robust near-π branch.
pub const NEAR_PI: f64 = std::f64::consts::PI - 1e-6;
/// Compositions between polar re-orthonormalizations.
const RENORMALIZE_EVERY: u32 = 1000;

/// Skew-symmetric matrix `[q]×` such that `skew(q) * w == q.cross(&w)`.
///
/// Layout:
/// ```text
/// [  0  -qz   qy ]
/// [  qz   0  -qx ]
/// [ -qy  qx    0 ]
/// ```
#[inline]
pub fn skew(q: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -q.z, q.y, q.z, 0.0, -q.x, -q.y, q.x, 0.0)
}

/// An element of SO(3), stored as an orthonormal 3×3 matrix.
///
/// Values are immutable after construction; composing with `*` returns a new
/// rotation, re-projected onto SO(3) after long chains.
#[derive(Debug, Clone, Copy)]
pub struct Rotation {
    m: Matrix3<f64>,
    /// Compositions since the matrix was last known orthonormal.
    chain: u32,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            m: Matrix3::identity(),
            chain: 0,
        }
    }

    /// Wraps a matrix that is already orthonormal (det +1). No validation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation { m, chain: 0 }
    }

    /// Wraps a matrix after projecting it onto SO(3); returns `None` when the
    /// input is too far from a rotation to be trusted (‖R·Rᵀ − I‖ > 1e-3).
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let r = Rotation { m, chain: 0 };
        if !m.iter().all(|x| x.is_finite()) || r.orthonormality_error() > 1e-3 {
            return None;
        }
        Some(r.renormalized())
    }

    pub fn from_unit_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation {
            m: q.to_rotation_matrix().into_inner(),
            chain: 0,
        }
    }

    pub fn to_unit_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.m)
    }

    /// Exponential map (Rodrigues). Falls back to the second-order Taylor
    /// expansion of the coefficients below [`SMALL_ANGLE`].
    pub fn exp(omega: &Vec3) -> Self {
        let theta_sq = omega.norm_squared();
        let theta = theta_sq.sqrt();
        let k = skew(omega);
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
        };
        Rotation {
            m: Matrix3::identity() + k * a + k * k * b,
            chain: 0,
        }
    }

    /// Logarithm map; returns the rotation vector with norm in [0, π].
    pub fn log(&self) -> Vec3 {
        let cos_theta = ((self.m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        // vee of the antisymmetric part: equals sin(θ)·axis.
        let w = Vec3::new(
            self.m[(2, 1)] - self.m[(1, 2)],
            self.m[(0, 2)] - self.m[(2, 0)],
            self.m[(1, 0)] - self.m[(0, 1)],
        ) * 0.5;

        if theta < SMALL_ANGLE {
            // sin(θ)/θ ≈ 1 − θ²/6; the correction is below double precision here.
            return w;
        }
        if theta > NEAR_PI {
            // Near π the antisymmetric part vanishes; recover the axis from the
            // symmetric part R = I + (1−cosθ)·(uuᵀ − I) + sinθ·[u]×.
            let one_minus = 1.0 - cos_theta;
            let diag = self.m.diagonal();
            // Pick the largest diagonal entry for a well-conditioned square root.
            let i = if diag.x >= diag.y && diag.x >= diag.z {
                0
            } else if diag.y >= diag.z {
                1
            } else {
                2
            };
            let (j, k) = ((i + 1) % 3, (i + 2) % 3);
            let mut u = Vec3::zeros();
            u[i] = ((self.m[(i, i)] - cos_theta) / one_minus).max(0.0).sqrt();
            u[j] = (self.m[(i, j)] + self.m[(j, i)]) / (2.0 * one_minus * u[i]);
            u[k] = (self.m[(i, k)] + self.m[(k, i)]) / (2.0 * one_minus * u[i]);
            let u = u.normalize();
            // Fix the sign against the antisymmetric part when it is usable;
            // at exactly π both signs denote the same rotation.
            let u = if u.dot(&w) < 0.0 { -u } else { u };
            return u * theta;
        }
        w * (theta / theta.sin())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Self {
        Rotation {
            m: self.m.transpose(),
            chain: self.chain,
        }
    }

    /// Rotates a vector: `R · v`.
    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.m * v
    }

    /// Rotates by the inverse: `Rᵀ · v`.
    #[inline]
    pub fn inv_rotate(&self, v: &Vec3) -> Vec3 {
        self.m.tr_mul(v)
    }

    /// Max absolute entry of `R·Rᵀ − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.m * self.m.transpose() - Matrix3::identity();
        e.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    /// Polar projection onto SO(3) (closest rotation in Frobenius norm).
    pub fn renormalized(&self) -> Self {
        let svd = self.m.svd(true, true);
        let u = svd.u.expect("svd of 3x3 always yields u");
        let vt = svd.v_t.expect("svd of 3x3 always yields v_t");
        let mut d = Matrix3::identity();
        d[(2, 2)] = (u * vt).determinant().signum();
        Rotation {
            m: u * d * vt,
            chain: 0,
        }
    }

    /// Rotation angle (radians) between `self` and `other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).log().norm()
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        let r = Rotation {
            m: self.m * rhs.m,
            chain: self.chain.max(rhs.chain) + 1,
        };
        if r.chain >= RENORMALIZE_EVERY {
            r.renormalized()
        } else {
            r
        }
    }
}

impl std::ops::Mul<Vec3> for Rotation {
    type Output = Vec3;

    fn mul(self, v: Vec3) -> Vec3 {
        self.m * v
    }
}

/// Right Jacobian of the SO(3) exponential:
/// `Exp(ω + δ) ≈ Exp(ω) · Exp(Jr(ω) · δ)`.
pub fn right_jacobian(omega: &Vec3) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(omega);
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse of the right Jacobian.
pub fn right_jacobian_inv(omega: &Vec3) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(omega);
    let b = if theta < 1e-5 {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        1.0 / theta_sq - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_rotvec(rng: &mut ChaCha8Rng, max_norm: f64) -> Vec3 {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() < 1e-12 {
            return Vec3::new(max_norm / 2.0, 0.0, 0.0);
        }
        v.normalize() * rng.random_range(0.0..max_norm)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let r = Rotation::exp(&Vec3::zeros());
        assert_abs_diff_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = Rotation::exp(&Vec3::new(0.0, 0.0, PI / 2.0));
        let mapped = r.rotate(&Vec3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(mapped, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_log_roundtrip_on_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let r = Rotation::exp(&random_rotvec(&mut rng, PI - 0.05));
            let back = Rotation::exp(&r.log());
            let diff = (*r.matrix() - *back.matrix()).abs().max();
            assert!(diff < 1e-9, "roundtrip error {diff}");
            assert!(back.orthonormality_error() < 1e-9);
            assert!((back.matrix().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_abs_diff_eq!(Rotation::identity().log(), Vec3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn log_of_half_turn_has_norm_pi() {
        let r = Rotation::exp(&Vec3::new(0.0, 0.0, PI));
        assert!((r.log().norm() - PI).abs() < 1e-6);
    }

    #[test]
    fn log_exp_roundtrip_below_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let omega = random_rotvec(&mut rng, PI - 1e-3);
            let back = Rotation::exp(&omega).log();
            assert_abs_diff_eq!(back, omega, epsilon = 1e-8);
        }
    }

    #[test]
    fn skew_of_zero_is_zero() {
        assert_eq!(skew(&Vec3::zeros()), Matrix3::zeros());
    }

    #[test]
    fn skew_layout_matches_convention() {
        let s = skew(&Vec3::new(1.0, 2.0, 3.0));
        let expected = Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
        assert_eq!(s, expected);
    }

    #[test]
    fn skew_is_exactly_antisymmetric() {
        let s = skew(&Vec3::new(0.3, -1.7, 2.9));
        assert_eq!(s + s.transpose(), Matrix3::zeros());
    }

    #[test]
    fn right_jacobian_matches_definition() {
        // Exp(ω + δ) vs Exp(ω)·Exp(Jr(ω)·δ) for a finite perturbation.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let omega = random_rotvec(&mut rng, 2.5);
            let delta = random_rotvec(&mut rng, 1e-6);
            let lhs = Rotation::exp(&(omega + delta));
            let rhs = Rotation::exp(&omega) * Rotation::exp(&(right_jacobian(&omega) * delta));
            let diff = (*lhs.matrix() - *rhs.matrix()).abs().max();
            assert!(diff < 1e-12, "Jr mismatch {diff}");
        }
    }

    #[test]
    fn right_jacobian_inverse_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let omega = random_rotvec(&mut rng, 3.0);
            let prod = right_jacobian(&omega) * right_jacobian_inv(&omega);
            let diff = (prod - Matrix3::identity()).abs().max();
            assert!(diff < 1e-9, "Jr·Jr⁻¹ error {diff}");
        }
    }

    #[test]
    fn long_composition_chains_stay_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut r = Rotation::identity();
        for _ in 0..5000 {
            r = r * Rotation::exp(&random_rotvec(&mut rng, 0.3));
        }
        assert!(r.orthonormality_error() < 1e-9);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let r = Rotation::exp(&Vec3::new(0.4, -0.2, 0.9));
        let i = r.inverse() * r;
        assert_abs_diff_eq!(*i.matrix(), Matrix3::identity(), epsilon = 1e-9);
    }
}
