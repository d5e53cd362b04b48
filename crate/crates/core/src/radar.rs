//! Per-scan radar ego-velocity estimation from Doppler measurements.
//!
//! Each radar point carries the projection of the sensor's linear velocity
//! onto the point direction: `-d_n = v_sᵀ·(r_n/‖r_n‖)`. A Cauchy-robust
//! Levenberg–Marquardt solve over all points in a scan recovers the sensor
//! velocity; the marginalized covariance `(Aᵀ Σ_d⁻¹ A)⁻¹` over the inlier
//! directions captures the FOV-induced anisotropy of the estimate.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::{skew, Rotation, Vec3};

/// A single radar detection: position in the sensor frame, Doppler speed, SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    /// Position in the sensor frame [m]. Must be away from the origin.
    pub position: Vec3,
    /// Doppler speed [m/s]; negative projection of the sensor velocity.
    pub doppler: f64,
    /// Signal-to-noise ratio [dB]. Stored but not used for weighting.
    pub snr: f64,
}

/// One radar frame: a timestamped set of points from a single sensor.
#[derive(Debug, Clone)]
pub struct RadarScan {
    pub timestamp: f64,
    pub sensor_id: String,
    pub points: Vec<RadarPoint>,
}

/// Frame in which a [`VelocityEstimate`] is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Sensor,
    Body,
}

/// A linear-velocity estimate with 3×3 covariance and inlier statistics.
#[derive(Debug, Clone)]
pub struct VelocityEstimate {
    pub frame: Frame,
    pub velocity: Vec3,
    pub cov: Matrix3<f64>,
    pub inlier_count: usize,
    pub total_count: usize,
    pub timestamp: f64,
}

/// Mounting of a radar relative to the IMU/body frame.
#[derive(Debug, Clone, Copy)]
pub struct RadarExtrinsics {
    /// Rotation from the radar sensor frame to the body frame.
    pub rotation: Rotation,
    /// Lever arm: sensor origin in the body frame [m]. Only used when the
    /// lever-arm correction is enabled; the plain transform is rotation-only.
    pub translation: Vec3,
}

impl RadarExtrinsics {
    pub fn identity() -> Self {
        RadarExtrinsics {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }
}

/// Parameters of the robust per-scan velocity solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustSolveConfig {
    /// Doppler measurement noise σ_d [m/s].
    pub doppler_sigma: f64,
    /// Minimum usable points for a solve attempt.
    pub min_points: usize,
    /// Final Cauchy weight at or above which a point counts as an inlier.
    pub inlier_weight_threshold: f64,
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Multiplicative damping adaptation factor.
    pub damping_scale: f64,
    /// Convergence threshold on the gradient norm.
    pub gradient_tolerance: f64,
    /// Degeneracy bound: smallest singular value of the unit-direction matrix
    /// must exceed `degeneracy_threshold · √n`.
    pub degeneracy_threshold: f64,
    /// Compensate the angular-velocity × lever-arm term when transforming to
    /// the body frame. Off by default: the plain transform is rotation-only.
    pub lever_arm_correction: bool,
}

impl Default for RobustSolveConfig {
    fn default() -> Self {
        RobustSolveConfig {
            doppler_sigma: 0.124,
            min_points: 10,
            inlier_weight_threshold: 0.5,
            max_iterations: 25,
            initial_damping: 1e-4,
            damping_scale: 10.0,
            gradient_tolerance: 1e-10,
            degeneracy_threshold: 0.05,
            lever_arm_correction: false,
        }
    }
}

impl RobustSolveConfig {
    /// Cauchy kernel scale: 3σ_d, the conventional gross-error boundary.
    pub fn cauchy_scale(&self) -> f64 {
        3.0 * self.doppler_sigma
    }
}

#[derive(Debug, Error)]
pub enum VelocityError {
    #[error("scan has {got} usable points, need at least {need}")]
    InsufficientPoints { got: usize, need: usize },
    #[error(
        "degenerate direction geometry: smallest singular value {sigma_min:.3e} < {threshold:.3e}"
    )]
    DegenerateGeometry { sigma_min: f64, threshold: f64 },
    #[error("solver hit {iterations} iterations with gradient norm {gradient_norm:.3e}")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
    },
}

/// Doppler residual of a single point at sensor velocity `v_s`:
/// `v_sᵀ·(r/‖r‖) + d`. Zero when the measurement agrees with the velocity.
pub fn doppler_residual(v_s: &Vec3, point: &RadarPoint) -> f64 {
    let n = point.position.norm();
    debug_assert!(n > 0.0, "radar point at the sensor origin");
    v_s.dot(&point.position) / n + point.doppler
}

#[inline]
fn cauchy_weight(r: f64, scale: f64) -> f64 {
    1.0 / (1.0 + (r / scale) * (r / scale))
}

#[inline]
fn cauchy_cost(r: f64, scale: f64) -> f64 {
    0.5 * scale * scale * (1.0 + (r / scale) * (r / scale)).ln()
}

/// Second derivative of the Cauchy loss: (1 − (r/c)²) / (1 + (r/c)²)².
/// Negative for gross outliers; the LM damping keeps the system solvable.
#[inline]
fn cauchy_curvature(r: f64, scale: f64) -> f64 {
    let s = (r / scale) * (r / scale);
    (1.0 - s) / ((1.0 + s) * (1.0 + s))
}

/// Estimates the sensor-frame linear velocity of one scan.
///
/// Minimizes the Cauchy-robustified, Σ_d-weighted sum of squared Doppler
/// residuals with Levenberg–Marquardt, starting from `initial_guess`
/// (callers pass the IMU-predicted velocity rotated into the sensor frame;
/// zero is acceptable for the first scan). The covariance is the marginal
/// covariance over the inlier set; points whose final robust weight falls
/// below the inlier threshold are excluded from it.
pub fn estimate_sensor_velocity(
    scan: &RadarScan,
    initial_guess: &Vec3,
    config: &RobustSolveConfig,
) -> Result<VelocityEstimate, VelocityError> {
    let mut dirs: Vec<Vec3> = Vec::with_capacity(scan.points.len());
    let mut dopplers: Vec<f64> = Vec::with_capacity(scan.points.len());
    for p in &scan.points {
        let n = p.position.norm();
        if n > 0.0 && n.is_finite() && p.doppler.is_finite() {
            dirs.push(p.position / n);
            dopplers.push(p.doppler);
        }
    }
    if dirs.len() < config.min_points.max(3) {
        return Err(VelocityError::InsufficientPoints {
            got: dirs.len(),
            need: config.min_points.max(3),
        });
    }

    let var = config.doppler_sigma * config.doppler_sigma;
    let scale = config.cauchy_scale();
    let robust_cost = |v: &Vec3| -> f64 {
        dirs.iter()
            .zip(&dopplers)
            .map(|(u, d)| cauchy_cost(u.dot(v) + d, scale))
            .sum::<f64>()
            / var
    };

    let mut v = if initial_guess.iter().all(|x| x.is_finite()) {
        *initial_guess
    } else {
        Vec3::zeros()
    };
    let mut lambda = config.initial_damping;
    let mut cost = robust_cost(&v);
    let mut gradient_norm = f64::INFINITY;

    // Gradient and exact Hessian of the robust cost. The curvature term can
    // make the Hessian indefinite when outliers dominate; the damping guard
    // below handles that, and near the optimum convergence is quadratic,
    // which is what the tight gradient tolerance needs.
    let linearize = |v: &Vec3| -> (Vec3, Matrix3<f64>) {
        let mut g = Vec3::zeros();
        let mut h = Matrix3::zeros();
        for (u, d) in dirs.iter().zip(&dopplers) {
            let r = u.dot(v) + d;
            g += u * (cauchy_weight(r, scale) * r);
            h += u * u.transpose() * cauchy_curvature(r, scale);
        }
        (g / var, h / var)
    };

    for _ in 0..config.max_iterations {
        let (g, h) = linearize(&v);
        gradient_norm = g.norm();
        if gradient_norm < config.gradient_tolerance {
            break;
        }

        // Damping adaptation: retry with stronger damping until a step stops
        // increasing the robust cost.
        let mut stepped = false;
        while lambda < 1e16 {
            let damped = h + Matrix3::identity() * lambda;
            let Some(delta) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= config.damping_scale;
                continue;
            };
            let candidate = v + delta;
            let candidate_cost = robust_cost(&candidate);
            if candidate_cost.is_finite() && candidate_cost <= cost {
                v = candidate;
                cost = candidate_cost;
                lambda = (lambda / config.damping_scale).max(1e-12);
                stepped = true;
                break;
            }
            lambda *= config.damping_scale;
        }
        if !stepped {
            // No descent direction left; either we are converged or stuck.
            break;
        }
    }

    if gradient_norm >= config.gradient_tolerance {
        // Recompute for an accurate report; the loop may have exited early.
        gradient_norm = linearize(&v).0.norm();
        if gradient_norm >= config.gradient_tolerance {
            return Err(VelocityError::NonConvergence {
                iterations: config.max_iterations,
                gradient_norm,
            });
        }
    }

    let inlier_dirs: Vec<Vec3> = dirs
        .iter()
        .zip(&dopplers)
        .filter(|(u, d)| cauchy_weight(u.dot(&v) + *d, scale) >= config.inlier_weight_threshold)
        .map(|(u, _)| *u)
        .collect();
    let cov = marginal_covariance_of_directions(&inlier_dirs, var, config.degeneracy_threshold)?;

    Ok(VelocityEstimate {
        frame: Frame::Sensor,
        velocity: v,
        cov,
        inlier_count: inlier_dirs.len(),
        total_count: scan.points.len(),
        timestamp: scan.timestamp,
    })
}

/// Marginal covariance `(Aᵀ Σ_d⁻¹ A)⁻¹` of the velocity estimate over a set
/// of inlier points, with `Σ_d = doppler_variance · I` and the rows of `A`
/// the unit directions of the points.
pub fn marginal_covariance(
    inlier_points: &[RadarPoint],
    doppler_variance: f64,
) -> Result<Matrix3<f64>, VelocityError> {
    let dirs: Vec<Vec3> = inlier_points
        .iter()
        .map(|p| p.position / p.position.norm())
        .collect();
    marginal_covariance_of_directions(&dirs, doppler_variance, 0.05)
}

fn marginal_covariance_of_directions(
    dirs: &[Vec3],
    doppler_variance: f64,
    degeneracy_threshold: f64,
) -> Result<Matrix3<f64>, VelocityError> {
    if dirs.len() < 3 {
        return Err(VelocityError::InsufficientPoints {
            got: dirs.len(),
            need: 3,
        });
    }
    let mut gram = Matrix3::zeros();
    for u in dirs {
        gram += u * u.transpose();
    }
    // Smallest singular value of A equals the square root of the smallest
    // eigenvalue of AᵀA.
    let eigen = SymmetricEigen::new(gram);
    let sigma_min = eigen.eigenvalues.min().max(0.0).sqrt();
    let threshold = degeneracy_threshold * (dirs.len() as f64).sqrt();
    if sigma_min < threshold {
        return Err(VelocityError::DegenerateGeometry {
            sigma_min,
            threshold,
        });
    }
    let info = gram / doppler_variance;
    Ok(info
        .try_inverse()
        .expect("information matrix is PD past the degeneracy gate"))
}

/// Rotates a sensor-frame estimate into the body frame:
/// `v_b = R_r·v_s`, `Σ_b = R_r·Σ_s·R_rᵀ`. Counts and timestamp are kept.
pub fn to_body_frame(est: &VelocityEstimate, extrinsics: &RadarExtrinsics) -> VelocityEstimate {
    debug_assert_eq!(est.frame, Frame::Sensor);
    let r = extrinsics.rotation.matrix();
    VelocityEstimate {
        frame: Frame::Body,
        velocity: r * est.velocity,
        cov: r * est.cov * r.transpose(),
        inlier_count: est.inlier_count,
        total_count: est.total_count,
        timestamp: est.timestamp,
    }
}

/// Body-frame transform with the angular-velocity × lever-arm correction:
/// the radar measures the velocity of its own origin, which differs from the
/// body origin's by `ω × t` when the mounting translation `t` is nonzero.
pub fn to_body_frame_with_lever(
    est: &VelocityEstimate,
    extrinsics: &RadarExtrinsics,
    body_angular_velocity: &Vec3,
) -> VelocityEstimate {
    let mut out = to_body_frame(est, extrinsics);
    out.velocity -= skew(body_angular_velocity) * extrinsics.translation;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(x: f64, y: f64, z: f64, d: f64) -> RadarPoint {
        RadarPoint {
            position: Vec3::new(x, y, z),
            doppler: d,
            snr: 10.0,
        }
    }

    fn scan_from(points: Vec<RadarPoint>) -> RadarScan {
        RadarScan {
            timestamp: 0.0,
            sensor_id: "horizontal".into(),
            points,
        }
    }

    fn loose_config(min_points: usize) -> RobustSolveConfig {
        RobustSolveConfig {
            min_points,
            ..RobustSolveConfig::default()
        }
    }

    #[test]
    fn residual_zero_velocity_zero_doppler() {
        let p = point(3.0, -2.0, 5.0, 0.0);
        assert_eq!(doppler_residual(&Vec3::zeros(), &p), 0.0);
    }

    #[test]
    fn residual_direct_substitution() {
        // v=(1,0,0), r=(10,0,0), d=-1: projection 1 cancels the doppler.
        let p = point(10.0, 0.0, 0.0, -1.0);
        assert_abs_diff_eq!(
            doppler_residual(&Vec3::new(1.0, 0.0, 0.0), &p),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn residual_lateral_point_carries_no_forward_signal() {
        let p = point(0.0, 5.0, 0.0, 0.0);
        assert_abs_diff_eq!(
            doppler_residual(&Vec3::new(1.0, 0.0, 0.0), &p),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn three_point_axis_aligned_solve_is_exact() {
        let scan = scan_from(vec![
            point(10.0, 0.0, 0.0, -1.0),
            point(0.0, 10.0, 0.0, -2.0),
            point(0.0, 0.0, 10.0, -3.0),
        ]);
        let config = RobustSolveConfig {
            doppler_sigma: 1.0,
            ..loose_config(3)
        };
        let est = estimate_sensor_velocity(&scan, &Vec3::zeros(), &config).unwrap();
        assert_abs_diff_eq!(est.velocity, Vec3::new(1.0, 2.0, 3.0), epsilon = 1e-9);
        assert_eq!(est.inlier_count, 3);
        assert_eq!(est.total_count, 3);
    }

    #[test]
    fn zero_noise_scan_recovers_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let v_true = Vec3::new(0.5, 0.0, 0.0);
        let mut points = Vec::new();
        for _ in 0..100 {
            let az: f64 = rng.random_range(-1.0..1.0);
            let el: f64 = rng.random_range(-0.15..0.15);
            let range: f64 = rng.random_range(1.0..30.0);
            let u = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            points.push(RadarPoint {
                position: u * range,
                doppler: -v_true.dot(&u),
                snr: 10.0,
            });
        }
        let est =
            estimate_sensor_velocity(&scan_from(points), &Vec3::zeros(), &loose_config(10))
                .unwrap();
        assert_abs_diff_eq!(est.velocity, v_true, epsilon = 1e-9);
        assert_eq!(est.inlier_count, 100);
    }

    #[test]
    fn estimate_is_invariant_under_point_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v_true = Vec3::new(0.3, -0.7, 0.1);
        let mut points = Vec::new();
        for _ in 0..40 {
            let u = Vec3::new(
                rng.random_range(0.3..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
            )
            .normalize();
            points.push(RadarPoint {
                position: u * rng.random_range(1.0..30.0),
                doppler: -v_true.dot(&u) + rng.random_range(-0.05..0.05),
                snr: 10.0,
            });
        }
        let est_a =
            estimate_sensor_velocity(&scan_from(points.clone()), &Vec3::zeros(), &loose_config(10))
                .unwrap();
        points.reverse();
        points.swap(0, 17);
        let est_b =
            estimate_sensor_velocity(&scan_from(points), &Vec3::zeros(), &loose_config(10))
                .unwrap();
        assert_abs_diff_eq!(est_a.velocity, est_b.velocity, epsilon = 1e-9);
        assert_eq!(est_a.inlier_count, est_b.inlier_count);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let scan = scan_from(vec![point(1.0, 0.0, 0.0, 0.0)]);
        let err =
            estimate_sensor_velocity(&scan, &Vec3::zeros(), &RobustSolveConfig::default())
                .unwrap_err();
        assert!(matches!(err, VelocityError::InsufficientPoints { .. }));
    }

    #[test]
    fn coplanar_directions_are_degenerate() {
        // All points in the x-y plane: z velocity unobservable.
        let mut points = Vec::new();
        for i in 0..20 {
            let az = -1.0 + 0.1 * i as f64;
            points.push(point(10.0 * f64::cos(az), 10.0 * f64::sin(az), 0.0, 0.0));
        }
        let err =
            estimate_sensor_velocity(&scan_from(points), &Vec3::zeros(), &loose_config(10))
                .unwrap_err();
        assert!(matches!(err, VelocityError::DegenerateGeometry { .. }));
    }

    #[test]
    fn covariance_axis_triad_is_isotropic() {
        let points = vec![
            point(1.0, 0.0, 0.0, 0.0),
            point(0.0, 1.0, 0.0, 0.0),
            point(0.0, 0.0, 1.0, 0.0),
        ];
        let sigma_sq = 0.04;
        let cov = marginal_covariance(&points, sigma_sq).unwrap();
        assert_abs_diff_eq!(cov, Matrix3::identity() * sigma_sq, epsilon = 1e-12);
    }

    #[test]
    fn covariance_duplicated_triad_halves() {
        let mut points = Vec::new();
        for _ in 0..2 {
            points.push(point(5.0, 0.0, 0.0, 0.0));
            points.push(point(0.0, 5.0, 0.0, 0.0));
            points.push(point(0.0, 0.0, 5.0, 0.0));
        }
        let sigma_sq = 0.09;
        let cov = marginal_covariance(&points, sigma_sq).unwrap();
        assert_abs_diff_eq!(cov, Matrix3::identity() * (sigma_sq / 2.0), epsilon = 1e-12);
    }

    #[test]
    fn narrow_elevation_cone_inflates_vertical_variance() {
        // ±60° azimuth, ±9° elevation: z gets far less direction diversity.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let az_half = 60f64.to_radians();
        let el_half = 9f64.to_radians();
        let mut points = Vec::new();
        for _ in 0..50 {
            let az = rng.random_range(-az_half..az_half);
            let el = rng.random_range(-el_half..el_half);
            let u = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            points.push(RadarPoint {
                position: u * 10.0,
                doppler: 0.0,
                snr: 10.0,
            });
        }
        let cov = marginal_covariance(&points, 1.0).unwrap();
        assert!(
            cov[(2, 2)] > cov[(0, 0)],
            "z variance {} should exceed x variance {}",
            cov[(2, 2)],
            cov[(0, 0)]
        );
    }

    #[test]
    fn body_transform_identity_is_noop() {
        let est = VelocityEstimate {
            frame: Frame::Sensor,
            velocity: Vec3::new(1.0, 2.0, 3.0),
            cov: Matrix3::identity() * 0.5,
            inlier_count: 12,
            total_count: 15,
            timestamp: 1.5,
        };
        let out = to_body_frame(&est, &RadarExtrinsics::identity());
        assert_eq!(out.frame, Frame::Body);
        assert_abs_diff_eq!(out.velocity, est.velocity, epsilon = 1e-15);
        assert_abs_diff_eq!(out.cov, est.cov, epsilon = 1e-15);
        assert_eq!(out.inlier_count, 12);
        assert_eq!(out.total_count, 15);
        assert_eq!(out.timestamp, 1.5);
    }

    #[test]
    fn body_transform_quarter_turn_permutes_axes() {
        let est = VelocityEstimate {
            frame: Frame::Sensor,
            velocity: Vec3::new(1.0, 0.0, 0.0),
            cov: Matrix3::from_diagonal(&Vec3::new(0.1, 0.2, 0.3)),
            inlier_count: 5,
            total_count: 5,
            timestamp: 0.0,
        };
        let extr = RadarExtrinsics {
            rotation: Rotation::exp(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)),
            translation: Vec3::zeros(),
        };
        let out = to_body_frame(&est, &extr);
        assert_abs_diff_eq!(out.velocity, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(
            out.cov,
            Matrix3::from_diagonal(&Vec3::new(0.2, 0.1, 0.3)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn body_transform_preserves_covariance_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let cov = a * a.transpose();
            let est = VelocityEstimate {
                frame: Frame::Sensor,
                velocity: Vec3::new(0.1, 0.2, 0.3),
                cov,
                inlier_count: 4,
                total_count: 4,
                timestamp: 0.0,
            };
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let extr = RadarExtrinsics {
                rotation: Rotation::exp(&axis),
                translation: Vec3::zeros(),
            };
            let out = to_body_frame(&est, &extr);
            assert_abs_diff_eq!(out.cov.trace(), cov.trace(), epsilon = 1e-10);
        }
    }

    #[test]
    fn lever_arm_correction_subtracts_rotational_component() {
        let est = VelocityEstimate {
            frame: Frame::Sensor,
            velocity: Vec3::new(1.0, 0.0, 0.0),
            cov: Matrix3::identity(),
            inlier_count: 3,
            total_count: 3,
            timestamp: 0.0,
        };
        let extr = RadarExtrinsics {
            rotation: Rotation::identity(),
            translation: Vec3::new(0.0, 0.5, 0.0),
        };
        let omega = Vec3::new(0.0, 0.0, 1.0);
        let out = to_body_frame_with_lever(&est, &extr, &omega);
        // ω × t = (-0.5, 0, 0); body velocity = v - ω×t.
        assert_abs_diff_eq!(out.velocity, Vec3::new(1.5, 0.0, 0.0), epsilon = 1e-12);
    }
}
