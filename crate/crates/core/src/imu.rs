//! IMU sample handling: interpolation, static initialization, and on-manifold
//! preintegration between keyframes.
//!
//! Preintegration summarizes the samples between two keyframes into relative
//! rotation/velocity/position deltas with a 15×15 covariance (error order
//! [δθ, δv, δp, δb_a, δb_g]) and bias Jacobians for first-order correction,
//! so the smoother never re-integrates raw samples when linearization points
//! move.

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smoother::NavState;
use crate::so3::{right_jacobian, right_jacobian_inv, skew, Rotation, Vec3};

/// One IMU sample: specific force and angular rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Measured specific force ã [m/s²].
    pub accel: Vec3,
    /// Measured angular velocity ω̃ [rad/s].
    pub gyro: Vec3,
}

/// Slowly varying accelerometer and gyroscope biases.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBias {
    pub accel: Vec3,
    pub gyro: Vec3,
}

/// Continuous-time IMU noise model plus the gravity vector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoiseModel {
    /// Accelerometer white-noise density [m/s²/√Hz].
    pub accel_noise_density: f64,
    /// Gyroscope white-noise density [rad/s/√Hz].
    pub gyro_noise_density: f64,
    /// Accelerometer bias random-walk density [m/s³/√Hz].
    pub accel_bias_walk: f64,
    /// Gyroscope bias random-walk density [rad/s²/√Hz].
    pub gyro_bias_walk: f64,
    /// Gravity in the world frame [m/s²].
    pub gravity: [f64; 3],
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        // Consumer-grade MEMS figures (datasheet order of magnitude).
        ImuNoiseModel {
            accel_noise_density: 2.3e-3,
            gyro_noise_density: 2.6e-4,
            accel_bias_walk: 1.0e-4,
            gyro_bias_walk: 2.0e-5,
            gravity: [0.0, 0.0, -9.81],
        }
    }
}

impl ImuNoiseModel {
    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::new(self.gravity[0], self.gravity[1], self.gravity[2])
    }

    /// Checks densities are positive and, unless `allow_nonstandard_gravity`,
    /// that ‖g‖ lies in the plausible terrestrial band [9.7, 9.9].
    pub fn validate(&self, allow_nonstandard_gravity: bool) -> Result<(), ImuError> {
        let positive = self.accel_noise_density > 0.0
            && self.gyro_noise_density > 0.0
            && self.accel_bias_walk > 0.0
            && self.gyro_bias_walk > 0.0;
        if !positive {
            return Err(ImuError::InvalidNoiseModel(
                "noise densities must be positive".into(),
            ));
        }
        let g = self.gravity_vec().norm();
        if !allow_nonstandard_gravity && !(9.7..=9.9).contains(&g) {
            return Err(ImuError::InvalidNoiseModel(format!(
                "gravity norm {g:.3} outside [9.7, 9.9]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("query time {t} outside sample span [{first}, {last}]")]
    OutOfRange { t: f64, first: f64, last: f64 },
    #[error("preintegration needs at least 2 samples, got {0}")]
    EmptyInterval(usize),
    #[error("sample timestamps not strictly increasing at index {0}")]
    NonMonotoneTime(usize),
    #[error("window is not static: accel variance {variance:.3e} > {threshold:.3e}")]
    NotStatic { variance: f64, threshold: f64 },
    #[error("mean specific force {0:.3} m/s² too small to define gravity")]
    DegenerateGravity(f64),
    #[error("invalid noise model: {0}")]
    InvalidNoiseModel(String),
}

/// Linear interpolation of accel and gyro at time `t` within the stream span.
pub fn interpolate(samples: &[ImuSample], t: f64) -> Result<ImuSample, ImuError> {
    let (first, last) = match (samples.first(), samples.last()) {
        (Some(f), Some(l)) => (f.timestamp, l.timestamp),
        _ => {
            return Err(ImuError::OutOfRange {
                t,
                first: f64::NAN,
                last: f64::NAN,
            })
        }
    };
    if t < first || t > last {
        return Err(ImuError::OutOfRange { t, first, last });
    }
    let idx = samples.partition_point(|s| s.timestamp < t);
    if samples[idx.min(samples.len() - 1)].timestamp == t {
        return Ok(samples[idx]);
    }
    let hi = &samples[idx];
    let lo = &samples[idx - 1];
    let alpha = (t - lo.timestamp) / (hi.timestamp - lo.timestamp);
    Ok(ImuSample {
        timestamp: t,
        accel: lo.accel + (hi.accel - lo.accel) * alpha,
        gyro: lo.gyro + (hi.gyro - lo.gyro) * alpha,
    })
}

/// Preintegrated IMU measurement between two keyframes.
///
/// Holds the relative deltas, the 15×15 covariance in error order
/// [δθ, δv, δp, δb_a, δb_g], the bias linearization point and the Jacobians
/// of the deltas with respect to it.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    pub delta_rot: Rotation,
    pub delta_vel: Vec3,
    pub delta_pos: Vec3,
    pub delta_t: f64,
    /// Bias the deltas were integrated with.
    pub bias_lin: ImuBias,
    pub cov: SMatrix<f64, 15, 15>,
    pub d_rot_d_bg: Matrix3<f64>,
    pub d_vel_d_ba: Matrix3<f64>,
    pub d_vel_d_bg: Matrix3<f64>,
    pub d_pos_d_ba: Matrix3<f64>,
    pub d_pos_d_bg: Matrix3<f64>,
}

/// Integrates a strictly increasing sample stream with zeroth-order hold
/// (left endpoint) per interval, propagating the error-state covariance and
/// the bias Jacobians alongside the deltas.
pub fn preintegrate(
    samples: &[ImuSample],
    bias: &ImuBias,
    noise: &ImuNoiseModel,
) -> Result<PreintegratedImu, ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::EmptyInterval(samples.len()));
    }

    let mut delta_rot = Rotation::identity();
    let mut delta_vel = Vec3::zeros();
    let mut delta_pos = Vec3::zeros();
    let mut delta_t = 0.0;
    let mut cov = SMatrix::<f64, 15, 15>::zeros();
    let mut j_rot_bg = Matrix3::zeros();
    let mut j_vel_ba = Matrix3::zeros();
    let mut j_vel_bg = Matrix3::zeros();
    let mut j_pos_ba = Matrix3::zeros();
    let mut j_pos_bg = Matrix3::zeros();

    let sq = |x: f64| x * x;
    let identity = Matrix3::identity();

    for k in 0..samples.len() - 1 {
        let dt = samples[k + 1].timestamp - samples[k].timestamp;
        if dt <= 0.0 {
            return Err(ImuError::NonMonotoneTime(k + 1));
        }
        let w = samples[k].gyro - bias.gyro;
        let a = samples[k].accel - bias.accel;
        let step = Rotation::exp(&(w * dt));
        let jr_step = right_jacobian(&(w * dt));
        let r = *delta_rot.matrix();
        let r_skew_a = r * skew(&a);

        // Error-state transition; rows/cols [δθ, δv, δp, δb_a, δb_g].
        let mut f = SMatrix::<f64, 15, 15>::identity();
        f.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&step.matrix().transpose());
        f.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-jr_step * dt));
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r_skew_a * dt));
        f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-r * dt));
        f.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r_skew_a * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(identity * dt));
        f.fixed_view_mut::<3, 3>(6, 9)
            .copy_from(&(-r * (0.5 * dt * dt)));

        cov = f * cov * f.transpose();

        // Additive noise. White-noise: discrete variance density²/dt mapped
        // through the input matrix; bias random walks accumulate density²·dt.
        let gyro_var = sq(noise.gyro_noise_density) / dt;
        let accel_var = sq(noise.accel_noise_density) / dt;
        let g_theta = jr_step * dt;
        let g_vel = r * dt;
        let g_pos = r * (0.5 * dt * dt);
        let add =
            |cov: &mut SMatrix<f64, 15, 15>, i: usize, j: usize, block: Matrix3<f64>| {
                let mut view = cov.fixed_view_mut::<3, 3>(i, j);
                view += block;
            };
        add(&mut cov, 0, 0, g_theta * g_theta.transpose() * gyro_var);
        add(&mut cov, 3, 3, g_vel * g_vel.transpose() * accel_var);
        add(&mut cov, 6, 6, g_pos * g_pos.transpose() * accel_var);
        let vp = g_vel * g_pos.transpose() * accel_var;
        add(&mut cov, 3, 6, vp);
        add(&mut cov, 6, 3, vp.transpose());
        add(&mut cov, 9, 9, identity * (sq(noise.accel_bias_walk) * dt));
        add(&mut cov, 12, 12, identity * (sq(noise.gyro_bias_walk) * dt));

        // Bias Jacobian recursion; position uses the pre-update velocity terms.
        j_pos_ba += j_vel_ba * dt - r * (0.5 * dt * dt);
        j_pos_bg += j_vel_bg * dt - r_skew_a * j_rot_bg * (0.5 * dt * dt);
        j_vel_ba -= r * dt;
        j_vel_bg -= r_skew_a * j_rot_bg * dt;
        j_rot_bg = step.matrix().transpose() * j_rot_bg - jr_step * dt;

        // Delta recursion with the pre-update rotation and velocity.
        delta_pos += delta_vel * dt + r * a * (0.5 * dt * dt);
        delta_vel += r * a * dt;
        delta_rot = delta_rot * step;
        delta_t += dt;
    }

    Ok(PreintegratedImu {
        delta_rot,
        delta_vel,
        delta_pos,
        delta_t,
        bias_lin: *bias,
        cov,
        d_rot_d_bg: j_rot_bg,
        d_vel_d_ba: j_vel_ba,
        d_vel_d_bg: j_vel_bg,
        d_pos_d_ba: j_pos_ba,
        d_pos_d_bg: j_pos_bg,
    })
}

impl PreintegratedImu {
    /// Deltas corrected to first order for a bias that moved away from the
    /// linearization point.
    pub fn corrected_deltas(&self, bias: &ImuBias) -> (Rotation, Vec3, Vec3) {
        let dbg = bias.gyro - self.bias_lin.gyro;
        let dba = bias.accel - self.bias_lin.accel;
        let rot = self.delta_rot * Rotation::exp(&(self.d_rot_d_bg * dbg));
        let vel = self.delta_vel + self.d_vel_d_ba * dba + self.d_vel_d_bg * dbg;
        let pos = self.delta_pos + self.d_pos_d_ba * dba + self.d_pos_d_bg * dbg;
        (rot, vel, pos)
    }

    /// Forward-propagates a state through this preintegrated segment.
    pub fn propagate(&self, state: &NavState, gravity: &Vec3) -> NavState {
        let (d_rot, d_vel, d_pos) = self.corrected_deltas(&state.bias());
        let dt = self.delta_t;
        NavState {
            rot: state.rot * d_rot,
            vel: state.vel + gravity * dt + state.rot.rotate(&d_vel),
            pos: state.pos
                + state.vel * dt
                + gravity * (0.5 * dt * dt)
                + state.rot.rotate(&d_pos),
            accel_bias: state.accel_bias,
            gyro_bias: state.gyro_bias,
            timestamp: state.timestamp + dt,
        }
    }
}

/// The 15-dimensional preintegrated IMU residual
/// [r_ΔR, r_Δv, r_Δp, r_Δb_a, r_Δb_g] between two keyframe states, with the
/// measured deltas first-order bias-corrected at `state_i`'s bias.
pub fn imu_residual(
    preint: &PreintegratedImu,
    state_i: &NavState,
    state_j: &NavState,
    gravity: &Vec3,
) -> SVector<f64, 15> {
    let (d_rot, d_vel, d_pos) = preint.corrected_deltas(&state_i.bias());
    let dt = preint.delta_t;
    let r_i_t = state_i.rot.inverse();

    let r_rot = (d_rot.inverse() * (r_i_t * state_j.rot)).log();
    let r_vel = r_i_t.rotate(&(state_j.vel - state_i.vel - gravity * dt)) - d_vel;
    let r_pos = r_i_t.rotate(
        &(state_j.pos - state_i.pos - state_i.vel * dt - gravity * (0.5 * dt * dt)),
    ) - d_pos;
    let r_ba = state_j.accel_bias - state_i.accel_bias;
    let r_bg = state_j.gyro_bias - state_i.gyro_bias;

    let mut r = SVector::<f64, 15>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_vel);
    r.fixed_rows_mut::<3>(6).copy_from(&r_pos);
    r.fixed_rows_mut::<3>(9).copy_from(&r_ba);
    r.fixed_rows_mut::<3>(12).copy_from(&r_bg);
    r
}

/// Analytic Jacobians of [`imu_residual`] with respect to the error states of
/// keyframes i and j (error order [δθ, δv, δp, δb_a, δb_g], rotation
/// perturbed on the right: R ← R·Exp(δθ)).
pub fn imu_residual_jacobians(
    preint: &PreintegratedImu,
    state_i: &NavState,
    state_j: &NavState,
    gravity: &Vec3,
) -> (SMatrix<f64, 15, 15>, SMatrix<f64, 15, 15>) {
    let dbg = state_i.gyro_bias - preint.bias_lin.gyro;
    let rot_corr = preint.d_rot_d_bg * dbg;
    let (d_rot, _, _) = preint.corrected_deltas(&state_i.bias());
    let dt = preint.delta_t;
    let r_i = *state_i.rot.matrix();
    let r_i_t = r_i.transpose();
    let r_j = *state_j.rot.matrix();

    let phi = (d_rot.inverse() * (state_i.rot.inverse() * state_j.rot)).log();
    let jr_inv_phi = right_jacobian_inv(&phi);
    // Log(Exp(-a)·Exp(φ)) ≈ φ − Jl⁻¹(φ)·a with Jl⁻¹(φ) = Jr⁻¹(−φ).
    let jl_inv_phi = right_jacobian_inv(&(-phi));

    let mut j_i = SMatrix::<f64, 15, 15>::zeros();
    let mut j_j = SMatrix::<f64, 15, 15>::zeros();

    // Rotation residual rows.
    j_i.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv_phi * r_j.transpose() * r_i));
    j_i.fixed_view_mut::<3, 3>(0, 12)
        .copy_from(&(-jl_inv_phi * right_jacobian(&rot_corr) * preint.d_rot_d_bg));
    j_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv_phi);

    // Velocity residual rows.
    let v_term = r_i_t * (state_j.vel - state_i.vel - gravity * dt);
    j_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&v_term));
    j_i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r_i_t));
    j_i.fixed_view_mut::<3, 3>(3, 9)
        .copy_from(&(-preint.d_vel_d_ba));
    j_i.fixed_view_mut::<3, 3>(3, 12)
        .copy_from(&(-preint.d_vel_d_bg));
    j_j.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_i_t);

    // Position residual rows.
    let p_term =
        r_i_t * (state_j.pos - state_i.pos - state_i.vel * dt - gravity * (0.5 * dt * dt));
    j_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&skew(&p_term));
    j_i.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-r_i_t * dt));
    j_i.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-r_i_t));
    j_i.fixed_view_mut::<3, 3>(6, 9)
        .copy_from(&(-preint.d_pos_d_ba));
    j_i.fixed_view_mut::<3, 3>(6, 12)
        .copy_from(&(-preint.d_pos_d_bg));
    j_j.fixed_view_mut::<3, 3>(6, 6).copy_from(&r_i_t);

    // Bias difference rows.
    let neg_i = -Matrix3::identity();
    j_i.fixed_view_mut::<3, 3>(9, 9).copy_from(&neg_i);
    j_i.fixed_view_mut::<3, 3>(12, 12).copy_from(&neg_i);
    j_j.fixed_view_mut::<3, 3>(9, 9)
        .copy_from(&Matrix3::identity());
    j_j.fixed_view_mut::<3, 3>(12, 12)
        .copy_from(&Matrix3::identity());

    (j_i, j_j)
}

/// True iff the max per-axis sample variance of the accelerometer over the
/// window exceeds the threshold.
pub fn detect_motion(window: &[ImuSample], accel_var_threshold: f64) -> bool {
    if window.len() < 2 {
        return false;
    }
    let n = window.len() as f64;
    let mean = window.iter().map(|s| s.accel).sum::<Vec3>() / n;
    let ss = window
        .iter()
        .map(|s| (s.accel - mean).component_mul(&(s.accel - mean)))
        .sum::<Vec3>();
    let var = ss / (n - 1.0);
    var.max() > accel_var_threshold
}

/// Static initialization from a window of motionless samples.
///
/// The mean specific force defines the measured gravity direction; a
/// Gram-Schmidt basis seeded with the world x-axis fixes a deterministic
/// (arbitrary) yaw. Returns the initial body-to-world rotation and biases.
pub fn static_initialize(
    window: &[ImuSample],
    noise: &ImuNoiseModel,
    accel_var_threshold: f64,
) -> Result<(Rotation, ImuBias), ImuError> {
    if detect_motion(window, accel_var_threshold) {
        let n = window.len() as f64;
        let mean = window.iter().map(|s| s.accel).sum::<Vec3>() / n;
        let var = window
            .iter()
            .map(|s| (s.accel - mean).component_mul(&(s.accel - mean)))
            .sum::<Vec3>()
            / (n - 1.0);
        return Err(ImuError::NotStatic {
            variance: var.max(),
            threshold: accel_var_threshold,
        });
    }
    let n = window.len() as f64;
    let mean_accel = window.iter().map(|s| s.accel).sum::<Vec3>() / n;
    let mean_gyro = window.iter().map(|s| s.gyro).sum::<Vec3>() / n;
    if mean_accel.norm() < 1.0 {
        return Err(ImuError::DegenerateGravity(mean_accel.norm()));
    }

    let gravity = noise.gravity_vec();
    let body_up = gram_schmidt_basis(&(mean_accel / mean_accel.norm()));
    let world_up = gram_schmidt_basis(&(-gravity / gravity.norm()));
    // Both bases map e_z to "up" in their frame; their composition takes the
    // body frame to the world frame.
    let r0 = Rotation::from_matrix_unchecked(world_up * body_up.transpose()).renormalized();

    let accel_bias = mean_accel - r0.inv_rotate(&(-gravity));
    Ok((
        r0,
        ImuBias {
            accel: accel_bias,
            gyro: mean_gyro,
        },
    ))
}

/// Orthonormal basis with the given unit vector as its third column, the
/// first column the x-axis projected orthogonal to it (Gram-Schmidt).
fn gram_schmidt_basis(up: &Vec3) -> Matrix3<f64> {
    let seed = if up.x.abs() > 1.0 - 1e-6 {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let x = (seed - up * seed.dot(up)).normalize();
    let y = up.cross(&x);
    Matrix3::from_columns(&[x, y, *up])
}
