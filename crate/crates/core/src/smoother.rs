//! Fixed-lag sliding-window smoother over navigation states.
//!
//! Keyframe states X = [R, p, v, b_a, b_g] are connected by preintegrated IMU
//! factors and constrained by body-frame velocity factors (Huber-robust).
//! States older than the lag are marginalized into a prior on the oldest
//! surviving keyframe via the Schur complement of the linearized system. The
//! factor graph is a chain, so the normal equations are block-tridiagonal and
//! solved exactly with a block Cholesky sweep.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};
use thiserror::Error;

use crate::dataset::{Trajectory, TrajectoryRecord};
use crate::imu::{
    imu_residual, imu_residual_jacobians, interpolate, preintegrate, ImuBias, ImuNoiseModel,
    ImuSample, PreintegratedImu,
};
use crate::radar::{Frame, VelocityEstimate};
use crate::so3::{right_jacobian_inv, skew, Rotation, Vec3};

const STATE_DIM: usize = 15;
type Mat15 = SMatrix<f64, 15, 15>;
type Vec15 = SVector<f64, 15>;

/// Per-keyframe navigation state.
#[derive(Debug, Clone, Copy)]
pub struct NavState {
    pub rot: Rotation,
    pub pos: Vec3,
    pub vel: Vec3,
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
    pub timestamp: f64,
}

impl NavState {
    pub fn origin(timestamp: f64) -> Self {
        NavState {
            rot: Rotation::identity(),
            pos: Vec3::zeros(),
            vel: Vec3::zeros(),
            accel_bias: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            timestamp,
        }
    }

    pub fn bias(&self) -> ImuBias {
        ImuBias {
            accel: self.accel_bias,
            gyro: self.gyro_bias,
        }
    }

    /// Applies an error-state increment [δθ, δv, δp, δb_a, δb_g]; the
    /// rotation update is on-manifold (right perturbation).
    pub fn retract(&self, delta: &Vec15) -> NavState {
        NavState {
            rot: self.rot * Rotation::exp(&delta.fixed_rows::<3>(0).into()),
            vel: self.vel + Vec3::from(delta.fixed_rows::<3>(3)),
            pos: self.pos + Vec3::from(delta.fixed_rows::<3>(6)),
            accel_bias: self.accel_bias + Vec3::from(delta.fixed_rows::<3>(9)),
            gyro_bias: self.gyro_bias + Vec3::from(delta.fixed_rows::<3>(12)),
            timestamp: self.timestamp,
        }
    }

    /// Error-state coordinates of `self` relative to `reference`, the inverse
    /// of [`NavState::retract`]: `reference.retract(&x.local_coordinates(&reference)) == x`.
    pub fn local_coordinates(&self, reference: &NavState) -> Vec15 {
        let mut d = Vec15::zeros();
        d.fixed_rows_mut::<3>(0)
            .copy_from(&(reference.rot.inverse() * self.rot).log());
        d.fixed_rows_mut::<3>(3).copy_from(&(self.vel - reference.vel));
        d.fixed_rows_mut::<3>(6).copy_from(&(self.pos - reference.pos));
        d.fixed_rows_mut::<3>(9)
            .copy_from(&(self.accel_bias - reference.accel_bias));
        d.fixed_rows_mut::<3>(12)
            .copy_from(&(self.gyro_bias - reference.gyro_bias));
        d
    }
}

/// Body-frame velocity measurement attached to one keyframe.
#[derive(Debug, Clone)]
pub struct BodyVelocityFactor {
    pub velocity: Vec3,
    pub cov: Matrix3<f64>,
    pub sensor_id: String,
    /// Inverse Cholesky factor of the covariance, cached for whitening.
    whitener: Matrix3<f64>,
}

impl BodyVelocityFactor {
    pub fn new(velocity: Vec3, cov: Matrix3<f64>, sensor_id: String) -> Option<Self> {
        let whitener = inverse_cholesky_factor3(&cov)?;
        Some(BodyVelocityFactor {
            velocity,
            cov,
            sensor_id,
            whitener,
        })
    }
}

/// Residual of a body-frame velocity factor: `Rᵀ·v − v_b`.
pub fn body_velocity_residual(state: &NavState, factor: &BodyVelocityFactor) -> Vec3 {
    state.rot.inv_rotate(&state.vel) - factor.velocity
}

/// Analytic Jacobians of the body-velocity residual with respect to the
/// rotation and velocity error states: `J_R = [Rᵀv]×`, `J_v = Rᵀ`.
pub fn body_velocity_jacobians(state: &NavState) -> (Matrix3<f64>, Matrix3<f64>) {
    let v_body = state.rot.inv_rotate(&state.vel);
    (skew(&v_body), state.rot.matrix().transpose())
}

/// Gaussian prior left behind by marginalization (or initialization),
/// anchored at a linearization state that is never updated afterwards.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    /// Linearization point; local coordinates are taken relative to it.
    pub lin: NavState,
    /// Square-root information A: the residual is `A·(X ⊖ lin) − rhs`.
    pub sqrt_info: Mat15,
    pub rhs: Vec15,
}

impl MarginalPrior {
    fn from_sigmas(lin: NavState, sigmas: &Vec15) -> Self {
        let mut a = Mat15::zeros();
        for i in 0..STATE_DIM {
            a[(i, i)] = 1.0 / sigmas[i];
        }
        MarginalPrior {
            lin,
            sqrt_info: a,
            rhs: Vec15::zeros(),
        }
    }

    /// The state that minimizes this prior alone.
    pub fn mean(&self) -> NavState {
        let delta = self
            .sqrt_info
            .lu()
            .solve(&self.rhs)
            .unwrap_or_else(Vec15::zeros);
        self.lin.retract(&delta)
    }

    fn residual(&self, state: &NavState) -> Vec15 {
        self.sqrt_info * state.local_coordinates(&self.lin) - self.rhs
    }

    fn jacobian(&self, state: &NavState) -> Mat15 {
        // d(local)/d(δ) is identity except for the rotation block.
        let phi: Vec3 = state.local_coordinates(&self.lin).fixed_rows::<3>(0).into();
        let mut d = Mat15::identity();
        d.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&right_jacobian_inv(&phi));
        self.sqrt_info * d
    }
}

/// Sliding-window configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Fixed lag [s]; states older than `newest − lag` are marginalized.
    pub lag: f64,
    /// Huber scale on the Mahalanobis-whitened velocity residual norm.
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub prior_rot_sigma: f64,
    pub prior_pos_sigma: f64,
    pub prior_vel_sigma: f64,
    pub prior_accel_bias_sigma: f64,
    pub prior_gyro_bias_sigma: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            lag: 5.0,
            huber_delta: 1.345,
            max_iterations: 10,
            relative_cost_tolerance: 1e-6,
            prior_rot_sigma: 1e-3,
            prior_pos_sigma: 1e-4,
            prior_vel_sigma: 0.1,
            prior_accel_bias_sigma: 0.05,
            prior_gyro_bias_sigma: 0.01,
        }
    }
}

impl WindowConfig {
    fn prior_sigmas(&self) -> Vec15 {
        let mut s = Vec15::zeros();
        for i in 0..3 {
            s[i] = self.prior_rot_sigma;
            s[3 + i] = self.prior_vel_sigma;
            s[6 + i] = self.prior_pos_sigma;
            s[9 + i] = self.prior_accel_bias_sigma;
            s[12 + i] = self.prior_gyro_bias_sigma;
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum SmootherError {
    #[error("keyframe timestamp {t} precedes previous keyframe {last}")]
    OutOfOrder { t: f64, last: f64 },
    #[error("no IMU samples spanning [{from}, {to}] (buffer covers [{have_from}, {have_to}])")]
    MissingImu {
        from: f64,
        to: f64,
        have_from: f64,
        have_to: f64,
    },
    #[error("smoother not initialized")]
    NotInitialized,
    #[error("solver failure: {0}")]
    SolverFailure(String),
}

struct Keyframe {
    id: u64,
    state: NavState,
    /// Segment from the previous in-window keyframe; `None` for the oldest.
    preint: Option<PreintegratedImu>,
    /// Cached inverse Cholesky factor of the preintegration covariance.
    imu_whitener: Option<Mat15>,
    velocity_factors: Vec<BodyVelocityFactor>,
}

/// Fixed-lag smoother fusing preintegrated IMU factors and body-frame radar
/// velocity factors. Single logical owner of the graph; insertion and
/// optimization are serialized.
pub struct FixedLagSmoother {
    config: WindowConfig,
    noise: ImuNoiseModel,
    gravity: Vec3,
    window: VecDeque<Keyframe>,
    prior: Option<MarginalPrior>,
    /// Time-ordered samples not yet consumed by a keyframe interval. Kept
    /// trimmed, so front drains stay cheap.
    imu_buffer: Vec<ImuSample>,
    history: Vec<TrajectoryRecord>,
    next_id: u64,
}

impl FixedLagSmoother {
    pub fn new(config: WindowConfig, noise: ImuNoiseModel) -> Self {
        let gravity = noise.gravity_vec();
        FixedLagSmoother {
            config,
            noise,
            gravity,
            window: VecDeque::new(),
            prior: None,
            imu_buffer: Vec::new(),
            history: Vec::new(),
            next_id: 0,
        }
    }

    /// Feeds one IMU sample; samples must arrive in time order.
    pub fn push_imu(&mut self, sample: ImuSample) {
        if let Some(last) = self.imu_buffer.last() {
            if sample.timestamp <= last.timestamp {
                return;
            }
        }
        self.imu_buffer.push(sample);
    }

    /// Anchors the first keyframe with a diagonal prior around `state`.
    pub fn initialize(&mut self, state: NavState) {
        self.prior = Some(MarginalPrior::from_sigmas(
            state,
            &self.config.prior_sigmas(),
        ));
        self.window.clear();
        self.window.push_back(Keyframe {
            id: self.next_id,
            state,
            preint: None,
            imu_whitener: None,
            velocity_factors: Vec::new(),
        });
        self.next_id += 1;
        self.drop_consumed_imu(state.timestamp);
    }

    pub fn is_initialized(&self) -> bool {
        !self.window.is_empty()
    }

    pub fn latest_state(&self) -> Option<&NavState> {
        self.window.back().map(|k| &k.state)
    }

    pub fn window_states(&self) -> Vec<NavState> {
        self.window.iter().map(|k| k.state).collect()
    }

    /// Forward-propagates the newest keyframe state to time `t` through the
    /// buffered IMU samples (used for radar initial guesses).
    pub fn predict_at(&self, t: f64) -> Result<NavState, SmootherError> {
        let last = self.window.back().ok_or(SmootherError::NotInitialized)?;
        if t <= last.state.timestamp {
            return Ok(last.state);
        }
        let segment = self.imu_segment(last.state.timestamp, t)?;
        let preint = preintegrate(&segment, &last.state.bias(), &self.noise)
            .map_err(|e| SmootherError::SolverFailure(e.to_string()))?;
        Ok(preint.propagate(&last.state, &self.gravity))
    }

    /// Creates a keyframe at `timestamp`, connected to the previous keyframe
    /// by a preintegrated IMU factor and optionally carrying a body-frame
    /// velocity factor. A timestamp equal to the newest keyframe's attaches
    /// the factor to that keyframe instead of creating an empty interval.
    pub fn add_keyframe(
        &mut self,
        timestamp: f64,
        velocity: Option<&VelocityEstimate>,
        sensor_id: &str,
    ) -> Result<u64, SmootherError> {
        if self.window.is_empty() {
            return Err(SmootherError::NotInitialized);
        }
        let last_t = self.window.back().unwrap().state.timestamp;
        if timestamp < last_t {
            return Err(SmootherError::OutOfOrder {
                t: timestamp,
                last: last_t,
            });
        }
        if timestamp == last_t {
            let id = self.window.back().unwrap().id;
            if let Some(est) = velocity {
                self.attach_velocity(self.window.len() - 1, est, sensor_id)?;
            }
            return Ok(id);
        }

        let segment = self.imu_segment(last_t, timestamp)?;
        let last_state = self.window.back().unwrap().state;
        let preint = preintegrate(&segment, &last_state.bias(), &self.noise)
            .map_err(|e| SmootherError::SolverFailure(e.to_string()))?;
        let whitener = inverse_cholesky_factor15(&preint.cov).ok_or_else(|| {
            SmootherError::SolverFailure("preintegration covariance not positive definite".into())
        })?;
        let state = preint.propagate(&last_state, &self.gravity);

        let id = self.next_id;
        self.next_id += 1;
        self.window.push_back(Keyframe {
            id,
            state,
            preint: Some(preint),
            imu_whitener: Some(whitener),
            velocity_factors: Vec::new(),
        });
        if let Some(est) = velocity {
            self.attach_velocity(self.window.len() - 1, est, sensor_id)?;
        }
        self.drop_consumed_imu(timestamp);
        Ok(id)
    }

    fn attach_velocity(
        &mut self,
        index: usize,
        est: &VelocityEstimate,
        sensor_id: &str,
    ) -> Result<(), SmootherError> {
        debug_assert_eq!(est.frame, Frame::Body);
        let factor = BodyVelocityFactor::new(est.velocity, est.cov, sensor_id.to_string())
            .ok_or_else(|| {
                SmootherError::SolverFailure("velocity covariance not positive definite".into())
            })?;
        self.window[index].velocity_factors.push(factor);
        Ok(())
    }

    fn imu_segment(&self, from: f64, to: f64) -> Result<Vec<ImuSample>, SmootherError> {
        let samples = self.imu_buffer.as_slice();
        let missing = |samples: &[ImuSample]| SmootherError::MissingImu {
            from,
            to,
            have_from: samples.first().map_or(f64::NAN, |s| s.timestamp),
            have_to: samples.last().map_or(f64::NAN, |s| s.timestamp),
        };
        let start = interpolate(samples, from).map_err(|_| missing(samples))?;
        let end = interpolate(samples, to).map_err(|_| missing(samples))?;
        let mut segment = Vec::with_capacity(8);
        segment.push(start);
        for s in samples {
            if s.timestamp > from && s.timestamp < to {
                segment.push(*s);
            }
        }
        segment.push(end);
        Ok(segment)
    }

    /// Drops buffered IMU samples that can no longer be needed, keeping one
    /// sample at or before `t` so the next boundary can be interpolated.
    fn drop_consumed_imu(&mut self, t: f64) {
        let keep_from = self
            .imu_buffer
            .partition_point(|s| s.timestamp <= t)
            .saturating_sub(1);
        if keep_from > 0 {
            self.imu_buffer.drain(..keep_from);
        }
    }

    /// Iterative Gauss-Newton/Levenberg-Marquardt over all in-window states.
    /// Returns the optimized states, oldest first.
    pub fn optimize_window(&mut self) -> Result<Vec<NavState>, SmootherError> {
        if self.window.len() < 2 {
            return Ok(self.window_states());
        }
        let mut states = self.window_states();
        let mut cost = self
            .total_cost(&states)
            .ok_or_else(|| SmootherError::SolverFailure("non-finite cost".into()))?;
        let mut lambda = 1e-8;

        for _ in 0..self.config.max_iterations {
            let (diag, upper, grad) = self.assemble_normal_equations(&states);

            let mut accepted = false;
            for _ in 0..12 {
                let damped: Vec<Mat15> = diag
                    .iter()
                    .map(|d| {
                        let mut m = *d;
                        for i in 0..STATE_DIM {
                            m[(i, i)] += lambda * d[(i, i)].max(1e-12);
                        }
                        m
                    })
                    .collect();
                let rhs: Vec<Vec15> = grad.iter().map(|g| -g).collect();
                let Some(step) = solve_block_tridiagonal(&damped, &upper, &rhs) else {
                    lambda = (lambda * 10.0).max(1e-8);
                    if lambda > 1e12 {
                        return Err(SmootherError::SolverFailure(
                            "normal equations indefinite".into(),
                        ));
                    }
                    continue;
                };
                let candidate: Vec<NavState> = states
                    .iter()
                    .zip(&step)
                    .map(|(s, d)| s.retract(d))
                    .collect();
                match self.total_cost(&candidate) {
                    Some(c) if c <= cost => {
                        let improvement = (cost - c) / cost.max(1e-300);
                        states = candidate;
                        cost = c;
                        lambda = (lambda / 10.0).max(1e-12);
                        accepted = true;
                        if improvement < self.config.relative_cost_tolerance {
                            for (kf, s) in self.window.iter_mut().zip(&states) {
                                kf.state = *s;
                            }
                            return Ok(states);
                        }
                        break;
                    }
                    Some(_) => {
                        lambda = (lambda * 10.0).max(1e-8);
                    }
                    None => {
                        return Err(SmootherError::SolverFailure(
                            "non-finite cost during step".into(),
                        ))
                    }
                }
            }
            if !accepted {
                break;
            }
        }

        for (kf, s) in self.window.iter_mut().zip(&states) {
            kf.state = *s;
        }
        Ok(states)
    }

    /// Total robustified cost at the given state assignment.
    fn total_cost(&self, states: &[NavState]) -> Option<f64> {
        let mut cost = 0.0;
        if let Some(prior) = &self.prior {
            cost += prior.residual(&states[0]).norm_squared();
        }
        for (k, kf) in self.window.iter().enumerate() {
            if let (Some(preint), Some(wh)) = (&kf.preint, &kf.imu_whitener) {
                let r = imu_residual(preint, &states[k - 1], &states[k], &self.gravity);
                cost += (wh * r).norm_squared();
            }
            for f in &kf.velocity_factors {
                let r = f.whitener * body_velocity_residual(&states[k], f);
                cost += huber_rho(r.norm(), self.config.huber_delta);
            }
        }
        cost.is_finite().then_some(cost)
    }

    /// Assembles the block-tridiagonal Gauss-Newton system at `states`.
    #[allow(clippy::type_complexity)]
    fn assemble_normal_equations(
        &self,
        states: &[NavState],
    ) -> (Vec<Mat15>, Vec<Mat15>, Vec<Vec15>) {
        let n = states.len();
        let mut diag = vec![Mat15::zeros(); n];
        let mut upper = vec![Mat15::zeros(); n.saturating_sub(1)];
        let mut grad = vec![Vec15::zeros(); n];

        if let Some(prior) = &self.prior {
            let r = prior.residual(&states[0]);
            let j = prior.jacobian(&states[0]);
            diag[0] += j.transpose() * j;
            grad[0] += j.transpose() * r;
        }

        for (k, kf) in self.window.iter().enumerate() {
            if let (Some(preint), Some(wh)) = (&kf.preint, &kf.imu_whitener) {
                let r = wh * imu_residual(preint, &states[k - 1], &states[k], &self.gravity);
                let (ji, jj) =
                    imu_residual_jacobians(preint, &states[k - 1], &states[k], &self.gravity);
                let ji = wh * ji;
                let jj = wh * jj;
                diag[k - 1] += ji.transpose() * ji;
                diag[k] += jj.transpose() * jj;
                upper[k - 1] += ji.transpose() * jj;
                grad[k - 1] += ji.transpose() * r;
                grad[k] += jj.transpose() * r;
            }
            for f in &kf.velocity_factors {
                let (r, j) = linearize_velocity(f, &states[k], self.config.huber_delta);
                diag[k] += j.transpose() * j;
                grad[k] += j.transpose() * r;
            }
        }
        (diag, upper, grad)
    }

    /// Marginalizes every keyframe strictly older than `cutoff` into a prior
    /// on the oldest surviving keyframe (Schur complement at the current
    /// estimates). No-op when nothing is old enough.
    pub fn marginalize_old(&mut self, cutoff: f64) -> Option<MarginalPrior> {
        let mut m = 0;
        while m + 1 < self.window.len() && self.window[m].state.timestamp < cutoff {
            m += 1;
        }
        if m == 0 {
            return self.prior.clone();
        }

        // Dense linear system over states 0..=m: the prior, the IMU chain
        // inside the marginalized set, the boundary IMU factor (m-1, m), and
        // velocity factors on removed states. Factors on the survivor other
        // than the boundary IMU factor stay in the graph.
        let dim = (m + 1) * STATE_DIM;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        let states = self.window_states();

        if let Some(prior) = &self.prior {
            let r = prior.residual(&states[0]);
            let j = prior.jacobian(&states[0]);
            accumulate_dense(&mut h, &mut g, 0, &j, &r);
        }
        for k in 1..=m {
            let kf = &self.window[k];
            if let (Some(preint), Some(wh)) = (&kf.preint, &kf.imu_whitener) {
                let r = wh * imu_residual(preint, &states[k - 1], &states[k], &self.gravity);
                let (ji, jj) =
                    imu_residual_jacobians(preint, &states[k - 1], &states[k], &self.gravity);
                let ji = wh * ji;
                let jj = wh * jj;
                accumulate_dense_pair(&mut h, &mut g, k - 1, k, &ji, &jj, &r);
            }
        }
        for k in 0..m {
            for f in &self.window[k].velocity_factors {
                let (r, j) = linearize_velocity(f, &states[k], self.config.huber_delta);
                accumulate_dense(&mut h, &mut g, k, &j, &r);
            }
        }

        // Schur complement onto the survivor block.
        let md = m * STATE_DIM;
        let h_mm = h.view((0, 0), (md, md)).into_owned();
        let h_mk = h.view((0, md), (md, STATE_DIM)).into_owned();
        let h_kk = h.view((md, md), (STATE_DIM, STATE_DIM)).into_owned();
        let g_m = g.rows(0, md).into_owned();
        let g_k = g.rows(md, STATE_DIM).into_owned();

        let chol = h_mm
            .clone()
            .cholesky()
            .or_else(|| (h_mm + DMatrix::identity(md, md) * 1e-12).cholesky());
        let (lambda, eta) = match chol {
            Some(c) => {
                let x_hmk = c.solve(&h_mk);
                let x_gm = c.solve(&g_m);
                (
                    h_kk - h_mk.transpose() * x_hmk,
                    -(g_k - h_mk.transpose() * x_gm),
                )
            }
            None => (h_kk, -g_k),
        };

        let lin = states[m];
        let prior = marginal_prior_from_information(lin, &lambda, &eta);

        // Retire the marginalized keyframes into the exported history.
        for _ in 0..m {
            let kf = self.window.pop_front().expect("m < window length");
            self.history.push(TrajectoryRecord {
                timestamp: kf.state.timestamp,
                position: kf.state.pos,
                rotation: kf.state.rot.to_unit_quaternion(),
            });
        }
        let survivor = self.window.front_mut().expect("survivor remains");
        survivor.preint = None;
        survivor.imu_whitener = None;
        self.prior = Some(prior.clone());
        Some(prior)
    }

    /// Timestamped poses of every keyframe ever optimized: the marginalized
    /// history plus the current window, each at its final in-window estimate.
    pub fn export_trajectory(&self) -> Trajectory {
        let mut records = self.history.clone();
        for kf in &self.window {
            records.push(TrajectoryRecord {
                timestamp: kf.state.timestamp,
                position: kf.state.pos,
                rotation: kf.state.rot.to_unit_quaternion(),
            });
        }
        for pair in records.windows(2) {
            assert!(
                pair[0].timestamp <= pair[1].timestamp,
                "keyframe timestamps must be monotone"
            );
        }
        Trajectory { records }
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }
}

/// Huber loss on a whitened residual norm.
fn huber_rho(s: f64, delta: f64) -> f64 {
    if s <= delta {
        s * s
    } else {
        2.0 * delta * s - delta * delta
    }
}

/// Whitened, robust-weighted linearization of a velocity factor. Columns
/// follow the error-state order; only the δθ and δv blocks are nonzero.
fn linearize_velocity(
    factor: &BodyVelocityFactor,
    state: &NavState,
    huber_delta: f64,
) -> (SVector<f64, 3>, SMatrix<f64, 3, 15>) {
    let r = factor.whitener * body_velocity_residual(state, factor);
    let (j_rot, j_vel) = body_velocity_jacobians(state);
    let mut j = SMatrix::<f64, 3, 15>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(factor.whitener * j_rot));
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(factor.whitener * j_vel));
    let s = r.norm();
    let w = if s <= huber_delta { 1.0 } else { huber_delta / s };
    let sw = w.sqrt();
    (r * sw, j * sw)
}

fn accumulate_dense<const R: usize>(
    h: &mut DMatrix<f64>,
    g: &mut DVector<f64>,
    block: usize,
    j: &SMatrix<f64, R, 15>,
    r: &SVector<f64, R>,
) {
    let o = block * STATE_DIM;
    let jtj = j.transpose() * j;
    let jtr = j.transpose() * r;
    for a in 0..STATE_DIM {
        for b in 0..STATE_DIM {
            h[(o + a, o + b)] += jtj[(a, b)];
        }
        g[o + a] += jtr[a];
    }
}

fn accumulate_dense_pair(
    h: &mut DMatrix<f64>,
    g: &mut DVector<f64>,
    bi: usize,
    bj: usize,
    ji: &Mat15,
    jj: &Mat15,
    r: &Vec15,
) {
    let oi = bi * STATE_DIM;
    let oj = bj * STATE_DIM;
    let hii = ji.transpose() * ji;
    let hij = ji.transpose() * jj;
    let hjj = jj.transpose() * jj;
    let gi = ji.transpose() * r;
    let gj = jj.transpose() * r;
    for a in 0..STATE_DIM {
        for b in 0..STATE_DIM {
            h[(oi + a, oi + b)] += hii[(a, b)];
            h[(oi + a, oj + b)] += hij[(a, b)];
            h[(oj + a, oi + b)] += hij[(b, a)];
            h[(oj + a, oj + b)] += hjj[(a, b)];
        }
        g[oi + a] += gi[a];
        g[oj + a] += gj[a];
    }
}

/// Builds a square-root prior from an information pair (Λ, η): the residual
/// `Lᵀδ − L⁻¹η` reproduces the quadratic `½δᵀΛδ − ηᵀδ` up to a constant.
fn marginal_prior_from_information(
    lin: NavState,
    lambda: &DMatrix<f64>,
    eta: &DVector<f64>,
) -> MarginalPrior {
    debug_assert_eq!(lambda.nrows(), STATE_DIM);
    // Symmetrize before factoring; Schur complements accumulate asymmetry.
    let sym = (lambda + lambda.transpose()) * 0.5;
    if let Some(chol) = sym.clone().cholesky() {
        let l = chol.l();
        let mut sqrt_info = Mat15::zeros();
        for a in 0..STATE_DIM {
            for b in 0..STATE_DIM {
                sqrt_info[(a, b)] = l[(b, a)];
            }
        }
        let rhs_d = l
            .solve_lower_triangular(eta)
            .unwrap_or_else(|| DVector::zeros(STATE_DIM));
        let mut rhs = Vec15::zeros();
        for a in 0..STATE_DIM {
            rhs[a] = rhs_d[a];
        }
        return MarginalPrior {
            lin,
            sqrt_info,
            rhs,
        };
    }
    // PSD fallback: eigendecompose and clamp negative curvature.
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut sqrt_info = Mat15::zeros();
    let mut rhs = Vec15::zeros();
    for k in 0..STATE_DIM {
        let ev = eig.eigenvalues[k].max(0.0);
        if ev <= 1e-12 {
            continue;
        }
        let s = ev.sqrt();
        let q = eig.eigenvectors.column(k);
        for b in 0..STATE_DIM {
            sqrt_info[(k, b)] = s * q[b];
        }
        rhs[k] = q.dot(eta) / s;
    }
    MarginalPrior {
        lin,
        sqrt_info,
        rhs,
    }
}

/// Inverse of the lower Cholesky factor of a 3×3 covariance (the whitener).
fn inverse_cholesky_factor3(cov: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    let chol = sym
        .cholesky()
        .or_else(|| (sym + Matrix3::identity() * 1e-15).cholesky())?;
    chol.l().solve_lower_triangular(&Matrix3::identity())
}

/// Inverse of the lower Cholesky factor of a 15×15 covariance.
fn inverse_cholesky_factor15(cov: &Mat15) -> Option<Mat15> {
    let sym = (cov + cov.transpose()) * 0.5;
    let mut jitter = 0.0;
    for _ in 0..4 {
        let candidate = sym + Mat15::identity() * jitter;
        if let Some(chol) = candidate.cholesky() {
            return chol.l().solve_lower_triangular(&Mat15::identity());
        }
        jitter = if jitter == 0.0 { 1e-18 } else { jitter * 1e3 };
    }
    None
}

/// Solves a symmetric positive-definite block-tridiagonal system with block
/// Cholesky (Thomas) elimination. `upper[i]` couples blocks i and i+1.
fn solve_block_tridiagonal(
    diag: &[Mat15],
    upper: &[Mat15],
    rhs: &[Vec15],
) -> Option<Vec<Vec15>> {
    let n = diag.len();
    debug_assert_eq!(upper.len(), n.saturating_sub(1));
    debug_assert_eq!(rhs.len(), n);

    let mut l_factors: Vec<Mat15> = Vec::with_capacity(n);
    let mut w_factors: Vec<Mat15> = Vec::with_capacity(n.saturating_sub(1));
    let mut y: Vec<Vec15> = Vec::with_capacity(n);

    for i in 0..n {
        let s = if i == 0 {
            diag[0]
        } else {
            let w = &w_factors[i - 1];
            diag[i] - w.transpose() * w
        };
        let chol = s.cholesky()?;
        let l = chol.l();
        if i + 1 < n {
            w_factors.push(l.solve_lower_triangular(&upper[i])?);
        }
        let b = if i == 0 {
            rhs[0]
        } else {
            rhs[i] - w_factors[i - 1].transpose() * y[i - 1]
        };
        y.push(l.solve_lower_triangular(&b)?);
        l_factors.push(l);
    }

    let mut x = vec![Vec15::zeros(); n];
    for i in (0..n).rev() {
        let b = if i + 1 < n {
            y[i] - w_factors[i] * x[i + 1]
        } else {
            y[i]
        };
        x[i] = l_factors[i]
            .transpose()
            .solve_upper_triangular(&b)?;
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> NavState {
        NavState {
            rot: Rotation::exp(&Vec3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            )),
            vel: Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
            pos: Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
            accel_bias: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            timestamp: 0.0,
        }
    }

    #[test]
    fn velocity_residual_zero_when_consistent() {
        let state = NavState {
            vel: Vec3::new(1.0, 2.0, 3.0),
            ..NavState::origin(0.0)
        };
        let f = BodyVelocityFactor::new(
            Vec3::new(1.0, 2.0, 3.0),
            Matrix3::identity(),
            "horizontal".into(),
        )
        .unwrap();
        assert_abs_diff_eq!(body_velocity_residual(&state, &f), Vec3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn velocity_residual_quarter_turn_case() {
        let state = NavState {
            rot: Rotation::exp(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)),
            vel: Vec3::new(1.0, 0.0, 0.0),
            ..NavState::origin(0.0)
        };
        let f = BodyVelocityFactor::new(
            Vec3::new(0.0, -1.0, 0.0),
            Matrix3::identity(),
            "horizontal".into(),
        )
        .unwrap();
        assert_abs_diff_eq!(body_velocity_residual(&state, &f), Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn velocity_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let f = BodyVelocityFactor::new(
            Vec3::new(0.3, -0.1, 0.2),
            Matrix3::identity(),
            "horizontal".into(),
        )
        .unwrap();
        let h = 1e-7;
        for _ in 0..100 {
            let state = random_state(&mut rng);
            let (j_rot, j_vel) = body_velocity_jacobians(&state);
            // J_R must equal [Rᵀv]× exactly by construction.
            assert_abs_diff_eq!(
                j_rot,
                skew(&state.rot.inv_rotate(&state.vel)),
                epsilon = 1e-15
            );
            for dim in 0..6 {
                let mut dp = Vec15::zeros();
                dp[dim] = h;
                let rp = body_velocity_residual(&state.retract(&dp), &f);
                let rm = body_velocity_residual(&state.retract(&(-dp)), &f);
                let fd = (rp - rm) / (2.0 * h);
                let analytic = if dim < 3 {
                    j_rot.column(dim).into_owned()
                } else {
                    j_vel.column(dim - 3).into_owned()
                };
                assert!(
                    (fd - analytic).norm() < 1e-6,
                    "dim {dim}: fd {fd:?} vs {analytic:?}"
                );
            }
        }
    }

    #[test]
    fn retract_and_local_coordinates_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..50 {
            let a = random_state(&mut rng);
            let mut delta = Vec15::zeros();
            for i in 0..15 {
                delta[i] = rng.random_range(-0.2..0.2);
            }
            let b = a.retract(&delta);
            let back = b.local_coordinates(&a);
            assert!((back - delta).norm() < 1e-10);
        }
    }

    #[test]
    fn block_tridiagonal_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for n in [1usize, 2, 5, 9] {
            // Random SPD block-tridiagonal system.
            let mut diag = Vec::new();
            let mut upper = Vec::new();
            let mut rhs = Vec::new();
            for i in 0..n {
                let a = Mat15::from_fn(|_, _| rng.random_range(-0.3..0.3));
                diag.push(a * a.transpose() + Mat15::identity() * 8.0);
                rhs.push(Vec15::from_fn(|_, _| rng.random_range(-1.0..1.0)));
                if i + 1 < n {
                    upper.push(Mat15::from_fn(|_, _| rng.random_range(-0.3..0.3)));
                }
            }
            let x = solve_block_tridiagonal(&diag, &upper, &rhs).expect("solvable");

            let dim = n * STATE_DIM;
            let mut dense = DMatrix::<f64>::zeros(dim, dim);
            let mut b = DVector::<f64>::zeros(dim);
            for i in 0..n {
                for a in 0..STATE_DIM {
                    for c in 0..STATE_DIM {
                        dense[(i * 15 + a, i * 15 + c)] = diag[i][(a, c)];
                        if i + 1 < n {
                            dense[(i * 15 + a, (i + 1) * 15 + c)] = upper[i][(a, c)];
                            dense[((i + 1) * 15 + c, i * 15 + a)] = upper[i][(a, c)];
                        }
                    }
                    b[i * 15 + a] = rhs[i][a];
                }
            }
            let x_dense = dense.cholesky().unwrap().solve(&b);
            for i in 0..n {
                for a in 0..STATE_DIM {
                    assert_abs_diff_eq!(x[i][a], x_dense[i * 15 + a], epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn huber_bounds_single_factor_gradient() {
        // The robust-weighted whitened residual norm (which drives the
        // gradient) must saturate at the Huber delta for adversarial values.
        let delta = 1.345;
        let cov = Matrix3::from_diagonal(&Vec3::new(0.01, 0.04, 0.09));
        let state = NavState {
            vel: Vec3::new(0.5, 0.0, 0.0),
            ..NavState::origin(0.0)
        };
        for magnitude in [1.0, 10.0, 100.0, 1e4] {
            let f = BodyVelocityFactor::new(
                Vec3::new(magnitude, -magnitude, magnitude),
                cov,
                "horizontal".into(),
            )
            .unwrap();
            let (rw, _) = linearize_velocity(&f, &state, delta);
            let r = f.whitener * body_velocity_residual(&state, &f);
            let s = r.norm();
            let w = if s <= delta { 1.0 } else { delta / s };
            // Gradient magnitude scales with w·s = min(s, delta).
            assert!(w * s <= delta + 1e-12);
            assert_abs_diff_eq!(rw.norm(), w.sqrt() * s, epsilon = 1e-9);
        }
    }

    #[test]
    fn prior_mean_recovers_anchor() {
        let state = NavState {
            pos: Vec3::new(1.0, -2.0, 0.5),
            ..NavState::origin(3.0)
        };
        let prior = MarginalPrior::from_sigmas(state, &Vec15::from_element(0.1));
        let mean = prior.mean();
        assert_abs_diff_eq!(mean.pos, state.pos, epsilon = 1e-12);
        assert!(mean.rot.angle_to(&state.rot) < 1e-12);
    }
}
