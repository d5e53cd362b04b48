//! End-to-end pipeline: static initialization, per-scan velocity estimation,
//! keyframing, windowed optimization, and marginalization.

use thiserror::Error;

use crate::config::PipelineConfig;
use crate::dataset::{Dataset, Trajectory};
use crate::imu::{detect_motion, static_initialize, ImuSample};
use crate::radar::{
    estimate_sensor_velocity, to_body_frame, to_body_frame_with_lever, RadarScan, VelocityError,
};
use crate::smoother::{FixedLagSmoother, NavState, SmootherError};
use crate::so3::Vec3;

/// Which radar streams feed the smoother.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RadarSelection {
    /// Every stream in the dataset.
    All,
    /// Only the named sensors.
    Only(Vec<String>),
}

impl RadarSelection {
    fn accepts(&self, sensor_id: &str) -> bool {
        match self {
            RadarSelection::All => true,
            RadarSelection::Only(ids) => ids.iter().any(|id| id == sensor_id),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("initialization failed: {0}")]
    InitializationFailed(String),
    #[error("no radar scans selected (selection matches none of the dataset streams)")]
    NoRadarStreams,
    #[error("keyframe at t={t} ({sensor_id}): {source}")]
    Smoother {
        t: f64,
        sensor_id: String,
        source: SmootherError,
    },
}

/// Per-run bookkeeping for logs and tests.
#[derive(Debug, Clone, Default)]
pub struct PipelineStats {
    pub keyframes: usize,
    pub velocity_factors: usize,
    /// Scans that produced a keyframe without a velocity factor.
    pub velocity_dropouts: usize,
    /// Scans before the initialization instant, never processed.
    pub scans_before_init: usize,
    pub initialization_time: f64,
}

/// Runs the full pipeline on a dataset and returns the estimated trajectory.
///
/// Scans from the selected radars are consumed in timestamp order; each
/// successful velocity estimate becomes a keyframe with an IMU factor and a
/// body-velocity factor, failed estimates contribute IMU-only keyframes, and
/// the window is optimized and re-marginalized after every insertion.
pub fn run_pipeline(
    dataset: &Dataset,
    config: &PipelineConfig,
    selection: &RadarSelection,
) -> Result<(Trajectory, PipelineStats), PipelineError> {
    let mut scans: Vec<&RadarScan> = dataset
        .radar
        .iter()
        .filter(|(id, _)| selection.accepts(id))
        .flat_map(|(_, s)| s.iter())
        .collect();
    if scans.is_empty() {
        return Err(PipelineError::NoRadarStreams);
    }
    scans.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.sensor_id.cmp(&b.sensor_id))
    });

    let (init_time, init_state) = initialize_static(&dataset.imu, config)?;

    let mut smoother = FixedLagSmoother::new(config.smoother.clone(), config.imu);
    smoother.initialize(init_state);

    let mut stats = PipelineStats {
        initialization_time: init_time,
        ..PipelineStats::default()
    };
    let mut imu_cursor = 0usize;
    let feed_imu_until = |smoother: &mut FixedLagSmoother, t: f64, cursor: &mut usize| {
        while *cursor < dataset.imu.len() {
            let s = dataset.imu[*cursor];
            smoother.push_imu(s);
            *cursor += 1;
            if s.timestamp > t {
                break;
            }
        }
    };
    // Preload coverage for the initialization instant.
    feed_imu_until(&mut smoother, init_time, &mut imu_cursor);

    for scan in scans {
        let t = scan.timestamp;
        if t < init_time {
            stats.scans_before_init += 1;
            continue;
        }
        feed_imu_until(&mut smoother, t, &mut imu_cursor);
        if dataset
            .imu
            .last()
            .is_none_or(|last| last.timestamp < t)
        {
            // Dataset ran out of IMU coverage; nothing more can be keyframed.
            break;
        }

        let extrinsics = &dataset.calib[&scan.sensor_id].extrinsics;
        let predicted = smoother.predict_at(t).map_err(|source| {
            PipelineError::Smoother {
                t,
                sensor_id: scan.sensor_id.clone(),
                source,
            }
        })?;
        let guess_sensor = extrinsics
            .rotation
            .inv_rotate(&predicted.rot.inv_rotate(&predicted.vel));

        let velocity = match estimate_sensor_velocity(scan, &guess_sensor, &config.radar) {
            Ok(sensor_est) => {
                if config.radar.lever_arm_correction {
                    let omega = body_rate_at(&dataset.imu, t, &predicted.gyro_bias);
                    Some(to_body_frame_with_lever(&sensor_est, extrinsics, &omega))
                } else {
                    Some(to_body_frame(&sensor_est, extrinsics))
                }
            }
            Err(
                VelocityError::InsufficientPoints { .. }
                | VelocityError::DegenerateGeometry { .. }
                | VelocityError::NonConvergence { .. },
            ) => None,
        };

        let map_err = |source: SmootherError| PipelineError::Smoother {
            t,
            sensor_id: scan.sensor_id.clone(),
            source,
        };
        smoother
            .add_keyframe(t, velocity.as_ref(), &scan.sensor_id)
            .map_err(map_err)?;
        smoother.optimize_window().map_err(map_err)?;
        smoother.marginalize_old(t - config.smoother.lag);

        stats.keyframes += 1;
        if velocity.is_some() {
            stats.velocity_factors += 1;
        } else {
            stats.velocity_dropouts += 1;
        }
    }

    Ok((smoother.export_trajectory(), stats))
}

/// Two-window static initialization: slide a pair of consecutive windows
/// over the IMU stream; once motion shows up in the second window, average
/// the (still static) first window into the initial state.
fn initialize_static(
    imu: &[ImuSample],
    config: &PipelineConfig,
) -> Result<(f64, NavState), PipelineError> {
    if imu.len() < 2 {
        return Err(PipelineError::InitializationFailed(
            "IMU stream too short".into(),
        ));
    }
    let w = config.init.window_sec;
    let threshold = config.init.accel_var_threshold;
    let t0 = imu[0].timestamp;

    let mut lo = 0usize; // first sample of window 1
    let mut mid = 0usize; // first sample of window 2
    for i in 0..imu.len() {
        let t = imu[i].timestamp;
        if t - t0 < 2.0 * w {
            continue;
        }
        while imu[lo].timestamp < t - 2.0 * w {
            lo += 1;
        }
        while imu[mid].timestamp < t - w {
            mid += 1;
        }
        if !detect_motion(&imu[mid..=i], threshold) {
            continue;
        }
        let (rot, bias) = static_initialize(&imu[lo..mid], &config.imu, threshold)
            .map_err(|e| PipelineError::InitializationFailed(e.to_string()))?;
        let init_time = imu[mid].timestamp;
        return Ok((
            init_time,
            NavState {
                rot,
                pos: Vec3::zeros(),
                vel: Vec3::zeros(),
                accel_bias: bias.accel,
                gyro_bias: bias.gyro,
                timestamp: init_time,
            },
        ));
    }
    Err(PipelineError::InitializationFailed(
        "no motion detected in the dataset".into(),
    ))
}

/// Bias-corrected gyro rate at time `t` (for the lever-arm correction).
fn body_rate_at(imu: &[ImuSample], t: f64, gyro_bias: &Vec3) -> Vec3 {
    crate::imu::interpolate(imu, t)
        .map(|s| s.gyro - gyro_bias)
        .unwrap_or_else(|_| Vec3::zeros())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_filters_by_sensor_id() {
        assert!(RadarSelection::All.accepts("horizontal"));
        let only = RadarSelection::Only(vec!["vertical".into()]);
        assert!(only.accepts("vertical"));
        assert!(!only.accepts("horizontal"));
    }
}
