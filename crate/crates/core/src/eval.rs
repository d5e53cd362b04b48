//! Trajectory evaluation (APE/RPE without alignment) and Doppler-error
//! analysis against a reference trajectory.

use nalgebra::UnitQuaternion;
use thiserror::Error;

use crate::dataset::{Dataset, Trajectory};
use crate::so3::Vec3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectories have no overlapping time span")]
    NoOverlap,
}

/// Per-pose absolute error sample.
#[derive(Debug, Clone, Copy)]
pub struct PoseError {
    pub timestamp: f64,
    pub translation_m: f64,
    pub rotation_deg: f64,
}

/// APE/RPE summary plus the per-pose error series.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    /// RMSE of absolute translation error [m], no alignment applied.
    pub ape_translation_rmse: f64,
    /// RMSE of absolute rotation error [deg].
    pub ape_rotation_rmse_deg: f64,
    /// RMSE of relative translation error, percent of segment length.
    pub rpe_translation_percent: f64,
    /// RMSE of relative rotation error [deg per meter].
    pub rpe_rotation_deg_per_m: f64,
    pub rpe_segments: usize,
    pub per_pose: Vec<PoseError>,
}

fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, alpha: f64) -> UnitQuaternion<f64> {
    a.try_slerp(b, alpha, 1e-12).unwrap_or(*a)
}

/// Pose of a trajectory at time `t` (linear position, slerp rotation).
/// Returns `None` outside the span.
fn interpolate_pose(traj: &Trajectory, t: f64) -> Option<(Vec3, UnitQuaternion<f64>)> {
    let records = &traj.records;
    if records.is_empty() || t < records[0].timestamp || t > records[records.len() - 1].timestamp {
        return None;
    }
    let idx = records.partition_point(|r| r.timestamp < t);
    if idx < records.len() && records[idx].timestamp == t {
        return Some((records[idx].position, records[idx].rotation));
    }
    let hi = &records[idx];
    let lo = &records[idx - 1];
    let alpha = (t - lo.timestamp) / (hi.timestamp - lo.timestamp);
    Some((
        lo.position + (hi.position - lo.position) * alpha,
        slerp(&lo.rotation, &hi.rotation, alpha),
    ))
}

/// Compares an estimated trajectory against ground truth in a shared world
/// frame: APE is the RMSE over pose differences with no alignment, RPE is
/// computed over non-overlapping segments of `rpe_delta` meters of traveled
/// distance (translation as percent of segment length, rotation in deg/m).
pub fn evaluate(gt: &Trajectory, est: &Trajectory, rpe_delta: f64) -> Result<ErrorReport, EvalError> {
    struct Matched {
        t: f64,
        est_p: Vec3,
        est_r: UnitQuaternion<f64>,
        gt_p: Vec3,
        gt_r: UnitQuaternion<f64>,
    }
    let mut matched = Vec::with_capacity(est.records.len());
    for r in &est.records {
        if let Some((gt_p, gt_r)) = interpolate_pose(gt, r.timestamp) {
            matched.push(Matched {
                t: r.timestamp,
                est_p: r.position,
                est_r: r.rotation,
                gt_p,
                gt_r,
            });
        }
    }
    if matched.is_empty() {
        return Err(EvalError::NoOverlap);
    }

    let mut per_pose = Vec::with_capacity(matched.len());
    let mut sum_t2 = 0.0;
    let mut sum_r2 = 0.0;
    for m in &matched {
        let te = (m.est_p - m.gt_p).norm();
        let re = m.gt_r.angle_to(&m.est_r).to_degrees();
        per_pose.push(PoseError {
            timestamp: m.t,
            translation_m: te,
            rotation_deg: re,
        });
        sum_t2 += te * te;
        sum_r2 += re * re;
    }
    let n = matched.len() as f64;
    let ape_translation_rmse = (sum_t2 / n).sqrt();
    let ape_rotation_rmse_deg = (sum_r2 / n).sqrt();

    // Distance-based, non-overlapping RPE segments along the ground truth.
    let mut dist = vec![0.0; matched.len()];
    for i in 1..matched.len() {
        dist[i] = dist[i - 1] + (matched[i].gt_p - matched[i - 1].gt_p).norm();
    }
    let mut seg_t2 = 0.0;
    let mut seg_r2 = 0.0;
    let mut segments = 0usize;
    let mut anchor = 0usize;
    for i in 1..matched.len() {
        let length = dist[i] - dist[anchor];
        if length < rpe_delta {
            continue;
        }
        let (a, b) = (&matched[anchor], &matched[i]);
        let gt_rel_r = a.gt_r.inverse() * b.gt_r;
        let gt_rel_t = a.gt_r.inverse() * (b.gt_p - a.gt_p);
        let est_rel_r = a.est_r.inverse() * b.est_r;
        let est_rel_t = a.est_r.inverse() * (b.est_p - a.est_p);
        let err_r = gt_rel_r.angle_to(&est_rel_r).to_degrees();
        let err_t = (est_rel_t - gt_rel_t).norm();
        seg_t2 += (100.0 * err_t / length).powi(2);
        seg_r2 += (err_r / length).powi(2);
        segments += 1;
        anchor = i;
    }

    Ok(ErrorReport {
        ape_translation_rmse,
        ape_rotation_rmse_deg,
        rpe_translation_percent: if segments > 0 {
            (seg_t2 / segments as f64).sqrt()
        } else {
            0.0
        },
        rpe_rotation_deg_per_m: if segments > 0 {
            (seg_r2 / segments as f64).sqrt()
        } else {
            0.0
        },
        rpe_segments: segments,
        per_pose,
    })
}

/// Doppler-error histogram and Gaussian fit.
#[derive(Debug, Clone)]
pub struct DopplerAnalysis {
    /// (bin center [m/s], count), bin width 0.02 m/s, over all errors.
    pub histogram: Vec<(f64, usize)>,
    /// Initial robust scale estimate (1.4826 × MAD).
    pub sigma_mad: f64,
    /// Gaussian σ fitted after excluding |error| > 3·sigma_mad.
    pub sigma_fitted: f64,
    pub total_points: usize,
    pub excluded_points: usize,
}

pub const DOPPLER_HISTOGRAM_BIN: f64 = 0.02;

/// Projects the reference velocity onto every radar point's direction and
/// analyzes the Doppler error distribution: `error = d + v_sᵀ·(r/‖r‖)`, with
/// the reference body velocity obtained by differentiating the reference
/// trajectory. Aliasing outliers beyond 3× the robust MAD scale are excluded
/// from the Gaussian fit (the histogram covers everything).
pub fn doppler_error_analysis(
    dataset: &Dataset,
    reference: &Trajectory,
) -> Result<DopplerAnalysis, EvalError> {
    let records = &reference.records;
    if records.len() < 2 {
        return Err(EvalError::NoOverlap);
    }
    // Per-record world velocity via central differences.
    let mut vels = vec![Vec3::zeros(); records.len()];
    for i in 0..records.len() {
        let (a, b) = if i == 0 {
            (0, 1)
        } else if i == records.len() - 1 {
            (records.len() - 2, records.len() - 1)
        } else {
            (i - 1, i + 1)
        };
        vels[i] = (records[b].position - records[a].position)
            / (records[b].timestamp - records[a].timestamp);
    }
    let vel_at = |t: f64| -> Option<(Vec3, UnitQuaternion<f64>)> {
        if t < records[0].timestamp || t > records[records.len() - 1].timestamp {
            return None;
        }
        let idx = records.partition_point(|r| r.timestamp < t);
        if idx < records.len() && records[idx].timestamp == t {
            return Some((vels[idx], records[idx].rotation));
        }
        let alpha = (t - records[idx - 1].timestamp)
            / (records[idx].timestamp - records[idx - 1].timestamp);
        Some((
            vels[idx - 1] + (vels[idx] - vels[idx - 1]) * alpha,
            slerp(&records[idx - 1].rotation, &records[idx].rotation, alpha),
        ))
    };

    let mut errors: Vec<f64> = Vec::new();
    for (sensor_id, scans) in &dataset.radar {
        let Some(entry) = dataset.calib.get(sensor_id) else {
            continue;
        };
        let extr = &entry.extrinsics;
        for scan in scans {
            let Some((v_world, rot)) = vel_at(scan.timestamp) else {
                continue;
            };
            let v_body = rot.inverse_transform_vector(&v_world);
            let v_sensor = extr.rotation.inv_rotate(&v_body);
            for p in &scan.points {
                let u = p.position / p.position.norm();
                errors.push(p.doppler + v_sensor.dot(&u));
            }
        }
    }
    if errors.is_empty() {
        return Err(EvalError::NoOverlap);
    }

    let sigma_mad = robust_mad_sigma(&errors);
    let cutoff = 3.0 * sigma_mad;
    let kept: Vec<f64> = errors.iter().copied().filter(|e| e.abs() <= cutoff).collect();
    let excluded = errors.len() - kept.len();
    let sigma_fitted = if kept.is_empty() {
        0.0
    } else {
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        (kept.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / kept.len() as f64).sqrt()
    };

    let w = DOPPLER_HISTOGRAM_BIN;
    let min_bin = (errors.iter().cloned().fold(f64::INFINITY, f64::min) / w).floor() as i64;
    let max_bin = (errors.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / w).floor() as i64;
    let mut counts = vec![0usize; (max_bin - min_bin + 1) as usize];
    let last = counts.len() - 1;
    for e in &errors {
        let b = ((e / w).floor() as i64 - min_bin) as usize;
        counts[b.min(last)] += 1;
    }
    let histogram = counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (((min_bin + i as i64) as f64 + 0.5) * w, c))
        .collect();

    Ok(DopplerAnalysis {
        histogram,
        sigma_mad,
        sigma_fitted,
        total_points: errors.len(),
        excluded_points: excluded,
    })
}

/// 1.4826 × median absolute deviation about the median.
fn robust_mad_sigma(values: &[f64]) -> f64 {
    let median = percentile(values, 0.5);
    let deviations: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
    1.4826 * percentile(&deviations, 0.5)
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx]
}
