//! Multi-radar inertial odometry.
//!
//! Estimates 6-DoF trajectories by fusing per-scan radar Doppler ego-velocity
//! estimates (with anisotropic covariance) and preintegrated IMU measurements
//! in a fixed-lag smoother. Ships with a synthetic sensor simulator, dataset
//! I/O, and an APE/RPE evaluation harness so the whole pipeline can be
//! exercised without hardware.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod imu;
pub mod pipeline;
pub mod radar;
pub mod sim;
pub mod smoother;
pub mod so3;

pub use so3::{Rotation, Vec3};
