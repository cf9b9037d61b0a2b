//! Simulated imaging feedback of the tooltip.
//!
//! Positions of the true robot are mapped into the imaging frame, corrupted
//! there (isotropic Gaussian noise, optional voxel quantization), and mapped
//! back through the registration.

mod segmentation;

pub use segmentation::{
    extract_tooltip, generate_tool_cloud, read_cloud_csv, write_cloud_csv, CloudSpec, SegmentationConfig, ToolEstimate,
    ToolPointCloud,
};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::robot::{JointVector, RobotModel, TaskPoint};
use crate::{rng, Error, Result};

/// Rigid transform from the imaging frame to the robot frame:
/// `p_robot = rotation * p_imaging + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRegistration {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for FrameRegistration {
    fn default() -> Self {
        Self::identity()
    }
}

impl FrameRegistration {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rpy(rpy: [f64; 3], translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]).into_inner(),
            translation,
        }
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::invalid(format!(
                "registration rotation is not proper orthonormal (|RᵀR - I| = {ortho:.2e}, det = {det})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("registration translation is not finite"));
        }
        Ok(())
    }

    pub fn to_imaging(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn to_robot(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementNoise {
    /// Per-axis standard deviation, meters.
    pub sigma: f64,
    /// Voxel pitch, meters. Zero disables quantization.
    pub quantization: f64,
}

impl MeasurementNoise {
    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(self.quantization >= 0.0) {
            return Err(Error::invalid("noise sigma and quantization must be non-negative"));
        }
        Ok(())
    }
}

/// One simulated tooltip observation of the true robot, in the robot frame.
pub fn observe_tooltip(
    true_model: &RobotModel,
    q: &JointVector,
    registration: &FrameRegistration,
    noise: &MeasurementNoise,
    seed: u64,
) -> Result<TaskPoint> {
    noise.validate()?;
    let tip = true_model.forward_kinematics(q)?;
    let mut seen = registration.to_imaging(&tip);
    if noise.sigma > 0.0 {
        let mut rng = rng::stream(seed);
        for v in seen.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += noise.sigma * n;
        }
    }
    if noise.quantization > 0.0 {
        seen = seen.map(|v| (v / noise.quantization).round() * noise.quantization);
    }
    Ok(registration.to_robot(&seen))
}

/// Anything that can report where the tooltip is for a commanded joint vector.
///
/// `seed` selects an independent noise stream, so callers can measure nodes in
/// any order (or concurrently) and still get reproducible results.
pub trait TooltipSource: Sync {
    fn observe(&self, q: &JointVector, seed: u64) -> Result<TaskPoint>;
}

/// Imaging simulation of a perturbed robot.
#[derive(Debug, Clone)]
pub struct SimulatedImaging {
    pub true_model: RobotModel,
    pub registration: FrameRegistration,
    pub noise: MeasurementNoise,
}

impl TooltipSource for SimulatedImaging {
    fn observe(&self, q: &JointVector, seed: u64) -> Result<TaskPoint> {
        observe_tooltip(&self.true_model, q, &self.registration, &self.noise, seed)
    }
}
