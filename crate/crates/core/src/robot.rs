//! Kinematics of the 4-DOF remote-center-of-motion manipulator.
//!
//! The chain is described by one row per joint: a fixed frame transform
//! (translation + roll/pitch/yaw) followed by the joint motion along or about
//! a unit axis of the resulting frame. The tool is attached to the frame of
//! joint 4 and may be offset, tilted, and bent relative to that joint's axis.

use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, UnitDisc};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Tooltip position in the robot base frame, meters.
pub type TaskPoint = Vector3<f64>;

/// Joint configuration: RCM pan, RCM tilt (rad), insertion (m), tool roll (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointVector {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
}

impl JointVector {
    pub const fn new(q1: f64, q2: f64, q3: f64, q4: f64) -> Self {
        Self { q1, q2, q3, q4 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.q1, self.q2, self.q3, self.q4]
    }

    pub fn get(&self, joint: usize) -> f64 {
        self.to_array()[joint]
    }

    pub fn with(mut self, joint: usize, value: f64) -> Self {
        match joint {
            0 => self.q1 = value,
            1 => self.q2 = value,
            2 => self.q3 = value,
            3 => self.q4 = value,
            _ => panic!("joint index {joint} out of range"),
        }
        self
    }

    /// The three joints the kinematic loop corrects.
    pub fn positional(&self) -> Vector3<f64> {
        Vector3::new(self.q1, self.q2, self.q3)
    }

    /// Adds a correction to q1..q3. q4 is the commanded sweep variable and is
    /// never modified.
    pub fn corrected(self, delta: &Vector3<f64>) -> Self {
        Self {
            q1: self.q1 + delta.x,
            q2: self.q2 + delta.y,
            q3: self.q3 + delta.z,
            q4: self.q4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One row of the kinematic table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub kind: JointKind,
    /// Fixed translation from the previous frame, meters.
    #[serde(default)]
    pub origin: [f64; 3],
    /// Fixed roll/pitch/yaw from the previous frame, radians.
    #[serde(default)]
    pub rpy: [f64; 3],
    /// Motion axis in the fixed frame (normalized on use).
    pub axis: [f64; 3],
    /// Zero offset added to the commanded value (calibration error lives here).
    #[serde(default)]
    pub offset: f64,
    /// Commanded-value limits `[lo, hi]`.
    pub limits: [f64; 2],
}

impl JointRow {
    fn transform(&self, q: f64) -> Isometry3<f64> {
        let fixed = Isometry3::from_parts(
            Translation3::from(Vector3::from(self.origin)),
            UnitQuaternion::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2]),
        );
        let axis = Unit::new_normalize(Vector3::from(self.axis));
        let value = q + self.offset;
        let motion = match self.kind {
            JointKind::Revolute => {
                Isometry3::from_parts(Translation3::identity(), UnitQuaternion::from_axis_angle(&axis, value))
            }
            JointKind::Prismatic => Isometry3::from_parts(
                Translation3::from(axis.into_inner() * value),
                UnitQuaternion::identity(),
            ),
        };
        fixed * motion
    }
}

/// Tool attached to the joint-4 frame. The nominal tool lies exactly on the
/// joint-4 axis (local +z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolGeometry {
    /// Arc length of the tool from its mount to the tip, meters.
    pub length: f64,
    /// Lateral offset of the tool base from the joint-4 axis, meters.
    #[serde(default)]
    pub tip_offset: [f64; 3],
    /// Tilt of the tool axis about local x then local y, radians.
    #[serde(default)]
    pub axis_tilt: [f64; 2],
    /// Constant curvature of the tool, 1/m. Bends toward the tilted local x.
    #[serde(default)]
    pub bend: f64,
}

impl ToolGeometry {
    pub fn straight(length: f64) -> Self {
        Self {
            length,
            tip_offset: [0.0; 3],
            axis_tilt: [0.0; 2],
            bend: 0.0,
        }
    }

    pub fn is_nominal(&self) -> bool {
        self.tip_offset == [0.0; 3] && self.axis_tilt == [0.0; 2] && self.bend == 0.0
    }

    fn tilt(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), self.axis_tilt[1])
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.axis_tilt[0])
    }

    /// Direction of the tool at its mount, in the joint-4 frame.
    pub fn mount_direction(&self) -> Vector3<f64> {
        self.tilt() * Vector3::z()
    }

    /// Tooltip position in the joint-4 frame.
    pub fn tip_in_flange(&self) -> Vector3<f64> {
        let rot = self.tilt();
        let dir = rot * Vector3::z();
        let side = rot * Vector3::x();
        let l = self.length;
        let k = self.bend;
        let (along, across) = if (k * l).abs() < 1e-8 {
            (l, 0.5 * k * l * l)
        } else {
            ((k * l).sin() / k, (1.0 - (k * l).cos()) / k)
        };
        Vector3::from(self.tip_offset) + dir * along + side * across
    }
}

/// Additive tool error relative to a nominal tool.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolMisalignment {
    #[serde(default)]
    pub tip_offset: [f64; 3],
    #[serde(default)]
    pub axis_tilt: [f64; 2],
    #[serde(default)]
    pub bend: f64,
}

/// Nominal or "true" kinematic parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    #[serde(default)]
    pub name: String,
    /// Base-frame position of the remote center of motion, meters.
    pub rcm_position: [f64; 3],
    pub joints: [JointRow; 4],
    pub tool: ToolGeometry,
    /// Sanity radius around the RCM for task points, meters.
    pub workspace_radius: f64,
}

impl RobotModel {
    /// Generic RCM robot: pan about x and tilt about y intersecting at the RCM,
    /// insertion along z through the RCM, distal tool roll about z.
    ///
    /// The roll mount sits 30 mm behind the RCM at zero insertion and the tool
    /// is 45 mm long, so the tip is 15 mm + q3 beyond the RCM.
    pub fn generic_rcm() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            name: "generic-rcm".into(),
            rcm_position: [0.0, 0.0, 0.05],
            joints: [
                JointRow {
                    kind: JointKind::Revolute,
                    origin: [0.0; 3],
                    rpy: [0.0; 3],
                    axis: [1.0, 0.0, 0.0],
                    offset: 0.0,
                    limits: [-30.0 * deg, 30.0 * deg],
                },
                JointRow {
                    kind: JointKind::Revolute,
                    origin: [0.0; 3],
                    rpy: [0.0; 3],
                    axis: [0.0, 1.0, 0.0],
                    offset: 0.0,
                    limits: [-30.0 * deg, 30.0 * deg],
                },
                JointRow {
                    kind: JointKind::Prismatic,
                    origin: [0.0, 0.0, -0.030],
                    rpy: [0.0; 3],
                    axis: [0.0, 0.0, 1.0],
                    offset: 0.0,
                    limits: [0.0, 0.025],
                },
                JointRow {
                    kind: JointKind::Revolute,
                    origin: [0.0; 3],
                    rpy: [0.0; 3],
                    axis: [0.0, 0.0, 1.0],
                    offset: 0.0,
                    limits: [-360.0 * deg, 360.0 * deg],
                },
            ],
            tool: ToolGeometry::straight(0.045),
            workspace_radius: 0.1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: RobotModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.joints.iter().enumerate() {
            if Vector3::from(row.axis).norm() < 1e-12 {
                return Err(Error::invalid(format!("joint {} has a zero axis", i + 1)));
            }
            if !(row.limits[0] < row.limits[1]) {
                return Err(Error::invalid(format!("joint {} has empty limits", i + 1)));
            }
        }
        if !(self.tool.length > 0.0) {
            return Err(Error::invalid("tool length must be positive"));
        }
        if !(self.workspace_radius > 0.0) {
            return Err(Error::invalid("workspace radius must be positive"));
        }
        Ok(())
    }

    pub fn check_limits(&self, q: &JointVector) -> Result<()> {
        for (i, (row, value)) in self.joints.iter().zip(q.to_array()).enumerate() {
            let [lo, hi] = row.limits;
            if !value.is_finite() || value < lo || value > hi {
                return Err(Error::JointLimit {
                    joint: i + 1,
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    /// Pose of the joint-4 frame in the base frame.
    pub fn flange_pose(&self, q: &JointVector) -> Result<Isometry3<f64>> {
        self.check_limits(q)?;
        let base = Isometry3::translation(self.rcm_position[0], self.rcm_position[1], self.rcm_position[2]);
        Ok(self
            .joints
            .iter()
            .zip(q.to_array())
            .fold(base, |pose, (row, value)| pose * row.transform(value)))
    }

    pub fn forward_kinematics(&self, q: &JointVector) -> Result<TaskPoint> {
        let pose = self.flange_pose(q)?;
        Ok(pose.transform_point(&self.tool.tip_in_flange().into()).coords)
    }

    /// Unit direction of the tool at its mount, base frame.
    pub fn tool_axis(&self, q: &JointVector) -> Result<Vector3<f64>> {
        Ok(self.flange_pose(q)?.rotation * self.tool.mount_direction())
    }

    pub fn misaligned(&self, m: &ToolMisalignment) -> Self {
        let mut out = self.clone();
        for i in 0..3 {
            out.tool.tip_offset[i] += m.tip_offset[i];
        }
        out.tool.axis_tilt[0] += m.axis_tilt[0];
        out.tool.axis_tilt[1] += m.axis_tilt[1];
        out.tool.bend += m.bend;
        out
    }

    pub fn default_jacobian_step(&self) -> [f64; 3] {
        let mut step = [0.0; 3];
        for (s, row) in step.iter_mut().zip(&self.joints) {
            *s = match row.kind {
                JointKind::Revolute => 1e-4,
                JointKind::Prismatic => 1e-5,
            };
        }
        step
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &JointVector) -> Result<TaskPoint> {
    model.forward_kinematics(q)
}

/// ∂(x, y, z)/∂(q1, q2, q3) at `linearization_point`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub matrix: Matrix3<f64>,
    pub linearization_point: JointVector,
}

/// Central-difference Jacobian over the first three joints.
pub fn numerical_jacobian(model: &RobotModel, q: &JointVector, step: &[f64; 3]) -> Result<Jacobian> {
    let mut matrix = Matrix3::zeros();
    for (i, &h) in step.iter().enumerate() {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!(
                "jacobian step for joint {} must be positive",
                i + 1
            )));
        }
        let plus = q.with(i, q.get(i) + h);
        let minus = q.with(i, q.get(i) - h);
        let col = (model.forward_kinematics(&plus)? - model.forward_kinematics(&minus)?) / (2.0 * h);
        matrix.set_column(i, &col);
    }
    Ok(Jacobian {
        matrix,
        linearization_point: *q,
    })
}

/// Bounds for sampling a "true" robot around a nominal one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    /// Maximum lateral tool offset, meters.
    pub tip_offset_max: f64,
    /// Maximum tool-axis tilt magnitude, radians.
    pub axis_tilt_max: f64,
    /// Maximum tool curvature, 1/m.
    pub bend_max: f64,
    /// Maximum zero offset of revolute joints, radians.
    pub joint_offset_max: f64,
    /// Maximum zero offset of prismatic joints, meters.
    pub prismatic_offset_max: f64,
    /// Maximum per-axis error of each joint frame origin, meters.
    pub origin_offset_max: f64,
}

impl PerturbationSpec {
    fn validate(&self) -> Result<()> {
        let all = [
            self.tip_offset_max,
            self.axis_tilt_max,
            self.bend_max,
            self.joint_offset_max,
            self.prismatic_offset_max,
            self.origin_offset_max,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("perturbation bounds must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn sample_tool(&self, rng: &mut impl Rng) -> ToolMisalignment {
        let [ox, oy]: [f64; 2] = UnitDisc.sample(rng);
        let [tx, ty]: [f64; 2] = UnitDisc.sample(rng);
        ToolMisalignment {
            tip_offset: [ox * self.tip_offset_max, oy * self.tip_offset_max, 0.0],
            axis_tilt: [tx * self.axis_tilt_max, ty * self.axis_tilt_max],
            bend: rng.random::<f64>() * self.bend_max,
        }
    }
}

/// Samples a "true" model: nominal plus seeded offsets bounded by `spec`.
pub fn perturb_model(nominal: &RobotModel, spec: &PerturbationSpec, seed: u64) -> Result<RobotModel> {
    spec.validate()?;
    let mut rng = rng::stream(seed);
    let mut model = nominal.misaligned(&spec.sample_tool(&mut rng));
    for row in model.joints.iter_mut() {
        let bound = match row.kind {
            JointKind::Revolute => spec.joint_offset_max,
            JointKind::Prismatic => spec.prismatic_offset_max,
        };
        row.offset += bound * rng.random_range(-1.0..=1.0);
        for o in row.origin.iter_mut() {
            *o += spec.origin_offset_max * rng.random_range(-1.0..=1.0);
        }
    }
    Ok(model)
}
