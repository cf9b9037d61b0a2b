//! Dual-loop iterative learning control for tool rotation on a
//! remote-center-of-motion (RCM) manipulator.
//!
//! The crate is organised along the two learning stages and the pieces they
//! depend on:
//!
//! * [`robot`]: 4-DOF RCM kinematics, perturbed "true" models and the
//!   central-difference Jacobian.
//! * [`measurement`]: simulated imaging feedback (registration, noise) and
//!   tooltip extraction from tool point clouds.
//! * [`kinematic`]: the grid-based kinematic learning loop.
//! * [`trajectory`]: bilinear interpolation of the learned grid and the
//!   bidirectional rotation profile.
//! * [`plant`]: per-joint discrete LTI actuators and FIR identification from
//!   step responses.
//! * [`dynamic`]: the phase-inversion learning loop with zero-phase Q-filtering
//!   and tracking metrics.
//! * [`harness`]: scenarios, stage orchestration, persistence and plots.
//!
//! All quantities are SI (meters, radians, seconds) unless a field name says
//! otherwise (`_um`, `_mm`, `_deg`).

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamic;
pub mod error;
pub mod harness;
pub mod kinematic;
pub mod measurement;
pub mod plant;
pub mod rng;
pub mod robot;
pub mod trajectory;

pub use nalgebra;

pub use dynamic::{LearningFilter, QFilter, TrackingReport};
pub use error::{Error, Result};
pub use kinematic::{CorrectionGrid, GridSpec, KinematicConfig, LearningGain};
pub use measurement::{FrameRegistration, MeasurementNoise, ToolPointCloud};
pub use plant::{FirModel, JointPlant, StepResponse};
pub use robot::{Jacobian, JointVector, RobotModel, TaskPoint, ToolGeometry};
pub use trajectory::{InterpolationTable, JointTrajectory, MotionProfile};

/// Micrometers per meter.
pub const UM: f64 = 1e6;
/// Millimeters per meter.
pub const MM: f64 = 1e3;
