use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamic::{DynamicConfig, QFilter};
use crate::kinematic::{GridSpec, KinematicConfig};
use crate::measurement::{FrameRegistration, MeasurementNoise};
use crate::plant::{default_plants, JointPlant, Window};
use crate::robot::{perturb_model, PerturbationSpec, RobotModel, ToolMisalignment};
use crate::trajectory::MotionProfile;
use crate::{Error, Result};

const PAPER_REPRO: &str = include_str!("../../scenarios/paper-repro.json");

/// How the simulated "true" robot differs from the nominal one.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum TruthSpec {
    #[default]
    Nominal,
    Misaligned(ToolMisalignment),
    /// Seeded draw within the given bounds.
    Random(PerturbationSpec),
    Model(RobotModel),
}

impl TruthSpec {
    pub fn build(&self, nominal: &RobotModel, seed: u64) -> Result<RobotModel> {
        Ok(match self {
            Self::Nominal => nominal.clone(),
            Self::Misaligned(m) => nominal.misaligned(m),
            Self::Random(spec) => perturb_model(nominal, spec, seed)?,
            Self::Model(m) => m.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentificationConfig {
    /// Step size per joint (rad or m); small enough to stay out of saturation.
    pub step_amplitude: [f64; 4],
    /// Samples recorded per step.
    pub duration: usize,
    /// FIR length; the settling-based default when absent.
    pub crop: Option<usize>,
    pub window: Window,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            step_amplitude: [0.02, 0.02, 1e-3, 0.05],
            duration: 1000,
            crop: None,
            window: Window::BlackmanHarris,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QFilterSpec {
    pub enabled: bool,
    /// Fraction of Nyquist.
    pub cutoff: f64,
    pub taps: usize,
}

impl Default for QFilterSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            cutoff: 0.2,
            taps: QFilter::nonnegative_taps(0.2),
        }
    }
}

impl QFilterSpec {
    pub fn build(&self) -> Result<QFilter> {
        if self.enabled {
            QFilter::lowpass(self.cutoff, self.taps)
        } else {
            Ok(QFilter::identity())
        }
    }
}

/// Per-joint max-error targets in display units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointThresholds {
    pub pan_deg: f64,
    pub tilt_deg: f64,
    pub insertion_um: f64,
    pub roll_deg: f64,
}

impl Default for JointThresholds {
    fn default() -> Self {
        Self {
            pan_deg: 0.1,
            tilt_deg: 0.1,
            insertion_um: 5.0,
            roll_deg: 1.0,
        }
    }
}

impl JointThresholds {
    pub fn to_si(&self) -> [f64; 4] {
        [
            self.pan_deg.to_radians(),
            self.tilt_deg.to_radians(),
            self.insertion_um * 1e-6,
            self.roll_deg.to_radians(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Inline nominal robot. Takes precedence over `robot_file`.
    pub robot: Option<RobotModel>,
    /// Robot description, relative to the scenario file.
    pub robot_file: Option<PathBuf>,
    pub truth: TruthSpec,
    pub registration: FrameRegistration,
    pub noise: MeasurementNoise,
    pub grid: GridSpec,
    pub kinematic: KinematicConfig,
    /// Joint actuators; the built-in set at the profile's sample time when absent.
    pub plants: Option<Vec<JointPlant>>,
    pub identification: IdentificationConfig,
    pub q_filter: QFilterSpec,
    pub profile: MotionProfile,
    pub dynamic: DynamicConfig,
    pub thresholds: JointThresholds,
}

impl Scenario {
    /// The bundled reproduction scenario.
    pub fn paper_repro() -> Self {
        Self::from_json(PAPER_REPRO).expect("bundled scenario parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut s = Self::from_json(&text)?;
        if s.robot.is_none() {
            if let Some(file) = &s.robot_file {
                let base = path.parent().unwrap_or(Path::new("."));
                s.robot = Some(RobotModel::load(base.join(file))?);
            }
        }
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn nominal_robot(&self) -> Result<RobotModel> {
        match (&self.robot, &self.robot_file) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(f)) => RobotModel::load(f),
            (None, None) => Ok(RobotModel::generic_rcm()),
        }
    }

    pub fn plants(&self) -> Result<[JointPlant; 4]> {
        let plants = match &self.plants {
            None => default_plants(self.profile.sample_time),
            Some(p) => p
                .clone()
                .try_into()
                .map_err(|p: Vec<JointPlant>| Error::invalid(format!("expected 4 plants, got {}", p.len())))?,
        };
        for p in &plants {
            p.validate()?;
            if (p.sample_time - self.profile.sample_time).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "plant `{}` sample time {} differs from the profile's {}",
                    p.name, p.sample_time, self.profile.sample_time
                )));
            }
        }
        Ok(plants)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.registration.validate(1e-9)?;
        self.plants()?;
        self.q_filter.build()?;
        if self
            .identification
            .step_amplitude
            .iter()
            .any(|a| *a == 0.0 || !a.is_finite())
        {
            return Err(Error::invalid("identification step amplitudes must be non-zero"));
        }
        if self.thresholds.to_si().iter().any(|t| !(*t > 0.0)) {
            return Err(Error::invalid("thresholds must be positive"));
        }
        Ok(())
    }
}
