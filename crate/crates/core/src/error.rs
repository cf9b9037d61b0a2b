use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("joint {joint} value {value} outside limits [{lo}, {hi}]")]
    JointLimit { joint: usize, value: f64, lo: f64, hi: f64 },

    #[error("singular configuration: {0}")]
    SingularConfiguration(String),

    #[error("inner IK loop did not converge after {iterations} iterations (residual {residual:.3e} m)")]
    InnerLoopDivergence { iterations: usize, residual: f64 },

    #[error("measurement failure: error norm {norm:.3e} m exceeds sanity bound {bound:.3e} m")]
    MeasurementFailure { norm: f64, bound: f64 },

    /// RMS error grew on two consecutive iterations. `rms_history` is in meters.
    #[error("kinematic learning diverged at iteration {iteration} (RMS history {rms_history:?})")]
    KinematicDivergence { iteration: usize, rms_history: Vec<f64> },

    #[error("segmentation failed: {0}")]
    Segmentation(String),

    #[error("identification invalid: {0}")]
    IdentificationInvalid(String),

    #[error("missing upstream artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stage `{stage}`: {inner}")]
    Stage { stage: &'static str, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                inner: Box::new(e),
            },
        }
    }
}
