use std::fmt;
use std::path::PathBuf;

use ctxsteer::calibration::CalibrationError;
use ctxsteer::corpus::CorpusError;
use ctxsteer::extraction::ExtractionError;
use ctxsteer::metrics::MetricsError;
use ctxsteer::model::ModelError;
use ctxsteer::steering::SteeringError;
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Extract,
    Calibrate,
    Eval,
    Sweep,
    Latency,
    Qa,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Synth => "synth",
            Stage::Extract => "extract",
            Stage::Calibrate => "calibrate",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Latency => "latency",
            Stage::Qa => "qa",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Stage { .. } => EXIT_STAGE,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            HarnessError::Stage { stage, .. } => Some(*stage),
            HarnessError::Config(_) => None,
        }
    }
}

/// Attach a stage to any error a stage can raise.
pub trait InStage<T> {
    fn in_stage(self, stage: Stage) -> Result<T, HarnessError>;
}

impl<T, E: Into<StageError>> InStage<T> for Result<T, E> {
    fn in_stage(self, stage: Stage) -> Result<T, HarnessError> {
        self.map_err(|e| HarnessError::Stage {
            stage,
            source: e.into(),
        })
    }
}
