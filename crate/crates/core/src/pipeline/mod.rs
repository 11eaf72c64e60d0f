//! Batch driver: dataset scanning, mirrored output layout and the
//! trim → calibrate → triangulate → metrics/features → report steps.

mod config;
mod dataset;
mod fixture;
mod report;
mod steps;

use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::features::FeatureError;
use crate::metrics::MetricsError;
use crate::sync::SyncError;
use crate::synthetic::SyntheticError;
use crate::triangulation::TriangulationError;

pub use config::{BodyPart, PipelineConfig, SyncSettings, CONFIG_FILE};
pub use dataset::{scan_dataset, DatasetIndex, FileKind, Segment, SegmentFiles, TrialEntry};
pub use fixture::{write_fixture, FixtureOptions, FixtureSummary};
pub use report::{emit_report, ReportSummary};
pub use steps::{
    find_calibration, run_calibrate, run_features, run_metrics, run_triangulate, run_trim, CalibrateArgs,
    StepOutcome, TrimArgs, TrimMode,
};

pub const VIDEOS_RAW: &str = "videos-raw";
pub const CALIBRATION_DIR: &str = "calibration";
pub const CALIBRATION_FILE: &str = "calibration.toml";
pub const POSE_DIR: &str = "pose-3d";
pub const METRICS_DIR: &str = "metrics";
pub const FEATURES_DIR: &str = "features";
pub const REPORT_DIR: &str = "report";
pub const DECODER_ENV: &str = "MOCAP_DECODER";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-video file in leaf directory: {0}")]
    NonVideoInLeaf(String),
    #[error("file name does not end with the camera suffix: {0}")]
    SuffixMismatch(String),
    #[error("camera set of {0} differs from the rest of the dataset")]
    CameraSetInconsistent(String),
    #[error("{step}: missing prerequisite {artifact}")]
    MissingPrerequisite { step: String, artifact: String },
    #[error("{step}: prerequisite {artifact} changed since it was consumed; re-run the earlier step")]
    StalePrerequisite { step: String, artifact: String },
    #[error("nothing to report")]
    NothingToReport,
    #[error("{context}: {source}")]
    Calibration { context: String, source: CalibrationError },
    #[error("{context}: {source}")]
    Sync { context: String, source: SyncError },
    #[error("{context}: {source}")]
    Triangulation { context: String, source: TriangulationError },
    #[error("{context}: {source}")]
    Metrics { context: String, source: MetricsError },
    #[error("{context}: {source}")]
    Features { context: String, source: FeatureError },
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("decoder: {0}")]
    Decoder(String),
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// 2 validation, 3 missing or stale prerequisite, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use PipelineError::*;
        match self {
            MissingPrerequisite { .. } | StalePrerequisite { .. } | NothingToReport => 3,
            Calibration { source, .. } => match source {
                CalibrationError::DegenerateConfiguration(_)
                | CalibrationError::InsufficientViews(_)
                | CalibrationError::CameraInsufficientViews { .. }
                | CalibrationError::RankDeficient(_)
                | CalibrationError::DisconnectedRig(_)
                | CalibrationError::NoConvergence { .. } => 4,
                _ => 2,
            },
            Triangulation { source, .. } => match source {
                TriangulationError::DegenerateGeometry(_) | TriangulationError::InsufficientViews(_) => 4,
                _ => 2,
            },
            Metrics { source, .. } => match source {
                MetricsError::EmptyInput | MetricsError::BadMatrix(_) => 2,
                _ => 4,
            },
            Sync { source, .. } => match source {
                SyncError::EventCountMismatch { .. } | SyncError::SkewTooLarge { .. } => 4,
                _ => 2,
            },
            _ => 2,
        }
    }
}

pub(crate) fn io_err(context: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.as_ref().display().to_string();
    move |source| PipelineError::Io { context, source }
}

pub(crate) fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

/// `/`-separated path of `path` relative to `base`, for outputs that must not
/// depend on where the tree lives.
pub(crate) fn rel_string(base: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path);
    let parts: Vec<String> = rel
        .components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect();
    parts.join("/")
}

pub(crate) fn join_rel(base: &Path, rel: &str) -> PathBuf {
    rel.split('/').filter(|s| !s.is_empty()).fold(base.to_path_buf(), |p, s| p.join(s))
}
