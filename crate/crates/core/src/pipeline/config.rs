use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{io_err, write_file, PipelineError};
use crate::calibration::BoardSpec;
use crate::features::LandmarkSchema;
use crate::metrics::{CorrelationMode, MetricsOptions, ARM_LARGE_ERROR_MM, HAND_FACE_LARGE_ERROR_MM, METRICS_DT};
use crate::sync::{DEFAULT_DEBOUNCE, DEFAULT_RED_MARGIN};
use crate::triangulation::{TriangulationOptions, DEFAULT_INLIER_THRESHOLD_PX, DEFAULT_MIN_CONFIDENCE};

pub const CONFIG_FILE: &str = "mocap.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    RightHand,
    LeftHand,
    FullBody,
    Face,
}

impl BodyPart {
    pub fn schema_id(self) -> &'static str {
        match self {
            BodyPart::RightHand | BodyPart::LeftHand => "hand21",
            BodyPart::FullBody => "pose33",
            BodyPart::Face => "face",
        }
    }

    /// Schema for this body part; faces have no fixed landmark set, so
    /// their count comes from the data.
    pub fn schema(self, observed_landmarks: u32) -> LandmarkSchema {
        match self {
            BodyPart::RightHand | BodyPart::LeftHand => LandmarkSchema::hand21(),
            BodyPart::FullBody => LandmarkSchema::pose33(),
            BodyPart::Face => LandmarkSchema::generic(observed_landmarks as usize),
        }
    }

    pub fn large_error_mm(self) -> f64 {
        match self {
            BodyPart::FullBody => ARM_LARGE_ERROR_MM,
            _ => HAND_FACE_LARGE_ERROR_MM,
        }
    }
}

impl std::str::FromStr for BodyPart {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "right_hand" => Ok(BodyPart::RightHand),
            "left_hand" => Ok(BodyPart::LeftHand),
            "full_body" => Ok(BodyPart::FullBody),
            "face" => Ok(BodyPart::Face),
            other => Err(PipelineError::Config(format!(
                "body_part {other:?}: expected right_hand, left_hand, full_body or face"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncSettings {
    pub light_threshold: u8,
    pub red_margin: u8,
    pub pixel_threshold: u32,
    pub debounce: usize,
    pub max_frame_skew: usize,
}

impl Default for SyncSettings {
    fn default() -> Self {
        Self {
            light_threshold: 200,
            red_margin: DEFAULT_RED_MARGIN,
            pixel_threshold: 5,
            debounce: DEFAULT_DEBOUNCE,
            max_frame_skew: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationSettings {
    pub min_confidence: f64,
    pub inlier_threshold_px: f64,
}

impl Default for TriangulationSettings {
    fn default() -> Self {
        Self { min_confidence: DEFAULT_MIN_CONFIDENCE, inlier_threshold_px: DEFAULT_INLIER_THRESHOLD_PX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSettings {
    pub dt: f64,
    pub max_gap_frames: usize,
    pub correlation_mode: CorrelationMode,
    /// Overrides the body-part default when set.
    pub large_error_mm: Option<f64>,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self { dt: METRICS_DT, max_gap_frames: 5, correlation_mode: CorrelationMode::PositionNorm, large_error_mm: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset_root: PathBuf,
    /// Where the file was loaded from; not stored.
    #[serde(skip)]
    pub saving_dir: PathBuf,
    pub body_part: BodyPart,
    pub video_extension: String,
    pub camera_suffix_pattern: String,
    /// Frame rate of detection and trace files.
    pub fps: f64,
    #[serde(default)]
    pub sync: SyncSettings,
    #[serde(default)]
    pub triangulation: TriangulationSettings,
    #[serde(default)]
    pub metrics: MetricsSettings,
    #[serde(default)]
    pub board: BoardSpec,
}

impl PipelineConfig {
    pub fn new(dataset_root: PathBuf, saving_dir: PathBuf) -> Self {
        Self {
            dataset_root,
            saving_dir,
            body_part: BodyPart::RightHand,
            video_extension: ".mp4".into(),
            camera_suffix_pattern: "-cam([A-Z0-9])".into(),
            fps: 60.0,
            sync: SyncSettings::default(),
            triangulation: TriangulationSettings::default(),
            metrics: MetricsSettings::default(),
            board: BoardSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let re = Regex::new(&self.camera_suffix_pattern)
            .map_err(|e| PipelineError::Config(format!("camera_suffix_pattern: {e}")))?;
        if re.captures_len() != 2 {
            return bad(format!(
                "camera_suffix_pattern must have exactly one capture group, has {}",
                re.captures_len() - 1
            ));
        }
        if !self.video_extension.starts_with('.') || self.video_extension.len() < 2 {
            return bad(format!("video_extension {:?} must look like \".mp4\"", self.video_extension));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if self.sync.pixel_threshold == 0 {
            return bad("sync.pixel_threshold must be at least 1".into());
        }
        let t = &self.triangulation;
        if !(0.0..=1.0).contains(&t.min_confidence) || !(t.inlier_threshold_px > 0.0) {
            return bad("triangulation thresholds out of range".into());
        }
        let m = &self.metrics;
        if !(m.dt > 0.0) || m.large_error_mm.is_some_and(|v| !(v > 0.0)) {
            return bad("metrics thresholds out of range".into());
        }
        self.board.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn suffix_regex(&self) -> Result<Regex, PipelineError> {
        Regex::new(&format!("(?:{})$", self.camera_suffix_pattern))
            .map_err(|e| PipelineError::Config(format!("camera_suffix_pattern: {e}")))
    }

    pub fn triangulation_options(&self) -> TriangulationOptions {
        TriangulationOptions {
            min_confidence: self.triangulation.min_confidence,
            inlier_threshold_px: self.triangulation.inlier_threshold_px,
        }
    }

    pub fn metrics_options(&self) -> MetricsOptions {
        MetricsOptions {
            dt: self.metrics.dt,
            max_gap_frames: self.metrics.max_gap_frames,
            large_error_mm: self.metrics.large_error_mm.unwrap_or(self.body_part.large_error_mm()),
            correlation_mode: self.metrics.correlation_mode,
        }
    }

    pub fn path_in(saving_dir: &Path) -> PathBuf {
        saving_dir.join(CONFIG_FILE)
    }

    pub fn load(saving_dir: &Path) -> Result<Self, PipelineError> {
        let path = Self::path_in(saving_dir);
        if !path.exists() {
            return Err(PipelineError::MissingPrerequisite {
                step: "configure".into(),
                artifact: CONFIG_FILE.into(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        // the file may have been moved along with its directory
        cfg.saving_dir = saving_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self) -> Result<PathBuf, PipelineError> {
        self.validate()?;
        let path = Self::path_in(&self.saving_dir);
        let text = toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))?;
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_needs_one_group() {
        let mut c = PipelineConfig::new("d".into(), "s".into());
        c.validate().unwrap();
        c.camera_suffix_pattern = "-cam[A-Z]".into();
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
        c.camera_suffix_pattern = "-(cam)([A-Z])".into();
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn toml_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = PipelineConfig::new("data".into(), dir.path().to_path_buf());
        c.body_part = BodyPart::FullBody;
        c.save().unwrap();
        let back = PipelineConfig::load(dir.path()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.metrics_options().large_error_mm, 30.0);
    }
}
