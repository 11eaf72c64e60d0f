use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use walkdir::WalkDir;

use super::{rel_string, PipelineConfig, PipelineError, CALIBRATION_DIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Video,
    /// Raw RGB frame stream with a text header.
    RawFrames,
    /// `frame,count` LED intensity trace.
    Trace,
    /// 2D landmark detections.
    Detections,
}

impl FileKind {
    fn split<'a>(name: &'a str, video_ext: &str) -> Option<(&'a str, FileKind)> {
        [
            (".2d.csv", FileKind::Detections),
            (".trace.csv", FileKind::Trace),
            (".rgb", FileKind::RawFrames),
            (video_ext, FileKind::Video),
        ]
        .into_iter()
        .find_map(|(ext, kind)| name.strip_suffix(ext).filter(|s| !s.is_empty()).map(|s| (s, kind)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SegmentFiles {
    pub video: Option<PathBuf>,
    pub raw_frames: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    /// File stem with the camera suffix removed.
    pub name: String,
    pub cameras: BTreeMap<String, SegmentFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialEntry {
    /// `/`-separated path below the dataset root.
    pub rel_path: String,
    pub segments: Vec<Segment>,
}

impl TrialEntry {
    pub fn camera_ids(&self) -> BTreeSet<String> {
        self.segments.iter().flat_map(|s| s.cameras.keys().cloned()).collect()
    }

    pub fn subject(&self) -> &str {
        self.rel_path.split('/').next().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub trials: Vec<TrialEntry>,
}

impl DatasetIndex {
    pub fn camera_ids(&self) -> BTreeSet<String> {
        self.trials.first().map(TrialEntry::camera_ids).unwrap_or_default()
    }

    /// Recreate the trial directory tree under `saving_dir`; source files
    /// are never touched.
    pub fn mirror_into(&self, saving_dir: &Path) -> Result<(), PipelineError> {
        for t in &self.trials {
            let dir = super::join_rel(saving_dir, &t.rel_path);
            std::fs::create_dir_all(&dir).map_err(super::io_err(&dir))?;
        }
        Ok(())
    }

    /// Trials at or below `scope` (a `/`-separated relative path).
    pub fn scoped(&self, scope: &str) -> Vec<&TrialEntry> {
        let scope = scope.trim_matches('/');
        self.trials
            .iter()
            .filter(|t| scope.is_empty() || t.rel_path == scope || t.rel_path.starts_with(&format!("{scope}/")))
            .collect()
    }
}

/// Walk the dataset tree. Directories named `calibration` hold board
/// material and are skipped; every other directory holding files is a trial.
pub fn scan_dataset(root: &Path, config: &PipelineConfig) -> Result<DatasetIndex, PipelineError> {
    if !root.is_dir() {
        return Err(PipelineError::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let suffix = config.suffix_regex()?;
    let mut leaves: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let walker = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| !(e.file_type().is_dir() && e.file_name() == CALIBRATION_DIR && e.depth() > 0));
    for entry in walker {
        let entry = entry.map_err(|e| PipelineError::Invalid(format!("walking {}: {e}", root.display())))?;
        if entry.file_type().is_file() {
            let dir = entry.path().parent().unwrap_or(root);
            leaves.entry(rel_string(root, dir)).or_default().push(entry.path().to_path_buf());
        }
    }

    let mut trials = Vec::new();
    for (rel_path, files) in leaves {
        let mut segments: BTreeMap<String, BTreeMap<String, SegmentFiles>> = BTreeMap::new();
        for path in files {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let Some((stem, kind)) = FileKind::split(&name, &config.video_extension) else {
                return Err(PipelineError::NonVideoInLeaf(rel_string(root, &path)));
            };
            let caps = suffix
                .captures(stem)
                .ok_or_else(|| PipelineError::SuffixMismatch(rel_string(root, &path)))?;
            let cam = caps.get(1).map(|m| m.as_str().to_owned()).unwrap_or_default();
            let seg = stem[..caps.get(0).map_or(stem.len(), |m| m.start())].to_owned();
            if seg.is_empty() || cam.is_empty() {
                return Err(PipelineError::SuffixMismatch(rel_string(root, &path)));
            }
            let files = segments.entry(seg).or_default().entry(cam).or_default();
            let slot = match kind {
                FileKind::Video => &mut files.video,
                FileKind::RawFrames => &mut files.raw_frames,
                FileKind::Trace => &mut files.trace,
                FileKind::Detections => &mut files.detections,
            };
            *slot = Some(path);
        }
        trials.push(TrialEntry {
            rel_path,
            segments: segments.into_iter().map(|(name, cameras)| Segment { name, cameras }).collect(),
        });
    }

    let expected = trials.first().map(TrialEntry::camera_ids);
    for t in &trials {
        let label = if t.rel_path.is_empty() { ".".to_owned() } else { t.rel_path.clone() };
        if Some(t.camera_ids()) != expected || t.segments.iter().any(|s| s.cameras.keys().cloned().collect::<BTreeSet<_>>() != t.camera_ids()) {
            return Err(PipelineError::CameraSetInconsistent(label));
        }
    }
    Ok(DatasetIndex { root: root.to_path_buf(), trials })
}
