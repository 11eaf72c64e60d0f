use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::dataset::{DatasetIndex, Segment, SegmentFiles, TrialEntry};
use super::{
    io_err, join_rel, rel_string, sha256_file, write_file, PipelineConfig, PipelineError, CALIBRATION_DIR,
    CALIBRATION_FILE, DECODER_ENV, FEATURES_DIR, METRICS_DIR, POSE_DIR, VIDEOS_RAW,
};
use crate::calibration::{calibrate_rig, read_calibration, read_corner_csv, write_calibration, BoardSpec, CalibrationOptions};
use crate::features::feature_table_from_records;
use crate::metrics::compute_trial_metrics;
use crate::sync::{
    manual_window, plan_trims, read_trace_csv, roi_red_counts, IntensityTrace, PlanMetadata, PlanOptions,
    RawFrameReader, RoiSpec, TrimPlan, TrimTrial,
};
use crate::triangulation::{read_detections_csv, read_points_csv, triangulate_trial, write_detections_csv, write_points_csv, Detections2D};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepOutcome {
    pub step: String,
    /// Written files, relative to the saving directory.
    pub written: Vec<String>,
}

impl StepOutcome {
    fn new(step: &str, mut written: Vec<String>) -> Self {
        written.sort();
        Self { step: step.into(), written }
    }
}

/// Input hashes recorded next to every derived artifact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct ArtifactMeta {
    step: String,
    /// `@dataset/...` or `@saving/...` → sha256.
    inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    info: serde_json::Value,
}

const AT_DATASET: &str = "@dataset/";
const AT_SAVING: &str = "@saving/";

impl ArtifactMeta {
    fn new(step: &str) -> Self {
        Self { step: step.into(), ..Default::default() }
    }

    fn add(&mut self, cfg: &PipelineConfig, path: &Path) -> Result<(), PipelineError> {
        let key = if path.starts_with(&cfg.saving_dir) {
            format!("{AT_SAVING}{}", rel_string(&cfg.saving_dir, path))
        } else if path.starts_with(&cfg.dataset_root) {
            format!("{AT_DATASET}{}", rel_string(&cfg.dataset_root, path))
        } else {
            path.display().to_string()
        };
        self.inputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    fn resolve(cfg: &PipelineConfig, key: &str) -> PathBuf {
        if let Some(rel) = key.strip_prefix(AT_SAVING) {
            join_rel(&cfg.saving_dir, rel)
        } else if let Some(rel) = key.strip_prefix(AT_DATASET) {
            join_rel(&cfg.dataset_root, rel)
        } else {
            PathBuf::from(key)
        }
    }

    fn write(&self, path: &Path) -> Result<(), PipelineError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Invalid(e.to_string()))?;
        s.push('\n');
        write_file(path, s.as_bytes())
    }

    fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))
    }

    /// Every recorded input must still exist with the same content.
    fn verify(&self, cfg: &PipelineConfig, step: &str) -> Result<(), PipelineError> {
        for (key, sha) in &self.inputs {
            let path = Self::resolve(cfg, key);
            let artifact = key.trim_start_matches(AT_SAVING).trim_start_matches(AT_DATASET).to_owned();
            if !path.exists() {
                return Err(PipelineError::MissingPrerequisite { step: step.into(), artifact });
            }
            if &sha256_file(&path)? != sha {
                return Err(PipelineError::StalePrerequisite { step: step.into(), artifact });
            }
        }
        Ok(())
    }
}

/// Check the inputs recorded beside `artifact` are unchanged.
pub(crate) fn verify_artifact(cfg: &PipelineConfig, artifact: &Path, step: &str) -> Result<(), PipelineError> {
    let meta = meta_path(artifact);
    if !meta.exists() {
        return Err(missing(step, rel_string(&cfg.saving_dir, &meta)));
    }
    ArtifactMeta::read(&meta)?.verify(cfg, step)
}

fn meta_path(artifact: &Path) -> PathBuf {
    let name = artifact.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    artifact.with_file_name(format!("{name}.meta.json"))
}

fn missing(step: &str, artifact: impl Into<String>) -> PipelineError {
    PipelineError::MissingPrerequisite { step: step.into(), artifact: artifact.into() }
}

fn mirror(cfg: &PipelineConfig, rel: &str) -> PathBuf {
    join_rel(&cfg.saving_dir, rel)
}

fn rel_join(rel: &str, tail: &str) -> String {
    if rel.is_empty() {
        tail.to_owned()
    } else {
        format!("{rel}/{tail}")
    }
}

fn plan_path(m: &Path, segment: &str) -> PathBuf {
    m.join(VIDEOS_RAW).join(format!("{segment}.trim.json"))
}

fn trimmed_path(m: &Path, segment: &str, trial: usize, camera: &str) -> PathBuf {
    m.join(VIDEOS_RAW).join(format!("{segment}-t{trial}.{camera}.2d.csv"))
}

fn collect<T: Send>(results: Vec<Result<T, PipelineError>>) -> Result<Vec<T>, PipelineError> {
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrimMode {
    Auto { num_trials: usize, fixed_length_s: Option<f64>, rois: BTreeMap<String, RoiSpec> },
    Manual { start: usize, end: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimArgs {
    pub mode: TrimMode,
    pub scope: String,
}

fn decode_counts(
    cfg: &PipelineConfig,
    video: &Path,
    roi: &RoiSpec,
) -> Result<IntensityTrace, PipelineError> {
    let template = std::env::var(DECODER_ENV)
        .map_err(|_| PipelineError::Decoder(format!("{DECODER_ENV} is not set; cannot decode {}", video.display())))?;
    let quoted = format!("'{}'", video.display().to_string().replace('\'', r"'\''"));
    let cmd = template.replace("{input}", &quoted);
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| PipelineError::Decoder(format!("{cmd}: {e}")))?;
    let stdout = child.stdout.take().ok_or_else(|| PipelineError::Decoder("no stdout".into()))?;
    let ctx = video.display().to_string();
    let trace = RawFrameReader::new(BufReader::new(stdout))
        .and_then(|mut r| roi_red_counts(&mut r, roi, cfg.sync.light_threshold, cfg.sync.red_margin))
        .map_err(|source| PipelineError::Sync { context: ctx.clone(), source });
    let status = child.wait().map_err(|e| PipelineError::Decoder(e.to_string()))?;
    if !status.success() {
        return Err(PipelineError::Decoder(format!("{cmd}: exited with {status}")));
    }
    trace
}

fn camera_trace(
    cfg: &PipelineConfig,
    rel: &str,
    seg: &str,
    cam: &str,
    files: &SegmentFiles,
    rois: &BTreeMap<String, RoiSpec>,
    meta: &mut ArtifactMeta,
) -> Result<IntensityTrace, PipelineError> {
    let ctx = |p: &Path| p.display().to_string();
    if let Some(p) = &files.trace {
        meta.add(cfg, p)?;
        return read_trace_csv(p, cam, cfg.fps).map_err(|source| PipelineError::Sync { context: ctx(p), source });
    }
    let roi = || {
        rois.get(cam)
            .or_else(|| rois.get("*"))
            .map(|r| RoiSpec { camera: cam.to_owned(), ..r.clone() })
            .ok_or_else(|| PipelineError::Config(format!("no --roi given for camera {cam}")))
    };
    if let Some(p) = &files.raw_frames {
        let roi = roi()?;
        meta.add(cfg, p)?;
        let f = std::fs::File::open(p).map_err(io_err(p))?;
        return RawFrameReader::new(BufReader::new(f))
            .and_then(|mut r| roi_red_counts(&mut r, &roi, cfg.sync.light_threshold, cfg.sync.red_margin))
            .map_err(|source| PipelineError::Sync { context: ctx(p), source });
    }
    if let Some(p) = &files.video {
        let roi = roi()?;
        meta.add(cfg, p)?;
        return decode_counts(cfg, p, &roi);
    }
    Err(missing("trim", rel_join(rel, &format!("{seg} camera {cam}: LED trace, frame stream or video"))))
}

fn trim_segment(cfg: &PipelineConfig, trial: &TrialEntry, seg: &Segment, mode: &TrimMode) -> Result<Vec<String>, PipelineError> {
    let m = mirror(cfg, &trial.rel_path);
    let mut meta = ArtifactMeta::new("trim");
    let sync_ctx = rel_join(&trial.rel_path, &seg.name);
    let plan = match mode {
        TrimMode::Auto { num_trials, fixed_length_s, rois } => {
            let traces = seg
                .cameras
                .iter()
                .map(|(cam, files)| camera_trace(cfg, &trial.rel_path, &seg.name, cam, files, rois, &mut meta))
                .collect::<Result<Vec<_>, _>>()?;
            let mut plan = plan_trims(
                &traces,
                &PlanOptions {
                    num_trials: *num_trials,
                    fixed_length_s: *fixed_length_s,
                    pixel_threshold: cfg.sync.pixel_threshold,
                    debounce: cfg.sync.debounce,
                    max_frame_skew: cfg.sync.max_frame_skew,
                },
            )
            .map_err(|source| PipelineError::Sync { context: sync_ctx.clone(), source })?;
            plan.metadata.light_threshold = Some(cfg.sync.light_threshold);
            plan
        }
        TrimMode::Manual { start, end } => {
            let windows = seg
                .cameras
                .keys()
                .map(|cam| manual_window(*start, *end, cam))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| PipelineError::Sync { context: sync_ctx.clone(), source })?;
            TrimPlan {
                trials: vec![TrimTrial { index: 0, windows }],
                fps: seg.cameras.keys().map(|c| (c.clone(), cfg.fps)).collect(),
                metadata: PlanMetadata {
                    mode: "manual".into(),
                    end_frame_convention: "last_on_inclusive".into(),
                    fixed_length_s: None,
                    light_threshold: None,
                    pixel_threshold: None,
                    debounce: None,
                },
            }
        }
    };

    let mut written = Vec::new();
    for (cam, files) in &seg.cameras {
        let Some(src) = &files.detections else { continue };
        meta.add(cfg, src)?;
        let det = read_detections_csv(src, cam, cfg.body_part.schema_id())
            .map_err(|source| PipelineError::Triangulation { context: src.display().to_string(), source })?;
        for t in &plan.trials {
            let w = plan.window(t.index, cam).expect("every camera has a window");
            let rows = det
                .rows
                .iter()
                .filter(|r| w.contains(r.frame as usize))
                .map(|r| crate::triangulation::Detection { frame: r.frame - w.start_frame as u64, ..*r })
                .collect();
            let out = trimmed_path(&m, &seg.name, t.index, cam);
            std::fs::create_dir_all(out.parent().expect("has parent")).map_err(io_err(&out))?;
            write_detections_csv(&out, &Detections2D { camera: cam.clone(), landmark_schema: det.landmark_schema.clone(), rows })
                .map_err(|source| PipelineError::Triangulation { context: out.display().to_string(), source })?;
            written.push(rel_string(&cfg.saving_dir, &out));
        }
    }
    let plan_file = plan_path(&m, &seg.name);
    write_file(&plan_file, plan.to_json().as_bytes())?;
    meta.write(&meta_path(&plan_file))?;
    written.push(rel_string(&cfg.saving_dir, &plan_file));
    written.push(rel_string(&cfg.saving_dir, &meta_path(&plan_file)));
    Ok(written)
}

pub fn run_trim(cfg: &PipelineConfig, index: &DatasetIndex, args: &TrimArgs) -> Result<StepOutcome, PipelineError> {
    let work: Vec<(&TrialEntry, &Segment)> =
        index.scoped(&args.scope).into_iter().flat_map(|t| t.segments.iter().map(move |s| (t, s))).collect();
    if work.is_empty() {
        return Err(PipelineError::Invalid(format!("no trials under scope {:?}", args.scope)));
    }
    let results: Vec<_> = work.par_iter().map(|(t, s)| trim_segment(cfg, t, s, &args.mode)).collect();
    Ok(StepOutcome::new("trim", collect(results)?.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateArgs {
    /// Defaults to `<dataset>/<scope>/calibration/corners.csv`.
    pub corners: Option<PathBuf>,
    pub scope: String,
    pub board: Option<BoardSpec>,
    pub image_size: Option<(u32, u32)>,
}

pub fn run_calibrate(cfg: &PipelineConfig, args: &CalibrateArgs) -> Result<StepOutcome, PipelineError> {
    let scope = args.scope.trim_matches('/');
    let corners = match &args.corners {
        Some(p) => p.clone(),
        None => join_rel(&cfg.dataset_root, &rel_join(scope, "calibration/corners.csv")),
    };
    if !corners.exists() {
        return Err(missing("calibrate", corners.display().to_string()));
    }
    let ctx = corners.display().to_string();
    let obs = read_corner_csv(&corners).map_err(|source| PipelineError::Calibration { context: ctx.clone(), source })?;
    let board = args.board.clone().unwrap_or_else(|| cfg.board.clone());
    let mut opts = CalibrationOptions::default();
    if let Some(size) = args.image_size {
        opts.image_size = size;
    }
    let result = calibrate_rig(&board, &obs, &opts).map_err(|source| PipelineError::Calibration { context: ctx, source })?;
    let out = join_rel(&cfg.saving_dir, &rel_join(scope, &format!("{CALIBRATION_DIR}/{CALIBRATION_FILE}")));
    write_calibration(&result, &out)
        .map_err(|source| PipelineError::Calibration { context: out.display().to_string(), source })?;
    let mut meta = ArtifactMeta::new("calibrate");
    meta.add(cfg, &corners)?;
    meta.info = serde_json::json!({
        "board": board,
        "rms_error_px": result.rms_error_px,
        "per_camera_error_px": result.per_camera_error_px,
        "iterations": result.iterations,
        "image_size": [opts.image_size.0, opts.image_size.1],
    });
    meta.write(&meta_path(&out))?;
    Ok(StepOutcome::new(
        "calibrate",
        vec![rel_string(&cfg.saving_dir, &out), rel_string(&cfg.saving_dir, &meta_path(&out))],
    ))
}

/// Nearest `calibration/calibration.toml` at or above `rel` in the saving
/// directory.
pub fn find_calibration(saving_dir: &Path, rel: &str) -> Option<PathBuf> {
    let parts: Vec<&str> = rel.split('/').filter(|s| !s.is_empty()).collect();
    (0..=parts.len()).rev().find_map(|n| {
        let p = join_rel(saving_dir, &parts[..n].join("/")).join(CALIBRATION_DIR).join(CALIBRATION_FILE);
        p.is_file().then_some(p)
    })
}

fn triangulate_segment(cfg: &PipelineConfig, trial: &TrialEntry, seg: &Segment) -> Result<Vec<String>, PipelineError> {
    let step = "triangulate";
    let m = mirror(cfg, &trial.rel_path);
    let plan_file = plan_path(&m, &seg.name);
    if !plan_file.exists() {
        return Err(missing(step, rel_string(&cfg.saving_dir, &plan_file)));
    }
    let calib = find_calibration(&cfg.saving_dir, &trial.rel_path)
        .ok_or_else(|| missing(step, format!("{CALIBRATION_DIR}/{CALIBRATION_FILE}")))?;
    ArtifactMeta::read(&meta_path(&plan_file))?.verify(cfg, step)?;
    let calib_ctx = calib.display().to_string();
    let rig = read_calibration(&calib).map_err(|source| PipelineError::Calibration { context: calib_ctx, source })?;
    let plan_text = std::fs::read_to_string(&plan_file).map_err(io_err(&plan_file))?;
    let plan = TrimPlan::from_json(&plan_text)
        .map_err(|source| PipelineError::Sync { context: plan_file.display().to_string(), source })?;

    let mut written = Vec::new();
    for t in &plan.trials {
        let mut meta = ArtifactMeta::new(step);
        meta.add(cfg, &calib)?;
        meta.add(cfg, &plan_file)?;
        let mut dets = Vec::new();
        for w in &t.windows {
            let p = trimmed_path(&m, &seg.name, t.index, &w.camera);
            if !p.exists() {
                return Err(missing(step, rel_string(&cfg.saving_dir, &p)));
            }
            meta.add(cfg, &p)?;
            dets.push(
                read_detections_csv(&p, &w.camera, cfg.body_part.schema_id())
                    .map_err(|source| PipelineError::Triangulation { context: p.display().to_string(), source })?,
            );
        }
        let observed = dets.iter().flat_map(|d| d.rows.iter().map(|r| r.landmark_id + 1)).max().unwrap_or(0);
        let n_landmarks = cfg.body_part.schema(observed).len() as u32;
        let name = format!("{}-t{}", seg.name, t.index);
        let ctx = rel_join(&trial.rel_path, &name);
        let records = triangulate_trial(&rig, &dets, n_landmarks, &cfg.triangulation_options())
            .map_err(|source| PipelineError::Triangulation { context: ctx, source })?;
        let out = m.join(POSE_DIR).join(format!("{name}.csv"));
        std::fs::create_dir_all(out.parent().expect("has parent")).map_err(io_err(&out))?;
        write_points_csv(&out, &records)
            .map_err(|source| PipelineError::Triangulation { context: out.display().to_string(), source })?;
        meta.info = serde_json::json!({ "landmarks": n_landmarks, "frames": records.len() / n_landmarks.max(1) as usize });
        meta.write(&meta_path(&out))?;
        written.push(rel_string(&cfg.saving_dir, &out));
        written.push(rel_string(&cfg.saving_dir, &meta_path(&out)));
    }
    Ok(written)
}

pub fn run_triangulate(cfg: &PipelineConfig, index: &DatasetIndex, scope: &str) -> Result<StepOutcome, PipelineError> {
    let work: Vec<(&TrialEntry, &Segment)> =
        index.scoped(scope).into_iter().flat_map(|t| t.segments.iter().map(move |s| (t, s))).collect();
    if work.is_empty() {
        return Err(PipelineError::Invalid(format!("no trials under scope {scope:?}")));
    }
    let results: Vec<_> = work.par_iter().map(|(t, s)| triangulate_segment(cfg, t, s)).collect();
    Ok(StepOutcome::new("triangulate", collect(results)?.into_iter().flatten().collect()))
}

/// 3D point files at or below `scope`, as (trial rel path, segment, path).
fn pose_files(cfg: &PipelineConfig, scope: &str, step: &str) -> Result<Vec<(String, String, PathBuf)>, PipelineError> {
    let root = join_rel(&cfg.saving_dir, scope);
    let mut out = Vec::new();
    if root.is_dir() {
        for e in WalkDir::new(&root).sort_by_file_name() {
            let e = e.map_err(|e| PipelineError::Invalid(e.to_string()))?;
            let p = e.path();
            let in_pose = p.parent().and_then(Path::file_name).is_some_and(|n| n == POSE_DIR);
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if e.file_type().is_file() && in_pose && name.ends_with(".csv") {
                let trial_dir = p.parent().and_then(Path::parent).expect("pose dir has parent");
                let seg = name.trim_end_matches(".csv").to_owned();
                out.push((rel_string(&cfg.saving_dir, trial_dir), seg, p.to_path_buf()));
            }
        }
    }
    if out.is_empty() {
        return Err(missing(step, rel_join(scope.trim_matches('/'), &format!("{POSE_DIR}/*.csv"))));
    }
    Ok(out)
}

fn load_points(cfg: &PipelineConfig, path: &Path, step: &str) -> Result<Vec<crate::triangulation::Point3DRecord>, PipelineError> {
    verify_artifact(cfg, path, step)?;
    read_points_csv(path).map_err(|source| PipelineError::Triangulation { context: path.display().to_string(), source })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TrialMetricsFile {
    pub trial: String,
    pub segment: String,
    pub metrics: crate::metrics::TrialMetrics,
    pub fps: f64,
}

pub(crate) const METRICS_CSV_HEADER: &str = "subject,trial,corr,ldj,err_mm,pct_large,n_frames,n_markers";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run_metrics(cfg: &PipelineConfig, scope: &str) -> Result<StepOutcome, PipelineError> {
    let step = "metrics";
    let files = pose_files(cfg, scope, step)?;
    let opts = cfg.metrics_options();
    let results: Vec<_> = files
        .par_iter()
        .map(|(rel, seg, path)| -> Result<Vec<String>, PipelineError> {
            let records = load_points(cfg, path, step)?;
            let ctx = rel_join(rel, seg);
            let metrics = compute_trial_metrics(&records, cfg.fps, &opts)
                .map_err(|source| PipelineError::Metrics { context: ctx.clone(), source })?;
            let dir = mirror(cfg, rel).join(METRICS_DIR);
            let json_path = dir.join(format!("{seg}.json"));
            let file = TrialMetricsFile { trial: rel.clone(), segment: seg.clone(), metrics, fps: cfg.fps };
            let mut json = serde_json::to_string_pretty(&file).map_err(|e| PipelineError::Invalid(e.to_string()))?;
            json.push('\n');
            write_file(&json_path, json.as_bytes())?;
            let m = &file.metrics;
            let subject = rel.split('/').next().unwrap_or("");
            let csv = format!(
                "{METRICS_CSV_HEADER}\n{subject},{ctx},{},{},{},{},{},{}\n",
                fmt_opt(m.corr_median),
                fmt_opt(m.ldj_median),
                m.err_mm_median,
                m.pct_large_errors,
                m.n_frames,
                m.n_markers
            );
            let csv_path = dir.join(format!("{seg}.csv"));
            write_file(&csv_path, csv.as_bytes())?;
            let mut meta = ArtifactMeta::new(step);
            meta.add(cfg, path)?;
            meta.write(&meta_path(&json_path))?;
            Ok(vec![
                rel_string(&cfg.saving_dir, &json_path),
                rel_string(&cfg.saving_dir, &csv_path),
                rel_string(&cfg.saving_dir, &meta_path(&json_path)),
            ])
        })
        .collect();
    Ok(StepOutcome::new(step, collect(results)?.into_iter().flatten().collect()))
}

pub fn run_features(cfg: &PipelineConfig, scope: &str) -> Result<StepOutcome, PipelineError> {
    let step = "features";
    let files = pose_files(cfg, scope, step)?;
    let results: Vec<_> = files
        .par_iter()
        .map(|(rel, seg, path)| -> Result<Vec<String>, PipelineError> {
            let records = load_points(cfg, path, step)?;
            let observed = records.iter().map(|r| r.landmark_id + 1).max().unwrap_or(0);
            let schema = cfg.body_part.schema(observed);
            let table = feature_table_from_records(&records, &schema)
                .map_err(|source| PipelineError::Features { context: rel_join(rel, seg), source })?;
            let out = mirror(cfg, rel).join(FEATURES_DIR).join(format!("{seg}.csv"));
            write_file(&out, table.to_csv().as_bytes())?;
            let mut meta = ArtifactMeta::new(step);
            meta.add(cfg, path)?;
            meta.info = serde_json::json!({ "schema": schema.id });
            meta.write(&meta_path(&out))?;
            Ok(vec![rel_string(&cfg.saving_dir, &out), rel_string(&cfg.saving_dir, &meta_path(&out))])
        })
        .collect();
    Ok(StepOutcome::new(step, collect(results)?.into_iter().flatten().collect()))
}
