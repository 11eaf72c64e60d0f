//! Multi-view triangulation with exhaustive pair search and inlier refit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Point3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{camera_depth, project_point, undistort_point, CameraRig, GeometryError};

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;
pub const DEFAULT_INLIER_THRESHOLD_PX: f64 = 20.0;

#[derive(Debug, Error)]
pub enum TriangulationError {
    #[error("need at least 2 confident views, have {0}")]
    InsufficientViews(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("no detections")]
    EmptyInput,
    #[error("camera {0:?} not in rig")]
    UnknownCamera(String),
    #[error("camera {camera}: duplicate detection for frame {frame} landmark {landmark}")]
    DuplicateDetection { camera: String, frame: u64, landmark: u32 },
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u64,
    pub landmark_id: u32,
    #[serde(rename = "x_px")]
    pub x: f64,
    #[serde(rename = "y_px")]
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detections2D {
    pub camera: String,
    pub landmark_schema: String,
    pub rows: Vec<Detection>,
}

/// One camera's observation of a point; `camera` indexes the rig.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub camera: usize,
    pub pixel: Vector2<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulatedPoint {
    pub position: Point3<f64>,
    /// `(camera index, reprojection error px)` for every contributing view.
    pub errors_px: Vec<(usize, f64)>,
}

impl TriangulatedPoint {
    pub fn mean_error_px(&self) -> f64 {
        self.errors_px.iter().map(|e| e.1).sum::<f64>() / self.errors_px.len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TriangulationOptions {
    pub min_confidence: f64,
    pub inlier_threshold_px: f64,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self { min_confidence: DEFAULT_MIN_CONFIDENCE, inlier_threshold_px: DEFAULT_INLIER_THRESHOLD_PX }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3DRecord {
    pub frame: u64,
    pub landmark_id: u32,
    pub position: Option<Point3<f64>>,
    pub n_cams_used: usize,
    pub reproj_error_px: Option<f64>,
    pub reproj_error_mm: Option<f64>,
}

/// Reprojection error of `x` in a view; infinite when behind the camera.
pub fn reprojection_error(rig: &CameraRig, view: &View, x: &Point3<f64>) -> f64 {
    let cam = &rig.cameras()[view.camera];
    match project_point(&cam.intrinsics, &cam.extrinsics, x) {
        Ok(px) => (px - view.pixel).norm(),
        Err(_) => f64::INFINITY,
    }
}

fn confident(views: &[View], min_confidence: f64) -> Vec<View> {
    views.iter().filter(|v| v.confidence >= min_confidence).copied().collect()
}

/// Confidence-weighted linear DLT over every view given (no gating).
fn dlt(rig: &CameraRig, views: &[View]) -> Result<Point3<f64>, TriangulationError> {
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, v) in views.iter().enumerate() {
        let cam = rig
            .cameras()
            .get(v.camera)
            .ok_or_else(|| TriangulationError::UnknownCamera(format!("#{}", v.camera)))?;
        let n = undistort_point(&cam.intrinsics, &v.pixel)?;
        let r = cam.extrinsics.rotation();
        let t = cam.extrinsics.tvec;
        let w = v.confidence;
        for c in 0..3 {
            a[(2 * k, c)] = w * (n.x * r[(2, c)] - r[(0, c)]);
            a[(2 * k + 1, c)] = w * (n.y * r[(2, c)] - r[(1, c)]);
        }
        a[(2 * k, 3)] = w * (n.x * t.z - t.x);
        a[(2 * k + 1, 3)] = w * (n.y * t.z - t.y);
    }
    // X = centre + scale·Y, centred on the cameras
    let centres: Vec<Vector3<f64>> = views.iter().map(|v| rig.cameras()[v.camera].extrinsics.center()).collect();
    let centre = centres.iter().sum::<Vector3<f64>>() / centres.len() as f64;
    let spread = centres.iter().map(|c| (c - centre).norm()).sum::<f64>() / centres.len() as f64;
    let scale = if spread > 0.0 { spread } else { 1.0 };
    for r in 0..a.nrows() {
        let shift = a[(r, 0)] * centre.x + a[(r, 1)] * centre.y + a[(r, 2)] * centre.z;
        a[(r, 3)] += shift;
        for c in 0..3 {
            a[(r, c)] *= scale;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| TriangulationError::DegenerateGeometry("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smax = svd.singular_values[order[order.len() - 1]];
    if order.len() < 4 || !(svd.singular_values[order[1]] > 1e-10 * smax) {
        return Err(TriangulationError::DegenerateGeometry(
            "null space has more than one dimension".into(),
        ));
    }
    let x = v_t.row(order[0]);
    if x[3].abs() < 1e-14 * x.norm() {
        return Err(TriangulationError::DegenerateGeometry("point at infinity".into()));
    }
    Ok(Point3::from(centre + Vector3::new(x[0], x[1], x[2]) * (scale / x[3])))
}

/// Linear triangulation from every view with confidence ≥ `min_confidence`.
pub fn triangulate_point(
    rig: &CameraRig,
    views: &[View],
    min_confidence: f64,
) -> Result<TriangulatedPoint, TriangulationError> {
    let used = confident(views, min_confidence);
    if used.len() < 2 {
        return Err(TriangulationError::InsufficientViews(used.len()));
    }
    let position = dlt(rig, &used)?;
    let errors_px = used.iter().map(|v| (v.camera, reprojection_error(rig, v, &position))).collect();
    Ok(TriangulatedPoint { position, errors_px })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacPoint {
    pub position: Point3<f64>,
    /// Camera indices of the views used for the returned position.
    pub inliers: Vec<usize>,
    pub errors_px: Vec<(usize, f64)>,
    /// Mean error over the inliers of the best pair's point.
    pub best_pair_error_px: f64,
}

impl RansacPoint {
    pub fn mean_error_px(&self) -> f64 {
        self.errors_px.iter().map(|e| e.1).sum::<f64>() / self.errors_px.len() as f64
    }
}

fn mean_error(rig: &CameraRig, views: &[View], x: &Point3<f64>) -> f64 {
    views.iter().map(|v| reprojection_error(rig, v, x)).sum::<f64>() / views.len() as f64
}

/// Outlier-robust triangulation: score every camera pair by mean error over
/// all confident views, keep views within the inlier threshold of the best
/// pair, and refit on them.
pub fn triangulate_ransac(
    rig: &CameraRig,
    views: &[View],
    opts: &TriangulationOptions,
) -> Result<RansacPoint, TriangulationError> {
    let conf = confident(views, opts.min_confidence);
    if conf.len() < 2 {
        return Err(TriangulationError::InsufficientViews(conf.len()));
    }
    if conf.len() == 2 {
        let p = triangulate_point(rig, &conf, opts.min_confidence)?;
        let err = p.mean_error_px();
        return Ok(RansacPoint {
            position: p.position,
            inliers: conf.iter().map(|v| v.camera).collect(),
            errors_px: p.errors_px,
            best_pair_error_px: err,
        });
    }

    let mut best: Option<(f64, Point3<f64>, [usize; 2])> = None;
    let mut last_err = None;
    for i in 0..conf.len() {
        for j in i + 1..conf.len() {
            match dlt(rig, &[conf[i], conf[j]]) {
                Ok(x) => {
                    let score = mean_error(rig, &conf, &x);
                    if best.as_ref().is_none_or(|b| score < b.0) {
                        best = Some((score, x, [i, j]));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
    }
    let Some((_, pair_x, pair)) = best else {
        return Err(last_err.unwrap_or(TriangulationError::InsufficientViews(conf.len())));
    };

    let mut inliers: Vec<View> = conf
        .iter()
        .filter(|v| reprojection_error(rig, v, &pair_x) <= opts.inlier_threshold_px)
        .copied()
        .collect();
    if inliers.len() < 2 {
        inliers = vec![conf[pair[0]], conf[pair[1]]];
    }
    let pair_err = mean_error(rig, &inliers, &pair_x);
    let position = match dlt(rig, &inliers) {
        Ok(x) if mean_error(rig, &inliers, &x) <= pair_err => x,
        _ => pair_x,
    };
    let errors_px = inliers.iter().map(|v| (v.camera, reprojection_error(rig, v, &position))).collect();
    Ok(RansacPoint {
        position,
        inliers: inliers.iter().map(|v| v.camera).collect(),
        errors_px,
        best_pair_error_px: pair_err,
    })
}

/// Pixel error to millimetres at the point's depth in `camera`.
pub fn px_to_mm(
    rig: &CameraRig,
    camera: usize,
    point: &Point3<f64>,
    err_px: f64,
) -> Result<f64, TriangulationError> {
    let cam = &rig.cameras()[camera];
    let z = camera_depth(&cam.extrinsics, point);
    if z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(z).into());
    }
    Ok(err_px * (z * rig.unit_scale()) / cam.intrinsics.mean_focal())
}

pub fn triangulate_trial(
    rig: &CameraRig,
    detections: &[Detections2D],
    landmark_count: u32,
    opts: &TriangulationOptions,
) -> Result<Vec<Point3DRecord>, TriangulationError> {
    let first = detections.first().ok_or(TriangulationError::EmptyInput)?;
    if detections.iter().all(|d| d.rows.is_empty()) {
        return Err(TriangulationError::EmptyInput);
    }
    let mut views: BTreeMap<(u64, u32), Vec<View>> = BTreeMap::new();
    let mut frames = BTreeSet::new();
    for det in detections {
        if det.landmark_schema != first.landmark_schema {
            return Err(TriangulationError::SchemaMismatch(format!(
                "camera {} uses {:?}, camera {} uses {:?}",
                first.camera, first.landmark_schema, det.camera, det.landmark_schema
            )));
        }
        let ci = rig
            .index_of(&det.camera)
            .ok_or_else(|| TriangulationError::UnknownCamera(det.camera.clone()))?;
        let mut seen = BTreeSet::new();
        for r in &det.rows {
            if r.landmark_id >= landmark_count {
                return Err(TriangulationError::SchemaMismatch(format!(
                    "camera {}: landmark {} outside schema {:?} ({landmark_count} landmarks)",
                    det.camera, r.landmark_id, det.landmark_schema
                )));
            }
            if !seen.insert((r.frame, r.landmark_id)) {
                return Err(TriangulationError::DuplicateDetection {
                    camera: det.camera.clone(),
                    frame: r.frame,
                    landmark: r.landmark_id,
                });
            }
            frames.insert(r.frame);
            if r.x.is_finite() && r.y.is_finite() && r.confidence.is_finite() {
                views.entry((r.frame, r.landmark_id)).or_default().push(View {
                    camera: ci,
                    pixel: Vector2::new(r.x, r.y),
                    confidence: r.confidence,
                });
            }
        }
    }
    let (lo, hi) = (*frames.first().expect("non-empty"), *frames.last().expect("non-empty"));
    let records: Vec<Point3DRecord> = (lo..=hi)
        .into_par_iter()
        .flat_map_iter(|frame| {
            let views = &views;
            (0..landmark_count).map(move |lm| {
                let vs = views.get(&(frame, lm)).map(Vec::as_slice).unwrap_or(&[]);
                record_for(rig, frame, lm, vs, opts)
            })
        })
        .collect();
    Ok(records)
}

fn record_for(rig: &CameraRig, frame: u64, landmark_id: u32, views: &[View], opts: &TriangulationOptions) -> Point3DRecord {
    let missing = Point3DRecord {
        frame,
        landmark_id,
        position: None,
        n_cams_used: 0,
        reproj_error_px: None,
        reproj_error_mm: None,
    };
    let Ok(p) = triangulate_ransac(rig, views, opts) else { return missing };
    let mm: Result<Vec<f64>, _> =
        p.errors_px.iter().map(|&(c, e)| px_to_mm(rig, c, &p.position, e)).collect();
    let Ok(mm) = mm else { return missing };
    let err_px = p.mean_error_px();
    if !err_px.is_finite() {
        return missing;
    }
    Point3DRecord {
        frame,
        landmark_id,
        position: Some(p.position),
        n_cams_used: p.inliers.len(),
        reproj_error_px: Some(err_px),
        reproj_error_mm: Some(mm.iter().sum::<f64>() / mm.len() as f64),
    }
}

pub fn read_detections_csv(path: &Path, camera: &str, schema: &str) -> Result<Detections2D, TriangulationError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let expected = ["frame", "landmark_id", "x_px", "y_px", "confidence"];
    if rdr.headers()?.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(TriangulationError::InvalidDetection(format!(
            "{}: header must be {}",
            path.display(),
            expected.join(",")
        )));
    }
    let rows = rdr.deserialize().collect::<Result<Vec<Detection>, _>>()?;
    for r in &rows {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(TriangulationError::InvalidDetection(format!(
                "{}: confidence {} outside [0, 1]",
                path.display(),
                r.confidence
            )));
        }
    }
    Ok(Detections2D { camera: camera.to_owned(), landmark_schema: schema.to_owned(), rows })
}

pub fn write_detections_csv(path: &Path, det: &Detections2D) -> Result<(), TriangulationError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &det.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const POINTS_HEADER: &str = "frame,landmark_id,X,Y,Z,n_cams,reproj_error_px,reproj_error_mm";

pub fn render_points_csv(records: &[Point3DRecord]) -> String {
    let mut out = String::from(POINTS_HEADER);
    out.push('\n');
    for r in records {
        let (x, y, z) = match r.position {
            Some(p) => (Some(p.x), Some(p.y), Some(p.z)),
            None => (None, None, None),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.frame,
            r.landmark_id,
            opt(x),
            opt(y),
            opt(z),
            r.n_cams_used,
            opt(r.reproj_error_px),
            opt(r.reproj_error_mm)
        ));
    }
    out
}

pub fn write_points_csv(path: &Path, records: &[Point3DRecord]) -> Result<(), TriangulationError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_points_csv(records).as_bytes())?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Vec<Point3DRecord>, TriangulationError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    if header.join(",") != POINTS_HEADER {
        return Err(TriangulationError::InvalidDetection(format!(
            "{}: header must be {POINTS_HEADER}",
            path.display()
        )));
    }
    let bad = |what: &str| TriangulationError::InvalidDetection(format!("{}: bad {what}", path.display()));
    let num = |s: &str| -> Result<Option<f64>, TriangulationError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad("number"))
        }
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 8 {
            return Err(bad("row width"));
        }
        let frame = rec[0].parse().map_err(|_| bad("frame"))?;
        let landmark_id = rec[1].parse().map_err(|_| bad("landmark_id"))?;
        let position = match (num(&rec[2])?, num(&rec[3])?, num(&rec[4])?) {
            (Some(x), Some(y), Some(z)) => Some(Point3::new(x, y, z)),
            (None, None, None) => None,
            _ => return Err(bad("position")),
        };
        out.push(Point3DRecord {
            frame,
            landmark_id,
            position,
            n_cams_used: rec[5].parse().map_err(|_| bad("n_cams"))?,
            reproj_error_px: num(&rec[6])?,
            reproj_error_mm: num(&rec[7])?,
        });
    }
    Ok(out)
}
