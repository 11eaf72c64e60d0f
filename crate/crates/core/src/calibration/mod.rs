//! Multi-camera rig calibration from planar board corner observations.
//!
//! Pipeline: per-frame homographies, closed-form intrinsics per camera,
//! board poses from homography decomposition, averaged pairwise relative
//! poses chained along a BFS tree rooted at camera 0, then a global
//! Levenberg–Marquardt refinement of everything.

mod bundle;
mod homography;
mod io;
mod zhang;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, CameraRig, GeometryError};

pub use bundle::{BundleObservation, BundleProblem, LmOptions, LmReport};
pub use homography::{apply_homography, estimate_homography};
pub use io::{
    parse_calibration, read_calibration, read_corner_csv, render_calibration, write_calibration,
    write_corner_csv, CalibrationMetadata,
};
pub use zhang::{pose_from_homography, zhang_intrinsics_init};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("insufficient views: {0} homographies, need at least 3")]
    InsufficientViews(usize),
    #[error("camera {camera}: only {found} usable board views, need at least 3")]
    CameraInsufficientViews { camera: String, found: usize },
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("rig is disconnected: cameras {0:?} never co-observe the board with camera 0's component")]
    DisconnectedRig(Vec<String>),
    #[error("bundle adjustment did not converge after {iterations} iterations (rms {rms_px:.4} px)")]
    NoConvergence { iterations: usize, rms_px: f64 },
    #[error("invalid board: {0}")]
    InvalidBoard(String),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub squares_x: u32,
    pub squares_y: u32,
    pub square_length_mm: f64,
    pub marker_length_mm: f64,
}

impl Default for BoardSpec {
    fn default() -> Self {
        Self { squares_x: 10, squares_y: 7, square_length_mm: 25.0, marker_length_mm: 18.75 }
    }
}

impl BoardSpec {
    pub fn new(
        squares_x: u32,
        squares_y: u32,
        square_length_mm: f64,
        marker_length_mm: f64,
    ) -> Result<Self, CalibrationError> {
        let b = Self { squares_x, squares_y, square_length_mm, marker_length_mm };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.squares_x < 3 || self.squares_y < 3 {
            return Err(CalibrationError::InvalidBoard(format!(
                "need at least 3x3 squares, got {}x{}",
                self.squares_x, self.squares_y
            )));
        }
        if !(self.marker_length_mm > 0.0 && self.marker_length_mm <= self.square_length_mm) {
            return Err(CalibrationError::InvalidBoard(format!(
                "marker length {} must be in (0, {}]",
                self.marker_length_mm, self.square_length_mm
            )));
        }
        Ok(())
    }

    pub fn corners_x(&self) -> u32 {
        self.squares_x - 1
    }

    pub fn n_corners(&self) -> u32 {
        (self.squares_x - 1) * (self.squares_y - 1)
    }

    /// Board-plane position of an interior corner, millimetres.
    pub fn corner_mm(&self, id: u32) -> Option<Vector2<f64>> {
        (id < self.n_corners()).then(|| {
            let ix = id % self.corners_x();
            let iy = id / self.corners_x();
            Vector2::new(f64::from(ix), f64::from(iy)) * self.square_length_mm
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornerObservation {
    pub camera: String,
    pub frame: u64,
    pub corner_id: u32,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub lm: LmOptions,
    /// Millimetres per world unit of the recovered rig.
    pub unit_scale: f64,
    pub image_size: (u32, u32),
    pub image_sizes: BTreeMap<String, (u32, u32)>,
    /// Non-converged runs are only reported as failures above this RMS.
    pub max_final_rms_px: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            lm: LmOptions::default(),
            unit_scale: 1000.0,
            image_size: (1920, 1080),
            image_sizes: BTreeMap::new(),
            max_final_rms_px: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub rig: CameraRig,
    pub rms_error_px: f64,
    pub per_camera_error_px: Vec<f64>,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
}

/// Average of rotations by the dominant eigenvector of `Σ q qᵀ`.
pub fn average_rotations(rs: &[Matrix3<f64>]) -> Matrix3<f64> {
    let mut m = Matrix4::<f64>::zeros();
    for r in rs {
        let q = UnitQuaternion::from_matrix(r);
        let v = Vector4::new(q.w, q.i, q.j, q.k);
        m += v * v.transpose();
    }
    let eig = m.symmetric_eigen();
    let (imax, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap_or((0, &0.0));
    let v = eig.eigenvectors.column(imax);
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
    q.to_rotation_matrix().into_inner()
}

struct Grouped {
    cameras: Vec<String>,
    /// per camera: frame -> (corner_id, pixel)
    views: Vec<BTreeMap<u64, Vec<(u32, Vector2<f64>)>>>,
}

fn group_observations(
    board: &BoardSpec,
    obs: &[CornerObservation],
) -> Result<Grouped, CalibrationError> {
    let mut cameras: Vec<String> = Vec::new();
    let mut views: Vec<BTreeMap<u64, Vec<(u32, Vector2<f64>)>>> = Vec::new();
    let mut seen = BTreeSet::new();
    for o in obs {
        if o.corner_id >= board.n_corners() {
            return Err(CalibrationError::InvalidObservation(format!(
                "corner {} out of range for a board with {} corners",
                o.corner_id,
                board.n_corners()
            )));
        }
        if !(o.pixel.x.is_finite() && o.pixel.y.is_finite()) {
            return Err(CalibrationError::InvalidObservation(format!(
                "non-finite pixel for camera {} frame {} corner {}",
                o.camera, o.frame, o.corner_id
            )));
        }
        if !seen.insert((o.camera.clone(), o.frame, o.corner_id)) {
            return Err(CalibrationError::InvalidObservation(format!(
                "duplicate observation camera {} frame {} corner {}",
                o.camera, o.frame, o.corner_id
            )));
        }
        let ci = match cameras.iter().position(|c| *c == o.camera) {
            Some(i) => i,
            None => {
                cameras.push(o.camera.clone());
                views.push(BTreeMap::new());
                cameras.len() - 1
            }
        };
        views[ci].entry(o.frame).or_default().push((o.corner_id, o.pixel));
    }
    Ok(Grouped { cameras, views })
}

pub fn calibrate_rig(
    board: &BoardSpec,
    obs: &[CornerObservation],
    opts: &CalibrationOptions,
) -> Result<CalibrationResult, CalibrationError> {
    board.validate()?;
    let grouped = group_observations(board, obs)?;
    let n_cams = grouped.cameras.len();
    if n_cams == 0 {
        return Err(CalibrationError::InvalidObservation("no observations".into()));
    }
    let to_world = |id: u32| board.corner_mm(id).map(|p| p / opts.unit_scale);

    // per-camera homographies and intrinsics
    let mut intrinsics = Vec::with_capacity(n_cams);
    let mut homs: Vec<BTreeMap<u64, Matrix3<f64>>> = Vec::with_capacity(n_cams);
    for (ci, name) in grouped.cameras.iter().enumerate() {
        let mut per_frame = BTreeMap::new();
        for (&frame, pts) in &grouped.views[ci] {
            if pts.len() < 4 {
                continue;
            }
            let bp: Vec<Vector2<f64>> = pts.iter().filter_map(|(id, _)| to_world(*id)).collect();
            let ip: Vec<Vector2<f64>> = pts.iter().map(|(_, p)| *p).collect();
            if let Ok(h) = estimate_homography(&bp, &ip) {
                per_frame.insert(frame, h);
            }
        }
        if per_frame.len() < 3 {
            return Err(CalibrationError::CameraInsufficientViews {
                camera: name.clone(),
                found: per_frame.len(),
            });
        }
        let size = opts.image_sizes.get(name).copied().unwrap_or(opts.image_size);
        let hs: Vec<Matrix3<f64>> = per_frame.values().copied().collect();
        let k = zhang_intrinsics_init(&hs, size).map_err(|e| match e {
            CalibrationError::RankDeficient(m) => {
                CalibrationError::RankDeficient(format!("camera {name}: {m}"))
            }
            other => other,
        })?;
        intrinsics.push(k);
        homs.push(per_frame);
    }

    // board→camera poses per (camera, frame)
    let mut board_poses: Vec<BTreeMap<u64, CameraExtrinsics>> = Vec::with_capacity(n_cams);
    for ci in 0..n_cams {
        let poses = homs[ci]
            .iter()
            .filter_map(|(&f, h)| pose_from_homography(&intrinsics[ci], h).map(|p| (f, p)))
            .collect();
        board_poses.push(poses);
    }

    // co-visibility graph + BFS from camera 0
    let shared = |a: usize, b: usize| -> Vec<u64> {
        board_poses[a].keys().filter(|f| board_poses[b].contains_key(f)).copied().collect()
    };
    let mut cam_pose: Vec<Option<CameraExtrinsics>> = vec![None; n_cams];
    cam_pose[0] = Some(CameraExtrinsics::identity());
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let ti = cam_pose[i].clone().expect("queued cameras are posed");
        for j in 0..n_cams {
            if cam_pose[j].is_some() {
                continue;
            }
            let frames = shared(i, j);
            if frames.is_empty() {
                continue;
            }
            // relative pose cam_i -> cam_j, one estimate per shared frame
            let rels: Vec<CameraExtrinsics> = frames
                .iter()
                .map(|f| board_poses[j][f].compose(&board_poses[i][f].inverse()))
                .collect();
            let rots: Vec<Matrix3<f64>> = rels.iter().map(|r| r.rotation()).collect();
            let t = rels.iter().fold(Vector3::zeros(), |a, r| a + r.tvec) / rels.len() as f64;
            let rel = CameraExtrinsics::from_rotation(&average_rotations(&rots), t);
            cam_pose[j] = Some(rel.compose(&ti));
            queue.push_back(j);
        }
    }
    let unreached: Vec<String> = (0..n_cams)
        .filter(|&i| cam_pose[i].is_none())
        .map(|i| grouped.cameras[i].clone())
        .collect();
    if !unreached.is_empty() {
        return Err(CalibrationError::DisconnectedRig(unreached));
    }
    let cam_pose: Vec<CameraExtrinsics> = cam_pose.into_iter().flatten().collect();

    // board→world per frame from the lowest-index camera that saw it
    let mut frame_index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut world_poses: Vec<CameraExtrinsics> = Vec::new();
    let all_frames: BTreeSet<u64> = board_poses.iter().flat_map(|m| m.keys().copied()).collect();
    for f in all_frames {
        if let Some(ci) = (0..n_cams).find(|&c| board_poses[c].contains_key(&f)) {
            let wp = cam_pose[ci].inverse().compose(&board_poses[ci][&f]);
            frame_index.insert(f, world_poses.len());
            world_poses.push(wp);
        }
    }

    let mut observations = Vec::new();
    for (ci, views) in grouped.views.iter().enumerate() {
        for (frame, pts) in views {
            let Some(&pose) = frame_index.get(frame) else { continue };
            for (id, px) in pts {
                let Some(bp) = to_world(*id) else { continue };
                observations.push(BundleObservation {
                    camera: ci,
                    pose,
                    board_point: Vector3::new(bp.x, bp.y, 0.0),
                    pixel: *px,
                });
            }
        }
    }
    let problem = BundleProblem { n_cameras: n_cams, n_poses: world_poses.len(), observations };

    let mut x0 = vec![0.0; problem.n_params()];
    for ci in 0..n_cams {
        let o = problem.intr_offset(ci);
        x0[o..o + 9].copy_from_slice(&intrinsics[ci].to_params());
        if let Some(o) = problem.ext_offset(ci) {
            x0[o..o + 3].copy_from_slice(cam_pose[ci].rotvec.as_slice());
            x0[o + 3..o + 6].copy_from_slice(cam_pose[ci].tvec.as_slice());
        }
    }
    for (pi, wp) in world_poses.iter().enumerate() {
        let o = problem.pose_offset(pi);
        x0[o..o + 3].copy_from_slice(wp.rotvec.as_slice());
        x0[o + 3..o + 6].copy_from_slice(wp.tvec.as_slice());
    }

    let report = problem.solve(x0, &opts.lm);
    let x = &report.params;

    let mut sq = vec![0.0; n_cams];
    let mut counts = vec![0usize; n_cams];
    for o in &problem.observations {
        let r = problem
            .residual(x, o)
            .ok_or_else(|| CalibrationError::NoConvergence {
                iterations: report.iterations,
                rms_px: f64::INFINITY,
            })?;
        sq[o.camera] += r.norm_squared();
        counts[o.camera] += 1;
    }
    let total: f64 = sq.iter().sum();
    let n_total: usize = counts.iter().sum();
    let rms = (total / n_total.max(1) as f64).sqrt();
    let per_camera: Vec<f64> = sq
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { (s / c as f64).sqrt() } else { 0.0 })
        .collect();
    if !rms.is_finite() || (!report.converged && rms > opts.max_final_rms_px) {
        return Err(CalibrationError::NoConvergence { iterations: report.iterations, rms_px: rms });
    }

    let mut cameras = Vec::with_capacity(n_cams);
    for ci in 0..n_cams {
        let mut k: CameraIntrinsics = intrinsics[ci].clone();
        let o = problem.intr_offset(ci);
        k.set_params(&x[o..o + 9]);
        let extrinsics = match problem.ext_offset(ci) {
            Some(o) => CameraExtrinsics::new(
                Vector3::new(x[o], x[o + 1], x[o + 2]),
                Vector3::new(x[o + 3], x[o + 4], x[o + 5]),
            ),
            None => CameraExtrinsics::identity(),
        };
        cameras.push(Camera { name: grouped.cameras[ci].clone(), intrinsics: k, extrinsics });
    }
    let rig = CameraRig::new(cameras, opts.unit_scale)?;
    Ok(CalibrationResult {
        rig,
        rms_error_px: rms,
        per_camera_error_px: per_camera,
        iterations: report.iterations,
        cost_history: report.cost_history,
    })
}
