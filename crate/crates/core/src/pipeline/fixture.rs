use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use serde::Serialize;

use super::{write_file, PipelineError};
use crate::calibration::{render_calibration, write_corner_csv, BoardSpec};
use crate::sync::write_trace_csv;
use crate::synthetic::{
    board_poses, hand_path, hand_template, make_rig, project_board, project_scene, synth_led_trace, HandPose,
    SyntheticScene,
};
use crate::trajectory::Trajectory3D;
use crate::triangulation::{render_points_csv, write_detections_csv, Point3DRecord};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureOptions {
    pub seed: u64,
    pub subjects: usize,
    pub conditions: usize,
    pub cameras: usize,
    pub radius_m: f64,
    pub noise_px: f64,
    pub corner_noise_px: f64,
    pub fps: f64,
    pub duration_s: f64,
    pub board_poses: usize,
    /// Frames before the LED turns on, for the earliest camera.
    pub lead_frames: usize,
    pub tail_frames: usize,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            subjects: 2,
            conditions: 2,
            cameras: 3,
            radius_m: 0.8,
            noise_px: 1.0,
            corner_noise_px: 0.3,
            fps: 60.0,
            duration_s: 2.0,
            board_poses: 20,
            lead_frames: 20,
            tail_frames: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureTrial {
    pub path: String,
    pub segment: String,
    pub led_events: BTreeMap<String, (usize, usize)>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureSummary {
    pub options: FixtureOptions,
    pub cameras: Vec<String>,
    /// Extra frames each camera recorded before the shared timeline.
    pub frame_offsets: BTreeMap<String, usize>,
    pub trials: Vec<FixtureTrial>,
    #[serde(skip)]
    pub dataset_root: PathBuf,
}

fn frame_offset(cam: usize) -> usize {
    4 * cam + cam % 2
}

/// Hold the first and last samples for `lead` and `tail` extra frames.
fn pad(t: &Trajectory3D, fps: f64, lead: usize, tail: usize) -> Trajectory3D {
    let p = t.dense().expect("gap-free");
    let first = p[0];
    let last = p[p.len() - 1];
    let mut out = vec![first; lead];
    out.extend(p);
    out.extend(std::iter::repeat_n(last, tail));
    Trajectory3D::from_uniform(t.landmark_id, fps, out)
}

/// Write a complete synthetic dataset: per-camera detections and LED traces
/// under `dataset/<subject>/<condition>/`, board corners under
/// `dataset/calibration/`, and ground truth under `ground_truth/`.
pub fn write_fixture(out: &Path, opts: &FixtureOptions) -> Result<FixtureSummary, PipelineError> {
    if opts.subjects == 0 || opts.conditions == 0 {
        return Err(PipelineError::Invalid("need at least one subject and one condition".into()));
    }
    let srig = make_rig(opts.cameras, opts.radius_m, Point3::origin())?;
    let rig = &srig.rig;
    let names: Vec<String> = rig.cameras().iter().map(|c| c.name.clone()).collect();
    let dataset = out.join("dataset");
    let truth_dir = out.join("ground_truth");

    let board = BoardSpec::default();
    let poses = board_poses(&srig, &board, opts.board_poses, opts.seed);
    let corners = project_board(rig, &board, &poses, opts.corner_noise_px, opts.seed);
    write_corner_csv(&dataset.join("calibration").join("corners.csv"), &corners)
        .map_err(|source| PipelineError::Calibration { context: "corners.csv".into(), source })?;
    write_file(&truth_dir.join("rig.toml"), render_calibration(rig, 0.0).as_bytes())?;

    let mut trials = Vec::new();
    for s in 0..opts.subjects {
        for c in 0..opts.conditions {
            let rel = format!("S{}/C{}", s + 1, c + 1);
            let trial_seed = opts.seed.wrapping_mul(1_000_003).wrapping_add((s * 100 + c) as u64);
            let start = srig.target + Vector3::new(-0.08 + 0.01 * s as f64, 0.03, 0.01 * c as f64);
            let d = Vector3::new(0.16 + 0.02 * s as f64, -0.06 + 0.01 * c as f64, 0.05);
            let pose = if c % 2 == 0 { HandPose::Open } else { HandPose::Fist };
            let path = hand_path(&hand_template(pose), start, d, opts.duration_s, opts.fps)?;
            let n = path[0].len();
            let padded: Vec<Trajectory3D> =
                path.iter().map(|t| pad(t, opts.fps, opts.lead_frames, opts.tail_frames)).collect();
            let scene = SyntheticScene {
                rig: rig.clone(),
                trajectories: padded,
                noise_px: opts.noise_px,
                seed: trial_seed,
                dropout: Vec::new(),
                landmark_schema: "hand21".into(),
                board: board.clone(),
                board_poses: Vec::new(),
            };
            let projected = project_scene(&scene);
            let dir = dataset.join(&rel);
            let mut led_events = BTreeMap::new();
            for (ci, mut det) in projected.detections.into_iter().enumerate() {
                let off = frame_offset(ci);
                for r in &mut det.rows {
                    r.frame += off as u64;
                }
                let cam = &names[ci];
                let p = dir.join(format!("trial-cam{cam}.2d.csv"));
                std::fs::create_dir_all(&dir).map_err(super::io_err(&dir))?;
                write_detections_csv(&p, &det)
                    .map_err(|source| PipelineError::Triangulation { context: p.display().to_string(), source })?;
                let on = opts.lead_frames + off;
                let (trace, truth) =
                    synth_led_trace(cam, opts.fps, on, on + n - 1, 1, opts.tail_frames.max(1), 3, trial_seed ^ ci as u64)?;
                let tp = dir.join(format!("trial-cam{cam}.trace.csv"));
                write_trace_csv(&tp, &trace).map_err(|source| PipelineError::Sync { context: tp.display().to_string(), source })?;
                led_events.insert(cam.clone(), truth.events[0]);
            }
            let records: Vec<Point3DRecord> = (0..n)
                .flat_map(|f| {
                    path.iter().map(move |t| Point3DRecord {
                        frame: f as u64,
                        landmark_id: t.landmark_id,
                        position: t.positions()[f].map(Point3::from),
                        n_cams_used: 0,
                        reproj_error_px: None,
                        reproj_error_mm: None,
                    })
                })
                .collect();
            write_file(&truth_dir.join(&rel).join("trial-t0.csv"), render_points_csv(&records).as_bytes())?;
            trials.push(FixtureTrial { path: rel, segment: "trial-t0".into(), led_events, frames: n });
        }
    }
    let summary = FixtureSummary {
        options: opts.clone(),
        frame_offsets: names.iter().enumerate().map(|(i, n)| (n.clone(), frame_offset(i))).collect(),
        cameras: names,
        trials,
        dataset_root: dataset,
    };
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| PipelineError::Invalid(e.to_string()))?;
    json.push('\n');
    write_file(&out.join("ground_truth.json"), json.as_bytes())?;
    Ok(summary)
}
