//! Seeded ground-truth generators: camera rigs, board sweeps, hand poses and
//! paths, projected detections and LED intensity traces.

use std::ops::RangeInclusive;

use nalgebra::{Matrix3, Point3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{BoardSpec, CornerObservation};
use crate::geometry::{camera_depth, project_point, Camera, CameraExtrinsics, CameraIntrinsics, CameraRig};
use crate::sync::IntensityTrace;
use crate::trajectory::Trajectory3D;
use crate::triangulation::{Detection, Detections2D};

pub const SYNTH_WIDTH: u32 = 1920;
pub const SYNTH_HEIGHT: u32 = 1080;
pub const SYNTH_FOCAL: f64 = 1000.0;
pub const LED_ON_COUNT: u32 = 400;

const SYNTH_DISTORTION: [f64; 5] = [-0.05, 0.01, 0.0005, -0.0003, 0.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("trials overlap or touch: {0}")]
    OverlappingTrials(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub fn min_jerk_profile(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Point-to-point minimum-jerk path from the origin, sampled at `fps` over
/// `[0, T]`.
pub fn min_jerk_trajectory(d: Vector3<f64>, duration: f64, fps: f64) -> Result<Trajectory3D, SyntheticError> {
    if !(duration > 0.0) || !(fps * duration >= 8.0) {
        return Err(SyntheticError::InvalidParameter(format!("T={duration}, fps={fps}")));
    }
    let n = (duration * fps).round() as usize + 1;
    let p = (0..n).map(|i| d * min_jerk_profile(i as f64 / fps / duration)).collect();
    Ok(Trajectory3D::from_uniform(0, fps, p))
}

pub fn camera_name(i: usize) -> String {
    const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    if i < LETTERS.len() {
        (LETTERS[i] as char).to_string()
    } else {
        format!("{}", i - LETTERS.len())
    }
}

/// Rotation taking world to a camera at `center` looking at `target`, with
/// image y pointing along world +y.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let down = Vector3::y();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRig {
    pub rig: CameraRig,
    /// The aim point, in the rig frame (camera 0 coordinates).
    pub target: Point3<f64>,
}

/// Cameras on a horizontal arc of `radius` around `target`, all aimed at it,
/// re-expressed so camera 0 sits at the origin.
pub fn make_rig(n_cams: usize, radius: f64, target: Point3<f64>) -> Result<SyntheticRig, SyntheticError> {
    if n_cams < 2 || !(radius > 0.0) {
        return Err(SyntheticError::InvalidParameter(format!("n_cams={n_cams}, radius={radius}")));
    }
    let spread = (30.0 * (n_cams - 1) as f64).min(150.0).to_radians();
    let mut cameras = Vec::with_capacity(n_cams);
    for i in 0..n_cams {
        let theta = -spread / 2.0 + spread * i as f64 / (n_cams - 1) as f64;
        let lift = if i % 2 == 0 { -0.08 } else { 0.06 };
        let center = target.coords + radius * Vector3::new(theta.sin(), lift, -theta.cos());
        let r = look_at(&center, &target.coords);
        let f = SYNTH_FOCAL * (1.0 + 0.012 * (i as f64 - (n_cams - 1) as f64 / 2.0));
        let intrinsics = CameraIntrinsics::new(
            f,
            f * 1.002,
            f64::from(SYNTH_WIDTH) / 2.0 + 4.0 * i as f64,
            f64::from(SYNTH_HEIGHT) / 2.0 - 3.0 * i as f64,
            SYNTH_WIDTH,
            SYNTH_HEIGHT,
        )
        .with_distortion(SYNTH_DISTORTION);
        cameras.push(Camera {
            name: camera_name(i),
            intrinsics,
            extrinsics: CameraExtrinsics::from_rotation(&r, -(r * center)),
        });
    }
    let world = cameras[0].extrinsics.clone();
    let err = |e: crate::geometry::GeometryError| SyntheticError::InvalidParameter(e.to_string());
    let mut cameras = CameraRig::new(cameras, 1000.0).map_err(err)?.transformed(&world).cameras().to_vec();
    // exact gauge, free of composition round-off
    cameras[0].extrinsics = CameraExtrinsics::identity();
    let rig = CameraRig::new(cameras, 1000.0).map_err(err)?;
    Ok(SyntheticRig { rig, target: Point3::from(world.transform(&target)) })
}

/// Board-to-world poses sweeping tilt ±30° and distance ±20% around the
/// target, each facing the mean camera position.
pub fn board_poses(
    srig: &SyntheticRig,
    board: &BoardSpec,
    n_poses: usize,
    seed: u64,
) -> Vec<CameraExtrinsics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cams = srig.rig.cameras();
    let mean_c = cams.iter().map(|c| c.extrinsics.center()).sum::<Vector3<f64>>() / cams.len() as f64;
    let target = srig.target.coords;
    let to_target = target - mean_c;
    let dist = to_target.norm();
    let scale = srig.rig.unit_scale();
    let half = Vector3::new(
        f64::from(board.corners_x() - 1) * board.square_length_mm,
        f64::from(board.squares_y - 2) * board.square_length_mm,
        0.0,
    ) / (2.0 * scale);
    (0..n_poses)
        .map(|_| {
            let along = rng.random_range(-0.2..0.2) * dist;
            let side = Vector3::new(rng.random_range(-0.06..0.06), rng.random_range(-0.05..0.05), 0.0) * dist;
            let center = target + to_target.normalize() * along + side;
            // look_at gives world→board-axes; board→world is its transpose
            let base = look_at(&mean_c, &center).transpose();
            let tilt = Rotation3::from_euler_angles(
                rng.random_range(-30f64..30.0).to_radians(),
                rng.random_range(-30f64..30.0).to_radians(),
                rng.random_range(-15f64..15.0).to_radians(),
            );
            let r = base * tilt.matrix();
            CameraExtrinsics::from_rotation(&r, center - r * half)
        })
        .collect()
}

/// Exact projection or `None` when behind the camera or outside the image.
pub fn observe(cam: &Camera, x: &Point3<f64>) -> Option<Vector2<f64>> {
    if camera_depth(&cam.extrinsics, x) <= 0.0 {
        return None;
    }
    let px = project_point(&cam.intrinsics, &cam.extrinsics, x).ok()?;
    let (w, h) = (f64::from(cam.intrinsics.width), f64::from(cam.intrinsics.height));
    (px.x >= 0.0 && px.y >= 0.0 && px.x < w && px.y < h).then_some(px)
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

/// Corner observations of every board pose in every camera. Frame index =
/// pose index. Corners on the back side of the board are not seen.
pub fn project_board(
    rig: &CameraRig,
    board: &BoardSpec,
    poses: &[CameraExtrinsics],
    noise_px: f64,
    seed: u64,
) -> Vec<CornerObservation> {
    let scale = rig.unit_scale();
    let mut out = Vec::new();
    for (ci, cam) in rig.cameras().iter().enumerate() {
        let mut rng = noise_rng(seed, 1000 + ci as u64);
        let normal = gaussian(noise_px);
        for (frame, pose) in poses.iter().enumerate() {
            let board_z = pose.rotation().column(2).into_owned();
            let facing = board_z.dot(&(pose.tvec - cam.extrinsics.center()));
            if facing <= 0.0 {
                continue;
            }
            for id in 0..board.n_corners() {
                let c = board.corner_mm(id).expect("id in range") / scale;
                let x = Point3::from(pose.transform(&Point3::new(c.x, c.y, 0.0)));
                if let Some(px) = observe(cam, &x) {
                    let n = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    out.push(CornerObservation {
                        camera: cam.name.clone(),
                        frame: frame as u64,
                        corner_id: id,
                        pixel: px + n,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandPose {
    Open,
    Fist,
}

/// 21 hand landmarks in metres, wrist at the origin, fingers along −y and
/// flexing toward +z.
pub fn hand_template(pose: HandPose) -> Vec<Vector3<f64>> {
    // (mcp x, mcp y, abduction deg, length scale)
    let fingers = [(0.024, -0.085, 8.0f64, 0.95), (0.004, -0.09, 1.0, 1.0), (-0.015, -0.085, -6.0, 0.93), (-0.032, -0.075, -14.0, 0.75)];
    let (flex, spread, thumb_flex, thumb_dir) = match pose {
        HandPose::Open => ([10.0f64, 8.0, 5.0], 1.8, [5.0f64, 5.0], Vector3::new(0.8, -0.5, 0.3)),
        HandPose::Fist => ([90.0, 110.0, 80.0], 0.3, [30.0, 40.0], Vector3::new(-0.2, -0.7, 0.7)),
    };
    let segments = [0.045f64, 0.028, 0.022];
    let mut p = vec![Vector3::zeros(); 21];

    let thumb_cmc = Vector3::new(0.022, -0.025, -0.008);
    p[1] = thumb_cmc;
    let mut dir = thumb_dir.normalize();
    let bend_axis = dir.cross(&Vector3::z()).try_normalize(1e-9).unwrap_or(Vector3::x());
    let mut at = thumb_cmc;
    for (k, len) in [0.042, 0.032, 0.026].iter().enumerate() {
        at += dir * *len;
        p[2 + k] = at;
        if k < 2 {
            dir = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(bend_axis), thumb_flex[k].to_radians()) * dir;
        }
    }

    for (f, &(x, y, abd, s)) in fingers.iter().enumerate() {
        let base = 5 + 4 * f;
        let mcp = Vector3::new(x, y, 0.0);
        p[base] = mcp;
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), (abd * spread).to_radians());
        let mut pitch = 0.0f64;
        let mut at = mcp;
        for (k, len) in segments.iter().enumerate() {
            pitch += flex[k];
            let d = yaw * Vector3::new(0.0, -pitch.to_radians().cos(), pitch.to_radians().sin());
            at += d * (*len * s);
            p[base + 1 + k] = at;
        }
    }
    p
}

/// Rigidly translate `template` along a minimum-jerk path from `start`.
pub fn hand_path(
    template: &[Vector3<f64>],
    start: Point3<f64>,
    d: Vector3<f64>,
    duration: f64,
    fps: f64,
) -> Result<Vec<Trajectory3D>, SyntheticError> {
    let base = min_jerk_trajectory(d, duration, fps)?;
    let path = base.dense().expect("gap-free");
    Ok(template
        .iter()
        .enumerate()
        .map(|(id, off)| {
            let p = path.iter().map(|q| start.coords + off + q).collect();
            Trajectory3D::from_uniform(id as u32, fps, p)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub camera: usize,
    pub frames: RangeInclusive<u64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub rig: CameraRig,
    pub trajectories: Vec<Trajectory3D>,
    pub noise_px: f64,
    pub seed: u64,
    pub dropout: Vec<Dropout>,
    pub landmark_schema: String,
    pub board: BoardSpec,
    pub board_poses: Vec<CameraExtrinsics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedScene {
    pub detections: Vec<Detections2D>,
    pub corners: Vec<CornerObservation>,
}

/// Frame numbers are sample indices of the trajectories.
pub fn project_scene(scene: &SyntheticScene) -> ProjectedScene {
    let n_frames = scene.trajectories.iter().map(Trajectory3D::len).max().unwrap_or(0);
    let detections = scene
        .rig
        .cameras()
        .iter()
        .enumerate()
        .map(|(ci, cam)| {
            let mut rng = noise_rng(scene.seed, ci as u64);
            let normal = gaussian(scene.noise_px);
            let mut rows = Vec::new();
            for frame in 0..n_frames as u64 {
                let dropped = scene.dropout.iter().any(|d| d.camera == ci && d.frames.contains(&frame));
                for t in &scene.trajectories {
                    let Some(Some(x)) = t.positions().get(frame as usize) else { continue };
                    // draw noise even when dropped so other rows stay put
                    let n = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    if dropped {
                        continue;
                    }
                    if let Some(px) = observe(cam, &Point3::from(*x)) {
                        let px = px + n;
                        rows.push(Detection { frame, landmark_id: t.landmark_id, x: px.x, y: px.y, confidence: 1.0 });
                    }
                }
            }
            Detections2D { camera: cam.name.clone(), landmark_schema: scene.landmark_schema.clone(), rows }
        })
        .collect();
    let corners = project_board(&scene.rig, &scene.board, &scene.board_poses, scene.noise_px, scene.seed);
    ProjectedScene { detections, corners }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedTruth {
    pub events: Vec<(usize, usize)>,
    pub n_frames: usize,
}

/// LED ROI counts: `n_trials` ON spans of `off − on + 1` frames separated by
/// `gap` OFF frames, starting at `on_frame`. OFF frames carry uniform noise
/// in `[0, base_noise]`.
pub fn synth_led_trace(
    camera: &str,
    fps: f64,
    on_frame: usize,
    off_frame: usize,
    n_trials: usize,
    gap: usize,
    base_noise: u32,
    seed: u64,
) -> Result<(IntensityTrace, LedTruth), SyntheticError> {
    if on_frame > off_frame {
        return Err(SyntheticError::InvalidParameter(format!("on {on_frame} after off {off_frame}")));
    }
    if n_trials > 1 && gap == 0 {
        return Err(SyntheticError::OverlappingTrials("gap must be at least one frame".into()));
    }
    let len = off_frame - on_frame + 1;
    let events: Vec<(usize, usize)> = (0..n_trials)
        .map(|k| {
            let s = on_frame + k * (len + gap);
            (s, s + len - 1)
        })
        .collect();
    let n_frames = events.last().map_or(on_frame, |e| e.1 + 1) + on_frame.max(gap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: Vec<u32> = (0..n_frames).map(|_| rng.random_range(0..=base_noise)).collect();
    for &(s, e) in &events {
        counts[s..=e].fill(LED_ON_COUNT);
    }
    Ok((
        IntensityTrace { camera: camera.into(), fps, counts },
        LedTruth { events, n_frames },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::hull_volume;
    use crate::sync::detect_events;

    #[test]
    fn min_jerk_shape() {
        let d = Vector3::new(0.3, -0.1, 0.2);
        let t = min_jerk_trajectory(d, 1.0, 200.0).unwrap();
        let p = t.dense().unwrap();
        assert_eq!(p.len(), 201);
        assert!((p[100] - d * 0.5).norm() < 1e-15);
        assert!((p[200] - d).norm() < 1e-15);
        // endpoint velocity and acceleration by finite differences
        let h = 1e-8;
        let v0 = min_jerk_profile(h) / h;
        let a0 = (min_jerk_profile(2.0 * h) - 2.0 * min_jerk_profile(h)) / (h * h);
        assert!(v0.abs() < 1e-6 && a0.abs() < 1e-3);
        // peak speed 1.875 |D| / T at the midpoint
        let v = (min_jerk_profile(0.5 + h) - min_jerk_profile(0.5 - h)) / (2.0 * h);
        assert!((v - 1.875).abs() < 1e-6);
    }

    #[test]
    fn rig_sees_target() {
        let s = make_rig(3, 0.8, Point3::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(s.rig.len(), 3);
        assert_eq!(s.rig.cameras()[0].extrinsics, CameraExtrinsics::identity());
        for c in s.rig.cameras() {
            assert!(camera_depth(&c.extrinsics, &s.target) > 0.7);
            let px = observe(c, &s.target).unwrap();
            assert!((px - Vector2::new(c.intrinsics.cx, c.intrinsics.cy)).norm() < 1.0);
        }
        let centers: Vec<_> = s.rig.cameras().iter().map(|c| c.extrinsics.center()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!((centers[i] - centers[j]).norm() > 0.1);
            }
        }
    }

    #[test]
    fn open_hand_has_more_volume_than_fist() {
        let open = hull_volume(&hand_template(HandPose::Open)).unwrap();
        let fist = hull_volume(&hand_template(HandPose::Fist)).unwrap();
        assert!(open > fist, "open {open} fist {fist}");
    }

    #[test]
    fn led_trace_roundtrip() {
        let (tr, truth) = synth_led_trace("A", 30.0, 2, 61, 1, 10, 3, 7).unwrap();
        assert_eq!(truth.events, vec![(2, 61)]);
        for (i, &c) in tr.counts.iter().enumerate() {
            assert_eq!(c == LED_ON_COUNT, (2..=61).contains(&i));
        }
        let (tr, truth) = synth_led_trace("A", 30.0, 5, 40, 2, 25, 4, 1).unwrap();
        assert_eq!(detect_events(&tr, 5, 2), truth.events);
        assert!(matches!(synth_led_trace("A", 30.0, 5, 40, 2, 0, 4, 1), Err(SyntheticError::OverlappingTrials(_))));
    }

    #[test]
    fn board_sweep_is_visible() {
        let s = make_rig(3, 0.8, Point3::origin()).unwrap();
        let board = BoardSpec::default();
        let poses = board_poses(&s, &board, 20, 3);
        let obs = project_board(&s.rig, &board, &poses, 0.0, 0);
        for cam in s.rig.cameras() {
            let frames: std::collections::BTreeSet<u64> =
                obs.iter().filter(|o| o.camera == cam.name).map(|o| o.frame).collect();
            assert!(frames.len() >= 15, "{} sees {} poses", cam.name, frames.len());
        }
    }
}
