//! Pinhole camera model with 5-coefficient Brown–Conrady distortion.
//!
//! Convention: `X_cam = R · X_world + t`, rotations stored as axis-angle
//! vectors. Distortion coefficients are ordered `[k1, k2, p1, p2, k3]`.

use nalgebra::{Matrix3, Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0} in camera frame")]
    NonPositiveDepth(f64),
    #[error("undistortion did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

const UNDISTORT_MAX_ITERS: usize = 50;
const UNDISTORT_STEP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// `[k1, k2, p1, p2, k3]`
    pub dist: [f64; 5],
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self { fx, fy, cx, cy, dist: [0.0; 5], width, height }
    }

    pub fn with_distortion(mut self, dist: [f64; 5]) -> Self {
        self.dist = dist;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.dist.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidCamera("non-finite intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..f64::from(self.width)).contains(&self.cx)
            || !(0.0..f64::from(self.height)).contains(&self.cy)
        {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} sensor",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Packed parameter vector `[fx, fy, cx, cy, k1, k2, p1, p2, k3]`.
    pub fn to_params(&self) -> [f64; 9] {
        let d = self.dist;
        [self.fx, self.fy, self.cx, self.cy, d[0], d[1], d[2], d[3], d[4]]
    }

    pub fn set_params(&mut self, p: &[f64]) {
        self.fx = p[0];
        self.fy = p[1];
        self.cx = p[2];
        self.cy = p[3];
        self.dist.copy_from_slice(&p[4..9]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub rotvec: Vector3<f64>,
    pub tvec: Vector3<f64>,
}

impl Default for CameraExtrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self { rotvec: Vector3::zeros(), tvec: Vector3::zeros() }
    }

    pub fn new(rotvec: Vector3<f64>, tvec: Vector3<f64>) -> Self {
        Self { rotvec, tvec }
    }

    pub fn from_rotation(r: &Matrix3<f64>, tvec: Vector3<f64>) -> Self {
        Self { rotvec: rotation_to_rotvec(r), tvec }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rodrigues(&self.rotvec)
    }

    pub fn transform(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation() * p.coords + self.tvec
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.tvec)
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &CameraExtrinsics) -> CameraExtrinsics {
        let r = self.rotation() * other.rotation();
        let t = self.rotation() * other.tvec + self.tvec;
        CameraExtrinsics::from_rotation(&r, t)
    }

    pub fn inverse(&self) -> CameraExtrinsics {
        let rt = self.rotation().transpose();
        CameraExtrinsics::from_rotation(&rt, -(rt * self.tvec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    cameras: Vec<Camera>,
    /// Millimetres per world unit.
    unit_scale: f64,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, unit_scale: f64) -> Result<Self, GeometryError> {
        if !(unit_scale.is_finite() && unit_scale > 0.0) {
            return Err(GeometryError::InvalidCamera(format!("unit_scale {unit_scale}")));
        }
        for (i, c) in cameras.iter().enumerate() {
            c.intrinsics.validate()?;
            if cameras[..i].iter().any(|o| o.name == c.name) {
                return Err(GeometryError::InvalidCamera(format!(
                    "duplicate camera name {:?}",
                    c.name
                )));
            }
        }
        Ok(Self { cameras, unit_scale })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn unit_scale(&self) -> f64 {
        self.unit_scale
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, name: &str) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.name == name)
    }

    /// Apply a rigid world transform `X' = R X + t` to the rig: every camera
    /// pose is updated so projections of transformed points are unchanged.
    pub fn transformed(&self, world: &CameraExtrinsics) -> CameraRig {
        let inv = world.inverse();
        let cameras = self
            .cameras
            .iter()
            .map(|c| Camera { extrinsics: c.extrinsics.compose(&inv), ..c.clone() })
            .collect();
        CameraRig { cameras, unit_scale: self.unit_scale }
    }
}

/// Axis-angle vector to rotation matrix.
pub fn rodrigues(rotvec: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = rotvec.norm_squared();
    let (a, b) = rodrigues_coeffs(theta2);
    let k = rotvec.cross_matrix();
    Matrix3::identity() + k * a + k * k * b
}

/// `(sinθ/θ, (1-cosθ)/θ²)` with a Taylor branch near zero.
fn rodrigues_coeffs<T: Scalar>(theta2: T) -> (T, T) {
    if theta2.value() < 1e-8 {
        let a = T::cst(1.0) - theta2.scale(1.0 / 6.0);
        let b = T::cst(0.5) - theta2.scale(1.0 / 24.0);
        (a, b)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (T::cst(1.0) - theta.cos()) / theta2)
    }
}

/// Inverse of [`rodrigues`]; returns the vector with norm in `[0, π]`.
pub fn rotation_to_rotvec(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * w.norm();
    let c = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if c > -0.5 {
        let factor = if s < 1e-7 { 0.5 * (1.0 + theta * theta / 6.0) } else { 0.5 * theta / s };
        return w * factor;
    }
    // near π the antisymmetric part vanishes; read the axis from the symmetric part
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let j = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let mut axis = sym.column(j).into_owned();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Rotate `p` by the axis-angle vector `w`.
pub fn rotate<T: Scalar>(w: &[T; 3], p: &[T; 3]) -> [T; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = rodrigues_coeffs(theta2);
    let c1 = cross(w, p);
    let c2 = cross(w, &c1);
    [
        p[0] + a * c1[0] + b * c2[0],
        p[1] + a * c1[1] + b * c2[1],
        p[2] + a * c1[2] + b * c2[2],
    ]
}

fn cross<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Apply the distortion polynomial to normalized coordinates.
pub fn distort<T: Scalar>(dist: &[T], x: T, y: T) -> (T, T) {
    let (k1, k2, p1, p2, k3) = (dist[0], dist[1], dist[2], dist[3], dist[4]);
    let r2 = x * x + y * y;
    let radial = T::cst(1.0) + r2 * (k1 + r2 * (k2 + r2 * k3));
    let xy = x * y;
    let xd = x * radial + (p1 * xy).scale(2.0) + p2 * (r2 + (x * x).scale(2.0));
    let yd = y * radial + p1 * (r2 + (y * y).scale(2.0)) + (p2 * xy).scale(2.0);
    (xd, yd)
}

/// Camera-frame point to pixel. `intr` is `[fx, fy, cx, cy, k1, k2, p1, p2, k3]`.
/// Returns `None` when the depth is not positive.
pub fn project_camera_frame<T: Scalar>(intr: &[T], pc: &[T; 3]) -> Option<[T; 2]> {
    if pc[2].value() <= 0.0 {
        return None;
    }
    let x = pc[0] / pc[2];
    let y = pc[1] / pc[2];
    let (xd, yd) = distort(&intr[4..9], x, y);
    Some([intr[0] * xd + intr[2], intr[1] * yd + intr[3]])
}

pub fn project_point(
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    world_pt: &Point3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let pc = extr.transform(world_pt);
    if pc.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(pc.z));
    }
    let x = pc.x / pc.z;
    let y = pc.y / pc.z;
    let (xd, yd) = distort(&intr.dist, x, y);
    Ok(Vector2::new(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy))
}

/// Pixel to normalized (undistorted) image coordinates by fixed-point
/// iteration on the distortion polynomial.
pub fn undistort_point(
    intr: &CameraIntrinsics,
    pixel: &Vector2<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let x0 = (pixel.x - intr.cx) / intr.fx;
    let y0 = (pixel.y - intr.cy) / intr.fy;
    let [k1, k2, p1, p2, k3] = intr.dist;
    if intr.dist.iter().all(|&d| d == 0.0) {
        return Ok(Vector2::new(x0, y0));
    }
    let (mut x, mut y) = (x0, y0);
    for _ in 0..UNDISTORT_MAX_ITERS {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        if !(radial > 0.0) {
            return Err(GeometryError::NoConvergence(UNDISTORT_MAX_ITERS));
        }
        let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        let xn = (x0 - dx) / radial;
        let yn = (y0 - dy) / radial;
        let step = (xn - x).abs().max((yn - y).abs());
        x = xn;
        y = yn;
        if !step.is_finite() {
            break;
        }
        if step < UNDISTORT_STEP_TOL {
            return Ok(Vector2::new(x, y));
        }
    }
    Err(GeometryError::NoConvergence(UNDISTORT_MAX_ITERS))
}

pub fn camera_depth(extr: &CameraExtrinsics, world_pt: &Point3<f64>) -> f64 {
    extr.transform(world_pt).z
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cam1000() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720)
    }

    #[test]
    fn rodrigues_identity_and_half_turn() {
        assert_eq!(rodrigues(&Vector3::zeros()), Matrix3::identity());
        let r = rodrigues(&Vector3::new(0.0, 0.0, PI));
        let expect = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        assert!((r - expect).abs().max() < 1e-15);
    }

    #[test]
    fn rotvec_roundtrip_edge_angles() {
        for v in [
            Vector3::new(1e-12, 0.0, 0.0),
            Vector3::new(1e-5, -2e-5, 3e-6),
            Vector3::new(0.3, -0.2, 0.9),
            Vector3::new(0.0, 0.0, PI - 1e-6),
            Vector3::new(1.0, 1.0, 1.0).normalize() * (PI - 1e-3),
        ] {
            let back = rotation_to_rotvec(&rodrigues(&v));
            assert!((back - v).norm() < 1e-10, "{v:?} -> {back:?}");
        }
    }

    #[test]
    fn generic_rotate_matches_matrix() {
        let w = Vector3::new(0.4, -1.1, 0.25);
        let p = Vector3::new(0.3, 2.0, -1.0);
        let r = rodrigues(&w) * p;
        let g = rotate(&[w.x, w.y, w.z], &[p.x, p.y, p.z]);
        for i in 0..3 {
            assert!((r[i] - g[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn project_examples() {
        let unit = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 2, 2);
        let id = CameraExtrinsics::identity();
        let p = project_point(&unit, &id, &Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(0.0, 0.0));

        let p = project_point(&cam1000(), &id, &Point3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((p - Vector2::new(740.0, 360.0)).norm() < 1e-12);

        let k = cam1000().with_distortion([0.1, 0.0, 0.0, 0.0, 0.0]);
        let p = project_point(&k, &id, &Point3::new(0.2, 0.0, 1.0)).unwrap();
        assert!((p - Vector2::new(840.8, 360.0)).norm() < 1e-9, "{p:?}");
    }

    #[test]
    fn project_behind_camera_fails() {
        let err = project_point(&cam1000(), &CameraExtrinsics::identity(), &Point3::new(0.0, 0.0, -1.0));
        assert_eq!(err, Err(GeometryError::NonPositiveDepth(-1.0)));
        let err = project_point(&cam1000(), &CameraExtrinsics::identity(), &Point3::origin());
        assert!(matches!(err, Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn undistort_examples() {
        let p = undistort_point(&cam1000(), &Vector2::new(740.0, 360.0)).unwrap();
        assert!((p - Vector2::new(0.1, 0.0)).norm() < 1e-15);

        let k = cam1000().with_distortion([0.1, 0.0, 0.0, 0.0, 0.0]);
        let p = undistort_point(&k, &Vector2::new(840.8, 360.0)).unwrap();
        assert!((p - Vector2::new(0.2, 0.0)).norm() < 1e-6, "{p:?}");
    }

    #[test]
    fn undistort_extreme_distortion_fails() {
        let k = cam1000().with_distortion([-2.0, 0.0, 0.0, 0.0, 0.0]);
        let r = undistort_point(&k, &Vector2::new(1900.0, 1000.0));
        assert!(matches!(r, Err(GeometryError::NoConvergence(_))));
    }

    #[test]
    fn depth_examples() {
        let p = Point3::new(0.0, 0.0, 2.0);
        assert_eq!(camera_depth(&CameraExtrinsics::identity(), &p), 2.0);
        let shifted = CameraExtrinsics::new(Vector3::zeros(), Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(camera_depth(&shifted, &p), 1.0);
        let flipped = CameraExtrinsics::new(Vector3::new(0.0, PI, 0.0), Vector3::zeros());
        assert!((camera_depth(&flipped, &p) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn rig_rejects_duplicates_and_bad_intrinsics() {
        let cam = |n: &str| Camera {
            name: n.into(),
            intrinsics: cam1000(),
            extrinsics: CameraExtrinsics::identity(),
        };
        assert!(CameraRig::new(vec![cam("A"), cam("A")], 1.0).is_err());
        let mut bad = cam("B");
        bad.intrinsics.cx = 5000.0;
        assert!(CameraRig::new(vec![cam("A"), bad], 1.0).is_err());
        assert!(CameraRig::new(vec![cam("A"), cam("B")], 1000.0).is_ok());
    }
}
