//! C ABI over `mocap-core`.
//!
//! Every function returns a [`MocapStatus`]; on failure the message is
//! available from [`mocap_last_error`] on the same thread. Rigs are opaque
//! handles released with [`mocap_rig_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mocap_core::calibration::parse_calibration;
use mocap_core::features::{hull_volume, joint_angle};
use mocap_core::geometry::{project_point, CameraRig, GeometryError};
use mocap_core::metrics::{icc_a1, ldj, MetricsError};
use mocap_core::sync::{detect_events, IntensityTrace};
use mocap_core::trajectory::Trajectory3D;
use mocap_core::triangulation::{triangulate_point, TriangulationError, View};
use nalgebra::{Point3, Vector2, Vector3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MocapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    NonPositiveDepth = 5,
    InsufficientViews = 6,
    Degenerate = 7,
    Numeric = 8,
    Panic = 9,
}

/// Opaque camera rig.
pub struct MocapRig {
    rig: CameraRig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

struct Fail(MocapStatus, String);

impl Fail {
    fn new(code: MocapStatus, msg: impl std::fmt::Display) -> Self {
        Fail(code, msg.to_string())
    }
}

impl From<GeometryError> for Fail {
    fn from(e: GeometryError) -> Self {
        let code = match e {
            GeometryError::NonPositiveDepth(_) => MocapStatus::NonPositiveDepth,
            GeometryError::NoConvergence(_) => MocapStatus::Numeric,
            GeometryError::InvalidCamera(_) => MocapStatus::InvalidArgument,
        };
        Fail::new(code, e)
    }
}

impl From<TriangulationError> for Fail {
    fn from(e: TriangulationError) -> Self {
        let code = match e {
            TriangulationError::Geometry(g) => return g.into(),
            TriangulationError::InsufficientViews(_) => MocapStatus::InsufficientViews,
            TriangulationError::DegenerateGeometry(_) => MocapStatus::Degenerate,
            _ => MocapStatus::InvalidArgument,
        };
        Fail::new(code, e)
    }
}

impl From<MetricsError> for Fail {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::ZeroVariance | MetricsError::DegenerateZeroJerk | MetricsError::ZeroPath
            | MetricsError::DegenerateVariance => MocapStatus::Degenerate,
            _ => MocapStatus::InvalidArgument,
        };
        Fail::new(code, e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MocapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MocapStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            MocapStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::new(MocapStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn points(xyz: *const f64, n: usize) -> Result<Vec<Vector3<f64>>, Fail> {
    Ok(slice(xyz, 3 * n, "xyz")?.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mocap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parse a calibration document (TOML text, NUL-terminated).
///
/// # Safety
/// `toml` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mocap_rig_parse(toml: *const c_char, out: *mut *mut MocapRig) -> MocapStatus {
    guard(|| {
        non_null(toml, "toml")?;
        non_null(out, "out")?;
        let text = CStr::from_ptr(toml).to_str().map_err(|e| Fail::new(MocapStatus::Parse, e))?;
        let (rig, _) = parse_calibration(text).map_err(|e| Fail::new(MocapStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(MocapRig { rig }));
        Ok(())
    })
}

/// Load a calibration file from disk.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mocap_rig_load(path: *const c_char, out: *mut *mut MocapRig) -> MocapStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let p = CStr::from_ptr(path).to_str().map_err(|e| Fail::new(MocapStatus::InvalidArgument, e))?;
        let text = std::fs::read_to_string(p).map_err(|e| Fail::new(MocapStatus::Io, format!("{p}: {e}")))?;
        let (rig, _) = parse_calibration(&text).map_err(|e| Fail::new(MocapStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(MocapRig { rig }));
        Ok(())
    })
}

/// Release a rig. Null is ignored.
///
/// # Safety
/// `rig` must come from `mocap_rig_parse`/`mocap_rig_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mocap_rig_free(rig: *mut MocapRig) {
    if !rig.is_null() {
        drop(Box::from_raw(rig));
    }
}

/// Number of cameras in the rig, 0 for null.
///
/// # Safety
/// `rig` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mocap_rig_camera_count(rig: *const MocapRig) -> usize {
    rig.as_ref().map_or(0, |r| r.rig.cameras().len())
}

/// Project a world point into camera `camera`, writing `uv[2]` pixels.
///
/// # Safety
/// `xyz` must point to 3 doubles and `uv` to 2.
#[no_mangle]
pub unsafe extern "C" fn mocap_rig_project(
    rig: *const MocapRig,
    camera: usize,
    xyz: *const f64,
    uv: *mut f64,
) -> MocapStatus {
    guard(|| {
        let rig = rig.as_ref().ok_or_else(|| Fail::new(MocapStatus::NullPointer, "rig is null"))?;
        let x = slice(xyz, 3, "xyz")?;
        non_null(uv, "uv")?;
        let cam = rig
            .rig
            .cameras()
            .get(camera)
            .ok_or_else(|| Fail::new(MocapStatus::InvalidArgument, format!("camera index {camera} out of range")))?;
        let p = project_point(&cam.intrinsics, &cam.extrinsics, &Point3::new(x[0], x[1], x[2]))?;
        *uv = p.x;
        *uv.add(1) = p.y;
        Ok(())
    })
}

/// Triangulate one point from `n` views. `cameras[i]` is a camera index,
/// `uv[2i..2i+2]` its pixel and `confidence[i]` its score (null means all
/// 1.0). Writes `xyz[3]` and, if non-null, the mean reprojection error.
///
/// # Safety
/// Array arguments must hold the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn mocap_rig_triangulate(
    rig: *const MocapRig,
    n: usize,
    cameras: *const usize,
    uv: *const f64,
    confidence: *const f64,
    min_confidence: f64,
    xyz: *mut f64,
    mean_error_px: *mut f64,
) -> MocapStatus {
    guard(|| {
        let rig = rig.as_ref().ok_or_else(|| Fail::new(MocapStatus::NullPointer, "rig is null"))?;
        let cams = slice(cameras, n, "cameras")?;
        let px = slice(uv, 2 * n, "uv")?;
        let conf = if confidence.is_null() { None } else { Some(slice(confidence, n, "confidence")?) };
        non_null(xyz, "xyz")?;
        let n_cams = rig.rig.cameras().len();
        if let Some(&bad) = cams.iter().find(|&&c| c >= n_cams) {
            return Err(Fail::new(MocapStatus::InvalidArgument, format!("camera index {bad} out of range")));
        }
        let views: Vec<View> = (0..n)
            .map(|i| View {
                camera: cams[i],
                pixel: Vector2::new(px[2 * i], px[2 * i + 1]),
                confidence: conf.map_or(1.0, |c| c[i]),
            })
            .collect();
        let p = triangulate_point(&rig.rig, &views, min_confidence)?;
        for k in 0..3 {
            *xyz.add(k) = p.position[k];
        }
        if !mean_error_px.is_null() {
            *mean_error_px = p.mean_error_px();
        }
        Ok(())
    })
}

/// Log dimensionless jerk of `n` uniformly sampled positions (`xyz[3n]`).
///
/// # Safety
/// `xyz` must hold `3 * n` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mocap_ldj(xyz: *const f64, n: usize, fps: f64, out: *mut f64) -> MocapStatus {
    guard(|| {
        non_null(out, "out")?;
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Fail::new(MocapStatus::InvalidArgument, "fps must be positive"));
        }
        let t = Trajectory3D::from_uniform(0, fps, points(xyz, n)?);
        *out = ldj(&t, None)?;
        Ok(())
    })
}

/// ICC(A,1) of an `n_subjects` × `n_raters` row-major matrix.
///
/// # Safety
/// `ratings` must hold `n_subjects * n_raters` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mocap_icc_a1(ratings: *const f64, n_subjects: usize, n_raters: usize, out: *mut f64) -> MocapStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = slice(ratings, n_subjects * n_raters, "ratings")?;
        if n_raters == 0 {
            return Err(Fail::new(MocapStatus::InvalidArgument, "n_raters is 0"));
        }
        let rows: Vec<Vec<f64>> = v.chunks_exact(n_raters).map(<[f64]>::to_vec).collect();
        *out = icc_a1(&rows)?;
        Ok(())
    })
}

/// Convex hull volume of `n` points (`xyz[3n]`); 0 for flat sets.
///
/// # Safety
/// `xyz` must hold `3 * n` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mocap_hull_volume(xyz: *const f64, n: usize, out: *mut f64) -> MocapStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = hull_volume(&points(xyz, n)?).map_err(|e| Fail::new(MocapStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// Angle at `b` between `a` and `c`, in degrees.
///
/// # Safety
/// `a`, `b`, `c` must each point to 3 doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mocap_joint_angle(a: *const f64, b: *const f64, c: *const f64, out: *mut f64) -> MocapStatus {
    guard(|| {
        non_null(out, "out")?;
        let [a, b, c] = [points(a, 1)?[0], points(b, 1)?[0], points(c, 1)?[0]];
        *out = joint_angle(&a, &b, &c).map_err(|e| Fail::new(MocapStatus::Degenerate, e))?;
        Ok(())
    })
}

/// Find LED on/off events in a per-frame red pixel count trace. Writes up
/// to `capacity` inclusive frame pairs into `on`/`off` and the total number
/// found into `n_events`.
///
/// # Safety
/// `counts` must hold `n` values; `on` and `off` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn mocap_detect_events(
    counts: *const u32,
    n: usize,
    pixel_threshold: u32,
    debounce: usize,
    on: *mut usize,
    off: *mut usize,
    capacity: usize,
    n_events: *mut usize,
) -> MocapStatus {
    guard(|| {
        non_null(n_events, "n_events")?;
        let trace = IntensityTrace { camera: String::new(), fps: 1.0, counts: slice(counts, n, "counts")?.to_vec() };
        let events = detect_events(&trace, pixel_threshold, debounce);
        if capacity > 0 {
            non_null(on, "on")?;
            non_null(off, "off")?;
        }
        for (i, (a, b)) in events.iter().take(capacity).enumerate() {
            *on.add(i) = *a;
            *off.add(i) = *b;
        }
        *n_events = events.len();
        Ok(())
    })
}
