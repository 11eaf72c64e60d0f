use std::ffi::{CStr, CString};
use std::ptr;

use mocap_core::calibration::render_calibration;
use mocap_core::synthetic::make_rig;
use mocap_ffi::*;
use nalgebra::Point3;

fn rig_handle() -> (*mut MocapRig, Point3<f64>) {
    let s = make_rig(3, 0.8, Point3::origin()).unwrap();
    let text = CString::new(render_calibration(&s.rig, 0.0)).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mocap_rig_parse(text.as_ptr(), &mut h) }, MocapStatus::Ok);
    assert!(!h.is_null());
    (h, s.target)
}

fn last_error() -> String {
    let p = mocap_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn project_then_triangulate_roundtrip() {
    let (h, target) = rig_handle();
    assert_eq!(unsafe { mocap_rig_camera_count(h) }, 3);
    let x = [target.x + 0.02, target.y - 0.01, target.z + 0.03];
    let mut uv = [0.0; 6];
    for c in 0..3 {
        assert_eq!(unsafe { mocap_rig_project(h, c, x.as_ptr(), uv.as_mut_ptr().add(2 * c)) }, MocapStatus::Ok);
    }
    let cams = [0usize, 1, 2];
    let mut out = [0.0; 3];
    let mut err = f64::NAN;
    let st = unsafe { mocap_rig_triangulate(h, 3, cams.as_ptr(), uv.as_ptr(), ptr::null(), 0.5, out.as_mut_ptr(), &mut err) };
    assert_eq!(st, MocapStatus::Ok, "{:?}", (!mocap_last_error().is_null()).then(last_error));
    for k in 0..3 {
        assert!((out[k] - x[k]).abs() < 1e-9, "{out:?}");
    }
    assert!(err < 1e-6);
    unsafe { mocap_rig_free(h) };
}

#[test]
fn error_codes_and_messages() {
    let (h, target) = rig_handle();
    let x = [target.x, target.y, target.z];
    let mut uv = [0.0; 2];
    assert_eq!(unsafe { mocap_rig_project(h, 7, x.as_ptr(), uv.as_mut_ptr()) }, MocapStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
    assert_eq!(unsafe { mocap_rig_project(ptr::null(), 0, x.as_ptr(), uv.as_mut_ptr()) }, MocapStatus::NullPointer);

    let cams = [0usize];
    let mut out = [0.0; 3];
    let st = unsafe { mocap_rig_triangulate(h, 1, cams.as_ptr(), uv.as_ptr(), ptr::null(), 0.5, out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, MocapStatus::InsufficientViews);

    let bad = CString::new("not = [valid").unwrap();
    let mut h2 = ptr::null_mut();
    assert_eq!(unsafe { mocap_rig_parse(bad.as_ptr(), &mut h2) }, MocapStatus::Parse);
    assert!(h2.is_null());
    let missing = CString::new("/nonexistent/calibration.toml").unwrap();
    assert_eq!(unsafe { mocap_rig_load(missing.as_ptr(), &mut h2) }, MocapStatus::Io);

    // success clears the message
    let mut v = 0.0;
    let a = [1.0, 0.0, 0.0];
    let b = [0.0, 0.0, 0.0];
    let c = [0.0, 1.0, 0.0];
    assert_eq!(unsafe { mocap_joint_angle(a.as_ptr(), b.as_ptr(), c.as_ptr(), &mut v) }, MocapStatus::Ok);
    assert!(mocap_last_error().is_null());
    assert_eq!(unsafe { mocap_joint_angle(a.as_ptr(), b.as_ptr(), b.as_ptr(), &mut v) }, MocapStatus::Degenerate);
    unsafe { mocap_rig_free(h) };
    unsafe { mocap_rig_free(ptr::null_mut()) };
}

#[test]
fn load_from_file() {
    let s = make_rig(2, 0.8, Point3::origin()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("calibration.toml");
    std::fs::write(&p, render_calibration(&s.rig, 0.0)).unwrap();
    let cp = CString::new(p.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mocap_rig_load(cp.as_ptr(), &mut h) }, MocapStatus::Ok);
    assert_eq!(unsafe { mocap_rig_camera_count(h) }, 2);
    unsafe { mocap_rig_free(h) };
}

#[test]
fn scalar_functions() {
    let mut v = 0.0;
    let a = [1.0, 0.0, 0.0];
    let b = [0.0, 0.0, 0.0];
    let c = [0.0, 0.0, 2.0];
    assert_eq!(unsafe { mocap_joint_angle(a.as_ptr(), b.as_ptr(), c.as_ptr(), &mut v) }, MocapStatus::Ok);
    assert!((v - 90.0).abs() < 1e-9);

    let cube: Vec<f64> = (0..8).flat_map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]).collect();
    assert_eq!(unsafe { mocap_hull_volume(cube.as_ptr(), 8, &mut v) }, MocapStatus::Ok);
    assert!((v - 1.0).abs() < 1e-9);

    let r = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    assert_eq!(unsafe { mocap_icc_a1(r.as_ptr(), 3, 2, &mut v) }, MocapStatus::Ok);
    assert!((v - 8.0 / 9.0).abs() < 1e-12);

    // minimum-jerk reach sampled at 200 Hz over 1 s
    let xyz: Vec<f64> = (0..=200)
        .flat_map(|i| {
            let t = i as f64 / 200.0;
            [10.0 * t.powi(3) - 15.0 * t.powi(4) + 6.0 * t.powi(5), 0.0, 0.0]
        })
        .collect();
    assert_eq!(unsafe { mocap_ldj(xyz.as_ptr(), 201, 200.0, &mut v) }, MocapStatus::Ok);
    assert!((v - 720f64.ln()).abs() < 0.01 * 720f64.ln(), "{v}");
    let still = vec![0.0; 30];
    assert_eq!(unsafe { mocap_ldj(still.as_ptr(), 10, 100.0, &mut v) }, MocapStatus::Degenerate);
}

#[test]
fn events_respect_capacity() {
    let mut counts = vec![0u32; 40];
    for f in (5..=9).chain(20..=29) {
        counts[f] = 50;
    }
    let (mut on, mut off, mut n) = ([0usize; 1], [0usize; 1], 0usize);
    let st = unsafe { mocap_detect_events(counts.as_ptr(), counts.len(), 5, 2, on.as_mut_ptr(), off.as_mut_ptr(), 1, &mut n) };
    assert_eq!(st, MocapStatus::Ok);
    assert_eq!(n, 2);
    assert_eq!((on[0], off[0]), (5, 9));
    let st = unsafe { mocap_detect_events(counts.as_ptr(), counts.len(), 5, 2, ptr::null_mut(), ptr::null_mut(), 0, &mut n) };
    assert_eq!((st, n), (MocapStatus::Ok, 2));
}

#[test]
fn header_compiles_as_c() {
    let inc = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-I", inc, "-"])
        .stdin(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut ch| {
            use std::io::Write;
            ch.stdin.take().unwrap().write_all(b"#include \"mocap.h\"\nint main(void){MocapRig*r=0;return (int)mocap_rig_camera_count(r);}\n")?;
            ch.wait_with_output()
        })
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success());
}
