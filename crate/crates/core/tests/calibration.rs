use mocap_core::calibration::*;
use mocap_core::synthetic::{board_poses, make_rig, project_board};
use nalgebra::{Point3, Vector3};

fn problem(n_cams: usize, n_poses: usize) -> (BundleProblem, Vec<f64>) {
    let s = make_rig(n_cams, 0.8, Point3::origin()).unwrap();
    let board = BoardSpec::default();
    let poses = board_poses(&s, &board, n_poses, 5);
    let obs = project_board(&s.rig, &board, &poses, 0.0, 5);
    let names: Vec<&str> = s.rig.cameras().iter().map(|c| c.name.as_str()).collect();
    let observations = obs
        .iter()
        .map(|o| {
            let p = board.corner_mm(o.corner_id).unwrap() / 1000.0;
            BundleObservation {
                camera: names.iter().position(|n| *n == o.camera).unwrap(),
                pose: o.frame as usize,
                board_point: Vector3::new(p.x, p.y, 0.0),
                pixel: o.pixel,
            }
        })
        .collect();
    let prob = BundleProblem { n_cameras: n_cams, n_poses, observations };
    let mut x = vec![0.0; prob.n_params()];
    for (i, c) in s.rig.cameras().iter().enumerate() {
        x[prob.intr_offset(i)..prob.intr_offset(i) + 9].copy_from_slice(&c.intrinsics.to_params());
        if let Some(o) = prob.ext_offset(i) {
            x[o..o + 3].copy_from_slice(c.extrinsics.rotvec.as_slice());
            x[o + 3..o + 6].copy_from_slice(c.extrinsics.tvec.as_slice());
        }
    }
    for (k, p) in poses.iter().enumerate() {
        let o = prob.pose_offset(k);
        x[o..o + 3].copy_from_slice(p.rotvec.as_slice());
        x[o + 3..o + 6].copy_from_slice(p.tvec.as_slice());
    }
    (prob, x)
}

#[test]
fn true_parameters_have_zero_residual() {
    let (prob, x) = problem(3, 6);
    let r = prob.residuals(&x);
    assert!(r.iter().all(|v| v.abs() < 1e-8), "max {}", r.amax());
}

#[test]
fn jacobian_matches_central_differences() {
    use rand::{Rng, SeedableRng};
    let (prob, x0) = problem(3, 4);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        // random point near the optimum so every corner stays in front of its camera
        let x: Vec<f64> = x0.iter().map(|v| v + 1e-2 * rng.random_range(-1.0..1.0) * v.abs().max(1e-2)).collect();
        let j = prob.jacobian(&x);
        let mut worst: f64 = 0.0;
        for col in 0..prob.n_params() {
            let h = 1e-5 * x[col].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let fd = (prob.residuals(&xp) - prob.residuals(&xm)) / (2.0 * h);
            let an = j.column(col);
            let scale = fd.amax().max(an.amax());
            if scale > 0.0 {
                worst = worst.max((fd - an).amax() / scale);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }
}

#[test]
fn gauge_and_similarity() {
    let s = make_rig(3, 0.8, Point3::origin()).unwrap();
    let board = BoardSpec::default();
    let poses = board_poses(&s, &board, 12, 4);
    let obs = project_board(&s.rig, &board, &poses, 0.3, 4);
    let r1 = calibrate_rig(&board, &obs, &CalibrationOptions::default()).unwrap();
    let c0 = &r1.rig.cameras()[0].extrinsics;
    assert_eq!(c0.rotvec, Vector3::zeros());
    assert_eq!(c0.tvec, Vector3::zeros());

    let k = 2.5;
    let big = BoardSpec { square_length_mm: board.square_length_mm * k, marker_length_mm: board.marker_length_mm * k, ..board };
    let r2 = calibrate_rig(&big, &obs, &CalibrationOptions::default()).unwrap();
    assert!((r1.rms_error_px - r2.rms_error_px).abs() < 1e-9);
    for (a, b) in r1.rig.cameras().iter().zip(r2.rig.cameras()) {
        assert!((a.extrinsics.tvec * k - b.extrinsics.tvec).norm() < 1e-7 * k);
        assert!((a.intrinsics.fx - b.intrinsics.fx).abs() < 1e-6);
    }
}

#[test]
fn recovers_rig_from_clean_corners() {
    let s = make_rig(3, 0.8, Point3::origin()).unwrap();
    let board = BoardSpec::default();
    let poses = board_poses(&s, &board, 20, 3);
    let obs = project_board(&s.rig, &board, &poses, 0.0, 11);
    let r = calibrate_rig(&board, &obs, &CalibrationOptions::default()).unwrap();
    assert!(r.rms_error_px < 1e-4, "{}", r.rms_error_px);
    for (a, b) in r.rig.cameras().iter().zip(s.rig.cameras()) {
        assert_eq!(a.name, b.name);
        assert!((a.intrinsics.fx / b.intrinsics.fx - 1.0).abs() < 5e-3);
        assert!((a.intrinsics.fy / b.intrinsics.fy - 1.0).abs() < 5e-3);
        let (ba, bb) = (a.extrinsics.center().norm(), b.extrinsics.center().norm());
        if bb > 0.0 {
            assert!((ba / bb - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn noisy_corners_give_plausible_rms() {
    let s = make_rig(3, 0.8, Point3::origin()).unwrap();
    let board = BoardSpec::default();
    let poses = board_poses(&s, &board, 20, 3);
    let obs = project_board(&s.rig, &board, &poses, 0.5, 11);
    let r = calibrate_rig(&board, &obs, &CalibrationOptions::default()).unwrap();
    assert!((0.3..=0.8).contains(&r.rms_error_px), "{}", r.rms_error_px);
    assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn calibration_file_roundtrip() {
    let s = make_rig(2, 0.8, Point3::origin()).unwrap();
    let board = BoardSpec::default();
    let poses = board_poses(&s, &board, 8, 2);
    let obs = project_board(&s.rig, &board, &poses, 0.0, 2);
    let r = calibrate_rig(&board, &obs, &CalibrationOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("calibration.toml");
    write_calibration(&r, &p).unwrap();
    let back = read_calibration(&p).unwrap();
    for (a, b) in back.cameras().iter().zip(r.rig.cameras()) {
        assert_eq!(a.name, b.name);
        for (u, v) in a.intrinsics.to_params().iter().zip(b.intrinsics.to_params()) {
            assert!((u - v).abs() <= 1e-9 * v.abs().max(1.0));
        }
        assert!((a.extrinsics.tvec - b.extrinsics.tvec).norm() < 1e-12);
    }
}
