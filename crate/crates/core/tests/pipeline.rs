use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mocap_core::pipeline::*;
use mocap_core::sync::TrimPlan;
use mocap_core::triangulation::read_points_csv;
use walkdir::WalkDir;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    summary: FixtureSummary,
}

fn fixture(opts: FixtureOptions) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let summary = write_fixture(&root.join("fx"), &opts).unwrap();
    Run { _dir: dir, root, summary }
}

fn small(noise: f64) -> FixtureOptions {
    FixtureOptions { noise_px: noise, corner_noise_px: noise * 0.3, duration_s: 1.0, board_poses: 12, ..Default::default() }
}

fn configure(run: &Run, name: &str) -> (PipelineConfig, DatasetIndex) {
    let cfg = PipelineConfig::new(run.summary.dataset_root.clone(), run.root.join(name));
    cfg.save().unwrap();
    let cfg = PipelineConfig::load(&cfg.saving_dir).unwrap();
    let index = scan_dataset(&cfg.dataset_root, &cfg).unwrap();
    index.mirror_into(&cfg.saving_dir).unwrap();
    (cfg, index)
}

fn auto() -> TrimArgs {
    TrimArgs { mode: TrimMode::Auto { num_trials: 1, fixed_length_s: None, rois: BTreeMap::new() }, scope: String::new() }
}

fn calib() -> CalibrateArgs {
    CalibrateArgs { corners: None, scope: String::new(), board: None, image_size: None }
}

fn all_steps(cfg: &PipelineConfig, index: &DatasetIndex) {
    run_trim(cfg, index, &auto()).unwrap();
    run_calibrate(cfg, &calib()).unwrap();
    run_triangulate(cfg, index, "").unwrap();
    run_metrics(cfg, "").unwrap();
    run_features(cfg, "").unwrap();
    emit_report(cfg).unwrap();
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    WalkDir::new(dir)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn noiseless_fixture_closes() {
    let run = fixture(FixtureOptions { noise_px: 0.0, corner_noise_px: 0.0, ..small(0.0) });
    let (cfg, index) = configure(&run, "out");
    all_steps(&cfg, &index);

    for t in &run.summary.trials {
        let plan_text = std::fs::read_to_string(cfg.saving_dir.join(&t.path).join("videos-raw/trial.trim.json")).unwrap();
        let plan = TrimPlan::from_json(&plan_text).unwrap();
        for (cam, (on, off)) in &t.led_events {
            let w = plan.window(0, cam).unwrap();
            assert_eq!((w.start_frame, w.end_frame), (*on, *off), "{} {cam}", t.path);
        }
        let got = read_points_csv(&cfg.saving_dir.join(&t.path).join("pose-3d/trial-t0.csv")).unwrap();
        let truth = read_points_csv(&run.root.join("fx/ground_truth").join(&t.path).join("trial-t0.csv")).unwrap();
        assert_eq!(got.len(), truth.len());
        let mut worst: f64 = 0.0;
        for (g, r) in got.iter().zip(&truth) {
            assert_eq!((g.frame, g.landmark_id), (r.frame, r.landmark_id));
            worst = worst.max((g.position.unwrap() - r.position.unwrap()).norm());
        }
        assert!(worst < 1e-7, "{}: {worst:e}", t.path);
    }
}

#[test]
fn outputs_are_deterministic() {
    let run = fixture(small(1.0));
    let (a, index) = configure(&run, "a");
    let (b, _) = configure(&run, "b");
    all_steps(&a, &index);
    all_steps(&b, &index);
    let sa = snapshot(&a.saving_dir);
    assert_eq!(sa, snapshot(&b.saving_dir));

    run_metrics(&a, "").unwrap();
    emit_report(&a).unwrap();
    assert_eq!(sa, snapshot(&a.saving_dir));
}

#[test]
fn steps_refuse_missing_prerequisites() {
    let run = fixture(small(1.0));
    let (cfg, index) = configure(&run, "out");
    assert!(matches!(run_triangulate(&cfg, &index, ""), Err(PipelineError::MissingPrerequisite { .. })));
    assert!(matches!(run_metrics(&cfg, ""), Err(PipelineError::MissingPrerequisite { .. })));
    assert!(matches!(emit_report(&cfg), Err(PipelineError::NothingToReport)));

    run_trim(&cfg, &index, &auto()).unwrap();
    match run_triangulate(&cfg, &index, "") {
        Err(PipelineError::MissingPrerequisite { step, artifact }) => {
            assert_eq!(step, "triangulate");
            assert_eq!(artifact, "calibration/calibration.toml");
        }
        other => panic!("{other:?}"),
    }
    let e = run_features(&cfg, "").unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn stale_inputs_are_detected() {
    let run = fixture(small(1.0));
    let (cfg, index) = configure(&run, "out");
    all_steps(&cfg, &index);

    let calib_file = cfg.saving_dir.join("calibration/calibration.toml");
    let mut text = std::fs::read_to_string(&calib_file).unwrap();
    text.push_str("\n# edited\n");
    std::fs::write(&calib_file, text).unwrap();
    match run_metrics(&cfg, "") {
        Err(PipelineError::StalePrerequisite { step, artifact }) => {
            assert_eq!(step, "metrics");
            assert!(artifact.contains("calibration"), "{artifact}");
        }
        other => panic!("{other:?}"),
    }
    run_triangulate(&cfg, &index, "").unwrap();
    run_metrics(&cfg, "").unwrap();
}

#[test]
fn report_shape() {
    let run = fixture(FixtureOptions { subjects: 3, ..small(1.0) });
    let (cfg, index) = configure(&run, "out");
    all_steps(&cfg, &index);
    let s = emit_report(&cfg).unwrap();
    assert_eq!(s.n_trials, 6);
    assert_eq!(s.subjects, ["S1", "S2", "S3"]);
    assert_eq!(s.conditions, ["C1", "C2"]);
    let icc = s.icc.expect("two conditions");
    assert_eq!(icc.len(), 4);
    let subjects = std::fs::read_to_string(cfg.saving_dir.join("report/subjects.csv")).unwrap();
    assert_eq!(subjects.lines().count(), 1 + 6);
    let conditions = std::fs::read_to_string(cfg.saving_dir.join("report/conditions.csv")).unwrap();
    assert_eq!(conditions.lines().count(), 1 + 2 * 4);
    let plot = std::fs::read_to_string(cfg.saving_dir.join("report/plot_data.csv")).unwrap();
    assert_eq!(plot.lines().next(), Some("metric,condition,subject,value"));
    assert_eq!(plot.lines().filter(|l| l.starts_with("err_mm,")).count(), 6);
    for c in ["C1", "C2"] {
        let err = s.condition_summary[c]["err_mm"].mean.unwrap();
        assert!(err > 0.0 && err < 5.0, "{c}: {err}");
    }
}

#[test]
fn single_condition_has_no_icc() {
    let run = fixture(FixtureOptions { conditions: 1, ..small(1.0) });
    let (cfg, index) = configure(&run, "out");
    all_steps(&cfg, &index);
    assert!(emit_report(&cfg).unwrap().icc.is_none());
}

#[test]
fn manual_trim_and_scope() {
    let run = fixture(small(0.5));
    let (cfg, index) = configure(&run, "out");
    let args = TrimArgs { mode: TrimMode::Manual { start: 30, end: 79 }, scope: "S1".into() };
    let out = run_trim(&cfg, &index, &args).unwrap();
    assert!(out.written.iter().all(|w| w.starts_with("S1/")));
    assert!(cfg.saving_dir.join("S1/C1/videos-raw/trial.trim.json").exists());
    assert!(!cfg.saving_dir.join("S2/C1/videos-raw/trial.trim.json").exists());
    run_calibrate(&cfg, &calib()).unwrap();
    run_triangulate(&cfg, &index, "S1").unwrap();
    let pts = read_points_csv(&cfg.saving_dir.join("S1/C2/pose-3d/trial-t0.csv")).unwrap();
    assert_eq!(pts.iter().map(|p| p.frame).max(), Some(49));
}

#[test]
fn features_table_has_hand_columns() {
    let run = fixture(small(0.0));
    let (cfg, index) = configure(&run, "out");
    all_steps(&cfg, &index);
    let text = std::fs::read_to_string(cfg.saving_dir.join("S1/C1/features/trial-t0.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("frame,"));
    assert!(header.contains("hull_volume"));
    assert!(header.contains("thumb_index_aperture"));
    assert_eq!(text.lines().count(), 1 + run.summary.trials[0].frames);
}
