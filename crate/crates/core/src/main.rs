use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mocap_core::calibration::BoardSpec;
use mocap_core::metrics::CorrelationMode;
use mocap_core::pipeline::{
    emit_report, run_calibrate, run_features, run_metrics, run_triangulate, run_trim, scan_dataset, write_fixture,
    CalibrateArgs, FixtureOptions, PipelineConfig, PipelineError, StepOutcome, TrimArgs, TrimMode,
};
use mocap_core::sync::RoiSpec;

#[derive(Parser)]
#[command(name = "mocap", version, about = "Multi-camera markerless motion capture pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory holding mocap.toml and all derived files.
    #[arg(short = 's', long)]
    saving_dir: PathBuf,
}

#[derive(Args)]
struct Scoped {
    #[command(flatten)]
    common: Common,
    /// Restrict to trials below this dataset-relative path.
    #[arg(long, default_value = "")]
    scope: String,
}

#[derive(Subcommand)]
enum Command {
    /// Create or overwrite the pipeline configuration.
    Configure {
        #[command(flatten)]
        common: Common,
        #[arg(short = 'd', long)]
        dataset: PathBuf,
        #[arg(long, default_value = "right_hand")]
        body_part: String,
        #[arg(long, default_value = ".mp4")]
        video_extension: String,
        #[arg(long, default_value = "-cam([A-Z0-9])")]
        camera_suffix: String,
        #[arg(long, default_value_t = 60.0)]
        fps: f64,
        #[arg(long)]
        light_threshold: Option<u8>,
        #[arg(long)]
        pixel_threshold: Option<u32>,
        #[arg(long, value_parser = parse_board)]
        board: Option<BoardSpec>,
    },
    /// Index the dataset and mirror its tree into the saving directory.
    Scan(Common),
    /// Split recordings into synchronized trials.
    Trim {
        #[command(flatten)]
        scoped: Scoped,
        /// Fixed window START:END (inclusive frames) applied to every camera.
        #[arg(long, value_parser = parse_window, conflicts_with = "auto")]
        manual: Option<(usize, usize)>,
        /// Detect LED on/off events.
        #[arg(long)]
        auto: bool,
        /// LED region as CAM:x,y,w,h; CAM may be `*`.
        #[arg(long = "roi", value_parser = parse_roi)]
        rois: Vec<RoiSpec>,
        #[arg(long, default_value_t = 1)]
        num_trials: usize,
        /// Cut every trial to this many seconds from its start.
        #[arg(long)]
        trial_length: Option<f64>,
        #[arg(long)]
        light_threshold: Option<u8>,
        #[arg(long)]
        pixel_threshold: Option<u32>,
        /// Frame rate assumed for trace files.
        #[arg(long)]
        fps: Option<f64>,
    },
    /// Calibrate the rig from board corner detections.
    Calibrate {
        #[command(flatten)]
        scoped: Scoped,
        #[arg(long)]
        corners: Option<PathBuf>,
        /// squares_x,squares_y,square_mm,marker_mm
        #[arg(long, value_parser = parse_board)]
        board: Option<BoardSpec>,
        /// WIDTHxHEIGHT
        #[arg(long, value_parser = parse_size)]
        image_size: Option<(u32, u32)>,
    },
    /// Reconstruct 3D landmarks from trimmed detections.
    Triangulate(Scoped),
    /// Compute per-trial quality metrics.
    Metrics {
        #[command(flatten)]
        scoped: Scoped,
        #[arg(long, value_parser = parse_mode)]
        correlation_mode: Option<CorrelationMode>,
    },
    /// Export per-frame joint angles, hull volume and apertures.
    Features(Scoped),
    /// Aggregate metrics into per-subject and per-condition tables.
    Report(Common),
    /// Write a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        subjects: usize,
        #[arg(long, default_value_t = 2)]
        conditions: usize,
        #[arg(long, default_value_t = 3)]
        cameras: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 60.0)]
        fps: f64,
    },
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected START:END")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_roi(s: &str) -> Result<RoiSpec, String> {
    let (cam, rest) = s.split_once(':').ok_or("expected CAM:x,y,w,h")?;
    let v: Vec<u32> = rest.split(',').map(|p| p.trim().parse::<u32>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let [x, y, w, h] = v[..] else { return Err("expected four integers x,y,w,h".into()) };
    Ok(RoiSpec { camera: cam.to_owned(), x, y, w, h })
}

fn parse_board(s: &str) -> Result<BoardSpec, String> {
    let p: Vec<&str> = s.split(',').map(str::trim).collect();
    let [sx, sy, sq, mk] = p[..] else { return Err("expected squares_x,squares_y,square_mm,marker_mm".into()) };
    let e = |e: &dyn std::fmt::Display| e.to_string();
    BoardSpec::new(
        sx.parse().map_err(|x| e(&x))?,
        sy.parse().map_err(|x| e(&x))?,
        sq.parse().map_err(|x| e(&x))?,
        mk.parse().map_err(|x| e(&x))?,
    )
    .map_err(|x| x.to_string())
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    Ok((w.parse().map_err(|e| format!("{e}"))?, h.parse().map_err(|e| format!("{e}"))?))
}

fn parse_mode(s: &str) -> Result<CorrelationMode, String> {
    match s {
        "position" | "position_norm" => Ok(CorrelationMode::PositionNorm),
        "displacement" | "displacement_norm" => Ok(CorrelationMode::DisplacementNorm),
        _ => Err("expected position or displacement".into()),
    }
}

fn absolute(p: &Path) -> Result<PathBuf, PipelineError> {
    std::fs::canonicalize(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
}

fn print_outcome(o: &StepOutcome) {
    for w in &o.written {
        println!("{w}");
    }
    eprintln!("{}: wrote {} file(s)", o.step, o.written.len());
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Configure {
            common,
            dataset,
            body_part,
            video_extension,
            camera_suffix,
            fps,
            light_threshold,
            pixel_threshold,
            board,
        } => {
            std::fs::create_dir_all(&common.saving_dir)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", common.saving_dir.display())))?;
            let mut cfg = PipelineConfig::new(absolute(&dataset)?, absolute(&common.saving_dir)?);
            cfg.body_part = body_part.parse()?;
            cfg.video_extension = video_extension;
            cfg.camera_suffix_pattern = camera_suffix;
            cfg.fps = fps;
            if let Some(v) = light_threshold {
                cfg.sync.light_threshold = v;
            }
            if let Some(v) = pixel_threshold {
                cfg.sync.pixel_threshold = v;
            }
            if let Some(b) = board {
                cfg.board = b;
            }
            let path = cfg.save()?;
            println!("{}", path.display());
        }
        Command::Scan(common) => {
            let cfg = PipelineConfig::load(&common.saving_dir)?;
            let index = scan_dataset(&cfg.dataset_root, &cfg)?;
            index.mirror_into(&cfg.saving_dir)?;
            for t in &index.trials {
                let segs: Vec<&str> = t.segments.iter().map(|s| s.name.as_str()).collect();
                let cams: Vec<String> = t.camera_ids().into_iter().collect();
                println!("{}\t{}\t{}", if t.rel_path.is_empty() { "." } else { &t.rel_path }, segs.join(","), cams.join(","));
            }
        }
        Command::Trim { scoped, manual, auto, rois, num_trials, trial_length, light_threshold, pixel_threshold, fps } => {
            let mut cfg = PipelineConfig::load(&scoped.common.saving_dir)?;
            if let Some(v) = light_threshold {
                cfg.sync.light_threshold = v;
            }
            if let Some(v) = pixel_threshold {
                cfg.sync.pixel_threshold = v;
            }
            if let Some(v) = fps {
                cfg.fps = v;
            }
            cfg.validate()?;
            let mode = match (manual, auto) {
                (Some((start, end)), false) => TrimMode::Manual { start, end },
                (None, true) => TrimMode::Auto {
                    num_trials,
                    fixed_length_s: trial_length,
                    rois: rois.into_iter().map(|r| (r.camera.clone(), r)).collect::<BTreeMap<_, _>>(),
                },
                _ => return Err(PipelineError::Config("give exactly one of --manual or --auto".into())),
            };
            let index = scan_dataset(&cfg.dataset_root, &cfg)?;
            index.mirror_into(&cfg.saving_dir)?;
            print_outcome(&run_trim(&cfg, &index, &TrimArgs { mode, scope: scoped.scope })?);
        }
        Command::Calibrate { scoped, corners, board, image_size } => {
            let cfg = PipelineConfig::load(&scoped.common.saving_dir)?;
            print_outcome(&run_calibrate(&cfg, &CalibrateArgs { corners, scope: scoped.scope, board, image_size })?);
        }
        Command::Triangulate(scoped) => {
            let cfg = PipelineConfig::load(&scoped.common.saving_dir)?;
            let index = scan_dataset(&cfg.dataset_root, &cfg)?;
            print_outcome(&run_triangulate(&cfg, &index, &scoped.scope)?);
        }
        Command::Metrics { scoped, correlation_mode } => {
            let mut cfg = PipelineConfig::load(&scoped.common.saving_dir)?;
            if let Some(m) = correlation_mode {
                cfg.metrics.correlation_mode = m;
            }
            print_outcome(&run_metrics(&cfg, &scoped.scope)?);
        }
        Command::Features(scoped) => {
            let cfg = PipelineConfig::load(&scoped.common.saving_dir)?;
            print_outcome(&run_features(&cfg, &scoped.scope)?);
        }
        Command::Report(common) => {
            let cfg = PipelineConfig::load(&common.saving_dir)?;
            let s = emit_report(&cfg)?;
            for w in &s.written {
                println!("{w}");
            }
            eprintln!("report: {} trial(s), {} subject(s), {} condition(s)", s.n_trials, s.subjects.len(), s.conditions.len());
        }
        Command::Synth { out, seed, subjects, conditions, cameras, noise, fps } => {
            let opts = FixtureOptions { seed, subjects, conditions, cameras, noise_px: noise, fps, ..Default::default() };
            let s = write_fixture(&out, &opts)?;
            println!("{}", s.dataset_root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
