//! Red-LED synchronization: ROI pixel counting, ON/OFF episode detection and
//! per-camera trim windows.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RED_MARGIN: u8 = 30;
pub const DEFAULT_DEBOUNCE: usize = 2;
pub const DEFAULT_MAX_FRAME_SKEW: usize = 2;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("ROI {x},{y} {w}x{h} outside {width}x{height} frame")]
    RoiOutOfBounds { x: u32, y: u32, w: u32, h: u32, width: u32, height: u32 },
    #[error("frame stream truncated at frame {frame}: {got} of {expected} bytes")]
    StreamTruncated { frame: usize, got: usize, expected: usize },
    #[error("bad frame stream header: {0}")]
    BadHeader(String),
    #[error("camera {camera}: found {found} LED events, expected {expected}")]
    EventCountMismatch { camera: String, found: usize, expected: usize },
    #[error("trial {trial}: window lengths differ by {frames} frames")]
    SkewTooLarge { trial: usize, frames: usize },
    #[error("inverted range: start {start} > end {end}")]
    InvertedRange { start: usize, end: usize },
    #[error("camera {camera}: window end {end} beyond trace length {len}")]
    WindowOutOfRange { camera: String, end: usize, len: usize },
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub camera: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl RoiSpec {
    pub fn check(&self, width: u32, height: u32) -> Result<(), SyncError> {
        let ok = self.w >= 1
            && self.h >= 1
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height);
        if ok {
            Ok(())
        } else {
            Err(SyncError::RoiOutOfBounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityTrace {
    pub camera: String,
    pub fps: f64,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimWindow {
    pub camera: String,
    #[serde(rename = "start")]
    pub start_frame: usize,
    #[serde(rename = "end")]
    pub end_frame: usize,
    #[serde(skip)]
    pub trial_index: usize,
}

impl TrimWindow {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimTrial {
    pub index: usize,
    pub windows: Vec<TrimWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetadata {
    pub mode: String,
    /// Inclusive end frame is the last frame meeting the ON rule.
    pub end_frame_convention: String,
    pub fixed_length_s: Option<f64>,
    pub light_threshold: Option<u8>,
    pub pixel_threshold: Option<u32>,
    pub debounce: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimPlan {
    pub trials: Vec<TrimTrial>,
    pub fps: BTreeMap<String, f64>,
    pub metadata: PlanMetadata,
}

impl TrimPlan {
    pub fn window(&self, trial: usize, camera: &str) -> Option<&TrimWindow> {
        self.trials
            .iter()
            .find(|t| t.index == trial)?
            .windows
            .iter()
            .find(|w| w.camera == camera)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, SyncError> {
        let mut plan: TrimPlan = serde_json::from_str(text)?;
        for t in &mut plan.trials {
            for w in &mut t.windows {
                w.trial_index = t.index;
            }
        }
        Ok(plan)
    }
}

/// Reader for the raw RGB frame stream: header `"W H FPS rgb24\n"` followed
/// by `W·H·3`-byte row-major frames.
pub struct RawFrameReader<R> {
    inner: R,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    frames_read: usize,
}

impl<R: BufRead> RawFrameReader<R> {
    pub fn new(mut inner: R) -> Result<Self, SyncError> {
        let mut line = String::new();
        inner.read_line(&mut line)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || SyncError::BadHeader(line.trim_end().to_owned());
        if parts.len() != 4 || parts[3] != "rgb24" {
            return Err(bad());
        }
        let width: u32 = parts[0].parse().map_err(|_| bad())?;
        let height: u32 = parts[1].parse().map_err(|_| bad())?;
        let fps: f64 = parts[2].parse().map_err(|_| bad())?;
        if width == 0 || height == 0 || !(fps > 0.0 && fps.is_finite()) {
            return Err(bad());
        }
        Ok(Self { inner, width, height, fps, frames_read: 0 })
    }

    pub fn frame_bytes(&self) -> usize {
        self.width as usize * self.height as usize * 3
    }

    /// Fill `buf` with the next frame; `Ok(false)` at a clean end of stream.
    pub fn next_frame(&mut self, buf: &mut Vec<u8>) -> Result<bool, SyncError> {
        let n = self.frame_bytes();
        buf.resize(n, 0);
        let mut got = 0;
        while got < n {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(k) => got += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if got == 0 {
            return Ok(false);
        }
        if got < n {
            return Err(SyncError::StreamTruncated { frame: self.frames_read, got, expected: n });
        }
        self.frames_read += 1;
        Ok(true)
    }
}

/// Per frame, count ROI pixels with `red ≥ light_threshold` and
/// `red − max(green, blue) ≥ red_margin`.
pub fn roi_red_counts<R: BufRead>(
    frames: &mut RawFrameReader<R>,
    roi: &RoiSpec,
    light_threshold: u8,
    red_margin: u8,
) -> Result<IntensityTrace, SyncError> {
    roi.check(frames.width, frames.height)?;
    let stride = frames.width as usize * 3;
    let mut buf = Vec::new();
    let mut counts = Vec::new();
    while frames.next_frame(&mut buf)? {
        let mut c = 0u32;
        for row in roi.y..roi.y + roi.h {
            let base = row as usize * stride + roi.x as usize * 3;
            for px in buf[base..base + roi.w as usize * 3].chunks_exact(3) {
                let (r, g, b) = (px[0], px[1], px[2]);
                if r >= light_threshold && i16::from(r) - i16::from(g.max(b)) >= i16::from(red_margin) {
                    c += 1;
                }
            }
        }
        counts.push(c);
    }
    Ok(IntensityTrace { camera: roi.camera.clone(), fps: frames.fps, counts })
}

/// ON episodes as inclusive `(first, last)` frame pairs. A frame is ON when
/// `count ≥ pixel_threshold` within a run of at least `debounce` such frames.
pub fn detect_events(trace: &IntensityTrace, pixel_threshold: u32, debounce: usize) -> Vec<(usize, usize)> {
    let debounce = debounce.max(1);
    let mut out = Vec::new();
    let mut run_start = None;
    for (i, &c) in trace.counts.iter().chain(std::iter::once(&0)).enumerate() {
        let on = c >= pixel_threshold && i < trace.counts.len();
        match (on, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if i - s >= debounce {
                    out.push((s, i - 1));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub num_trials: usize,
    pub fixed_length_s: Option<f64>,
    pub pixel_threshold: u32,
    pub debounce: usize,
    pub max_frame_skew: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            num_trials: 1,
            fixed_length_s: None,
            pixel_threshold: 5,
            debounce: DEFAULT_DEBOUNCE,
            max_frame_skew: DEFAULT_MAX_FRAME_SKEW,
        }
    }
}

pub fn plan_trims(traces: &[IntensityTrace], opts: &PlanOptions) -> Result<TrimPlan, SyncError> {
    if opts.num_trials == 0 {
        return Err(SyncError::InvalidOption("num_trials must be at least 1".into()));
    }
    if opts.pixel_threshold == 0 {
        return Err(SyncError::InvalidOption("pixel_threshold must be at least 1".into()));
    }
    if traces.is_empty() {
        return Err(SyncError::InvalidOption("no traces".into()));
    }
    let mut trials: Vec<TrimTrial> =
        (0..opts.num_trials).map(|index| TrimTrial { index, windows: Vec::new() }).collect();
    let mut fps = BTreeMap::new();
    for tr in traces {
        if !(tr.fps > 0.0 && tr.fps.is_finite()) {
            return Err(SyncError::InvalidOption(format!("camera {}: fps {}", tr.camera, tr.fps)));
        }
        let events = detect_events(tr, opts.pixel_threshold, opts.debounce);
        if events.len() != opts.num_trials {
            return Err(SyncError::EventCountMismatch {
                camera: tr.camera.clone(),
                found: events.len(),
                expected: opts.num_trials,
            });
        }
        for (k, &(on, off)) in events.iter().enumerate() {
            let end = match opts.fixed_length_s {
                Some(len) => {
                    let n = (len * tr.fps).round();
                    if !(n >= 1.0) {
                        return Err(SyncError::InvalidOption(format!("fixed length {len} s")));
                    }
                    on + n as usize - 1
                }
                None => off,
            };
            if end >= tr.counts.len() {
                return Err(SyncError::WindowOutOfRange {
                    camera: tr.camera.clone(),
                    end,
                    len: tr.counts.len(),
                });
            }
            trials[k].windows.push(TrimWindow {
                camera: tr.camera.clone(),
                start_frame: on,
                end_frame: end,
                trial_index: k,
            });
        }
        fps.insert(tr.camera.clone(), tr.fps);
    }
    for t in &trials {
        let lens = t.windows.iter().map(TrimWindow::len);
        let (lo, hi) = lens.fold((usize::MAX, 0), |(lo, hi), l| (lo.min(l), hi.max(l)));
        if hi - lo > opts.max_frame_skew {
            return Err(SyncError::SkewTooLarge { trial: t.index, frames: hi - lo });
        }
    }
    Ok(TrimPlan {
        trials,
        fps,
        metadata: PlanMetadata {
            mode: "auto".into(),
            end_frame_convention: "last_on_inclusive".into(),
            fixed_length_s: opts.fixed_length_s,
            light_threshold: None,
            pixel_threshold: Some(opts.pixel_threshold),
            debounce: Some(opts.debounce),
        },
    })
}

pub fn manual_window(start: usize, end: usize, camera: &str) -> Result<TrimWindow, SyncError> {
    if start > end {
        return Err(SyncError::InvertedRange { start, end });
    }
    Ok(TrimWindow { camera: camera.to_owned(), start_frame: start, end_frame: end, trial_index: 0 })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    frame: usize,
    count: u32,
}

/// Read a `frame,count` trace CSV. Frames must be 0-based and contiguous.
pub fn read_trace_csv(path: &Path, camera: &str, fps: f64) -> Result<IntensityTrace, SyncError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    if headers != ["frame", "count"] {
        return Err(SyncError::BadHeader(format!("{}: expected frame,count", path.display())));
    }
    let mut counts = Vec::new();
    for row in rdr.deserialize() {
        let r: TraceRow = row?;
        if r.frame != counts.len() {
            return Err(SyncError::BadHeader(format!(
                "{}: frame {} out of sequence",
                path.display(),
                r.frame
            )));
        }
        counts.push(r.count);
    }
    Ok(IntensityTrace { camera: camera.to_owned(), fps, counts })
}

pub fn write_trace_csv(path: &Path, trace: &IntensityTrace) -> Result<(), SyncError> {
    let mut w = csv::Writer::from_path(path)?;
    for (frame, &count) in trace.counts.iter().enumerate() {
        w.serialize(TraceRow { frame, count })?;
    }
    w.flush()?;
    Ok(())
}
