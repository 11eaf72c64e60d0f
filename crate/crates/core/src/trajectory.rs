//! Per-marker 3D time series: gap filling, uniform resampling, finite
//! difference kinematics and direction-reversal detection.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("times must be strictly increasing and match positions ({0})")]
    Invalid(String),
    #[error("need at least {need} present samples, have {have}")]
    TooShort { need: usize, have: usize },
    #[error("sampling is not uniform")]
    NonUniform,
    #[error("series contains missing samples")]
    ContainsGaps,
    #[error("dt must be positive")]
    BadStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory3D {
    pub landmark_id: u32,
    t: Vec<f64>,
    p: Vec<Option<Vector3<f64>>>,
    pub source_fps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub speed: Vec<f64>,
    pub acceleration: Vec<f64>,
    pub jerk: Vec<Vector3<f64>>,
    pub path_length: f64,
}

impl Trajectory3D {
    pub fn new(
        landmark_id: u32,
        t: Vec<f64>,
        p: Vec<Option<Vector3<f64>>>,
        source_fps: f64,
    ) -> Result<Self, TrajectoryError> {
        if t.len() != p.len() {
            return Err(TrajectoryError::Invalid(format!("{} times, {} positions", t.len(), p.len())));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) || t.iter().any(|v| !v.is_finite()) {
            return Err(TrajectoryError::Invalid("times not strictly increasing".into()));
        }
        Ok(Self { landmark_id, t, p, source_fps })
    }

    /// Gap-free series sampled at `fps` starting at t = 0.
    pub fn from_uniform(landmark_id: u32, fps: f64, p: Vec<Vector3<f64>>) -> Self {
        let t = (0..p.len()).map(|i| i as f64 / fps).collect();
        Self { landmark_id, t, p: p.into_iter().map(Some).collect(), source_fps: fps }
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn positions(&self) -> &[Option<Vector3<f64>>] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn present_count(&self) -> usize {
        self.p.iter().filter(|p| p.is_some()).count()
    }

    /// Maximal runs of consecutive present samples as half-open ranges.
    pub fn present_runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, p) in self.p.iter().enumerate() {
            match (p.is_some(), start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push(s..self.p.len());
        }
        runs
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory3D {
        Trajectory3D {
            landmark_id: self.landmark_id,
            t: self.t[range.clone()].to_vec(),
            p: self.p[range].to_vec(),
            source_fps: self.source_fps,
        }
    }

    /// Dense positions, failing if any sample is missing.
    pub fn dense(&self) -> Result<Vec<Vector3<f64>>, TrajectoryError> {
        self.p.iter().map(|p| p.ok_or(TrajectoryError::ContainsGaps)).collect()
    }

    /// Uniform step if the series is uniformly sampled (relative tolerance 1e-6).
    pub fn uniform_step(&self) -> Option<f64> {
        if self.t.len() < 2 {
            return None;
        }
        let dt = (self.t[self.t.len() - 1] - self.t[0]) / (self.t.len() - 1) as f64;
        self.t
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-6 * dt)
            .then_some(dt)
    }

    /// Linear fill of interior gaps no longer than `max_gap_frames`.
    pub fn interpolate_gaps(&self, max_gap_frames: usize) -> Trajectory3D {
        let mut p = self.p.clone();
        let runs = self.present_runs();
        for pair in runs.windows(2) {
            let (a, b) = (pair[0].end - 1, pair[1].start);
            let gap = b - a - 1;
            if gap == 0 || gap > max_gap_frames {
                continue;
            }
            let (pa, pb) = (self.p[a].expect("run end present"), self.p[b].expect("run start present"));
            let (ta, tb) = (self.t[a], self.t[b]);
            for (i, slot) in p.iter_mut().enumerate().take(b).skip(a + 1) {
                let s = (self.t[i] - ta) / (tb - ta);
                *slot = Some(pa + (pb - pa) * s);
            }
        }
        Trajectory3D { p, ..self.clone() }
    }

    /// Linear interpolation onto `t0, t0 + dt, …`; grid points inside gaps stay missing.
    pub fn resample_uniform(&self, dt: f64) -> Result<Trajectory3D, TrajectoryError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(TrajectoryError::BadStep);
        }
        let have = self.present_count();
        if have < 2 {
            return Err(TrajectoryError::TooShort { need: 2, have });
        }
        let t0 = self.t[0];
        let span = self.t[self.t.len() - 1] - t0;
        let n = (span / dt + 1e-9).floor() as usize + 1;
        let mut t = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let tk = t0 + k as f64 * dt;
            while seg + 2 < self.t.len() && self.t[seg + 1] <= tk {
                seg += 1;
            }
            let (ta, tb) = (self.t[seg], self.t[seg + 1]);
            let v = match (self.p[seg], self.p[seg + 1]) {
                (Some(a), Some(b)) => {
                    let s = ((tk - ta) / (tb - ta)).clamp(0.0, 1.0);
                    Some(a + (b - a) * s)
                }
                (Some(a), None) if (tk - ta).abs() <= 1e-9 * dt => Some(a),
                (None, Some(b)) if (tb - tk).abs() <= 1e-9 * dt => Some(b),
                _ => None,
            };
            t.push(tk);
            p.push(v);
        }
        Ok(Trajectory3D { landmark_id: self.landmark_id, t, p, source_fps: self.source_fps })
    }

    pub fn path_length(&self) -> Result<f64, TrajectoryError> {
        let p = self.dense()?;
        Ok(path_length(&p))
    }

    pub fn kinematics(&self) -> Result<Kinematics, TrajectoryError> {
        let p = self.dense()?;
        if p.len() < 4 {
            return Err(TrajectoryError::TooShort { need: 4, have: p.len() });
        }
        let dt = self.uniform_step().ok_or(TrajectoryError::NonUniform)?;
        let n = p.len();
        let speed = (0..n)
            .map(|i| {
                let v = if i == 0 {
                    (p[1] - p[0]) / dt
                } else if i == n - 1 {
                    (p[n - 1] - p[n - 2]) / dt
                } else {
                    (p[i + 1] - p[i - 1]) / (2.0 * dt)
                };
                v.norm()
            })
            .collect();
        let acceleration = (0..n)
            .map(|i| {
                let c = i.clamp(1, n - 2);
                ((p[c + 1] - p[c] * 2.0 + p[c - 1]) / (dt * dt)).norm()
            })
            .collect();
        let jerk = third_differences(&p, dt);
        Ok(Kinematics { speed, acceleration, jerk, path_length: path_length(&p) })
    }

    /// Indices where the displacement direction reverses:
    /// `(p[i+1] − p[i]) · (p[i] − p[i−1]) < 0`.
    pub fn detect_reversals(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for i in 1..self.p.len().saturating_sub(1) {
            if let (Some(a), Some(b), Some(c)) = (self.p[i - 1], self.p[i], self.p[i + 1]) {
                if (c - b).dot(&(b - a)) < 0.0 {
                    out.insert(i);
                }
            }
        }
        out
    }

    /// Time-reversed copy on the same time grid.
    pub fn reversed(&self) -> Trajectory3D {
        let mut p = self.p.clone();
        p.reverse();
        let t0 = self.t[0];
        let t1 = self.t[self.t.len() - 1];
        let t = self.t.iter().rev().map(|v| t0 + t1 - v).collect();
        Trajectory3D { landmark_id: self.landmark_id, t, p, source_fps: self.source_fps }
    }
}

pub fn path_length(p: &[Vector3<f64>]) -> f64 {
    p.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Third derivative at every sample: central five-point stencil inside,
/// four-point one-sided stencils at the two samples nearest each end.
pub fn third_differences(p: &[Vector3<f64>], dt: f64) -> Vec<Vector3<f64>> {
    let n = p.len();
    let dt3 = dt * dt * dt;
    (0..n)
        .map(|i| {
            if i >= 2 && i + 2 < n {
                (p[i + 2] - p[i + 1] * 2.0 + p[i - 1] * 2.0 - p[i - 2]) / (2.0 * dt3)
            } else {
                let s = if i < 2 { i.min(n - 4) } else { i.saturating_sub(3) };
                (p[s + 3] - p[s + 2] * 3.0 + p[s + 1] * 3.0 - p[s]) / dt3
            }
        })
        .collect()
}
