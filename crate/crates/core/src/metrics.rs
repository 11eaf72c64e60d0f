//! Tracking-quality metrics: lag-one inter-frame correlation, log
//! dimensionless jerk, 3D error summaries and ICC(A,1) agreement.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{third_differences, Trajectory3D, TrajectoryError};
use crate::triangulation::Point3DRecord;

pub const METRICS_DT: f64 = 0.005;
pub const HAND_FACE_LARGE_ERROR_MM: f64 = 10.0;
pub const ARM_LARGE_ERROR_MM: f64 = 30.0;

/// Dimensionless jerk below this is treated as exactly zero.
const ZERO_JERK_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("zero variance")]
    ZeroVariance,
    #[error("jerk integral is zero")]
    DegenerateZeroJerk,
    #[error("path length is zero")]
    ZeroPath,
    #[error("need at least {need} samples, have {have}")]
    TooShort { need: usize, have: usize },
    #[error("no valid records")]
    EmptyInput,
    #[error("ratings matrix: {0}")]
    BadMatrix(String),
    #[error("degenerate variance: ICC denominator is zero")]
    DegenerateVariance,
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Norm of the marker position in rig coordinates.
    #[default]
    PositionNorm,
    /// Norm of the displacement between consecutive samples.
    DisplacementNorm,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let n = x.len().min(y.len());
    if n < 2 {
        return Err(MetricsError::TooShort { need: 2, have: n });
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    // relative guard: a stationary marker carries only rounding noise
    let scale = mx.abs().max(my.abs()).max(f64::MIN_POSITIVE);
    let floor = (1e-12 * scale).powi(2) * n as f64;
    if sxx <= floor || syy <= floor {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Lag-one Pearson correlation of a marker's magnitude series, skipping
/// pairs that touch a direction reversal or a missing sample.
pub fn marker_interframe_correlation(
    traj: &Trajectory3D,
    mode: CorrelationMode,
) -> Result<f64, MetricsError> {
    let p = traj.positions();
    let reversals = traj.detect_reversals();
    let mag: Vec<Option<f64>> = match mode {
        CorrelationMode::PositionNorm => p.iter().map(|v| v.map(|v| v.norm())).collect(),
        CorrelationMode::DisplacementNorm => p
            .windows(2)
            .map(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) => Some((b - a).norm()),
                _ => None,
            })
            .collect(),
    };
    // positions spanned by the pair (mag[i], mag[i + 1])
    let span = match mode {
        CorrelationMode::PositionNorm => 1,
        CorrelationMode::DisplacementNorm => 2,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..mag.len().saturating_sub(1) {
        if (i..=i + span).any(|k| reversals.contains(&k)) {
            continue;
        }
        if let (Some(a), Some(b)) = (mag[i], mag[i + 1]) {
            xs.push(a);
            ys.push(b);
        }
    }
    pearson(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub median: Option<f64>,
    pub per_marker: Vec<Option<f64>>,
    pub excluded_zero_variance: usize,
    pub excluded_too_short: usize,
}

pub fn interframe_correlation(trajs: &[Trajectory3D], mode: CorrelationMode) -> CorrelationSummary {
    let mut per_marker = Vec::with_capacity(trajs.len());
    let (mut zero, mut short) = (0, 0);
    for t in trajs {
        match marker_interframe_correlation(t, mode) {
            Ok(r) => per_marker.push(Some(r)),
            Err(MetricsError::ZeroVariance) => {
                zero += 1;
                per_marker.push(None);
            }
            Err(_) => {
                short += 1;
                per_marker.push(None);
            }
        }
    }
    let vals: Vec<f64> = per_marker.iter().flatten().copied().collect();
    CorrelationSummary {
        median: median(&vals),
        per_marker,
        excluded_zero_variance: zero,
        excluded_too_short: short,
    }
}

/// Log dimensionless jerk `ln(T⁵ / L² · ∫‖j‖² dt)` over the whole series or
/// the samples with `t ∈ [t1, t2]`.
pub fn ldj(traj: &Trajectory3D, window: Option<(f64, f64)>) -> Result<f64, MetricsError> {
    let t = match window {
        Some((t1, t2)) => {
            let idx: Vec<usize> = traj
                .times()
                .iter()
                .enumerate()
                .filter(|(_, &x)| x >= t1 && x <= t2)
                .map(|(i, _)| i)
                .collect();
            match (idx.first(), idx.last()) {
                (Some(&a), Some(&b)) => traj.slice(a..b + 1),
                _ => return Err(MetricsError::TooShort { need: 8, have: 0 }),
            }
        }
        None => traj.clone(),
    };
    if t.len() < 8 {
        return Err(MetricsError::TooShort { need: 8, have: t.len() });
    }
    let p: Vec<Vector3<f64>> = t.dense()?;
    let dt = t.uniform_step().ok_or(TrajectoryError::NonUniform)?;
    let duration = (p.len() - 1) as f64 * dt;
    let path = crate::trajectory::path_length(&p);
    if !(path > 0.0) {
        return Err(MetricsError::ZeroPath);
    }
    let j2: Vec<f64> = third_differences(&p, dt).iter().map(|j| j.norm_squared()).collect();
    let integral = dt * (j2.iter().sum::<f64>() - 0.5 * (j2[0] + j2[j2.len() - 1]));
    let dimensionless = duration.powi(5) / (path * path) * integral;
    if !(dimensionless > ZERO_JERK_TOL) {
        return Err(MetricsError::DegenerateZeroJerk);
    }
    Ok(dimensionless.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdjSummary {
    pub median: Option<f64>,
    pub per_marker: Vec<Option<f64>>,
    pub excluded: usize,
}

/// LDJ per marker over its longest gap-free run; trial value = median.
pub fn ldj_trial(trajs: &[Trajectory3D]) -> LdjSummary {
    let per_marker: Vec<Option<f64>> = trajs
        .iter()
        .map(|t| {
            let run = t.present_runs().into_iter().max_by_key(|r| r.len())?;
            ldj(&t.slice(run), None).ok()
        })
        .collect();
    let vals: Vec<f64> = per_marker.iter().flatten().copied().collect();
    LdjSummary {
        median: median(&vals),
        excluded: per_marker.len() - vals.len(),
        per_marker,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub median_mm: f64,
    pub pct_large: f64,
    pub threshold_mm: f64,
    pub n_frames: usize,
    pub n_markers: usize,
}

/// Median over markers of per-marker median error, and the percentage of
/// frames whose median marker error exceeds `threshold_mm`.
pub fn error_summary(records: &[Point3DRecord], threshold_mm: f64) -> Result<ErrorSummary, MetricsError> {
    let mut by_marker: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut by_frame: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let (Some(_), Some(e)) = (r.position, r.reproj_error_mm) {
            by_marker.entry(r.landmark_id).or_default().push(e);
            by_frame.entry(r.frame).or_default().push(e);
        }
    }
    if by_marker.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let marker_medians: Vec<f64> = by_marker.values().filter_map(|v| median(v)).collect();
    let median_mm = median(&marker_medians).ok_or(MetricsError::EmptyInput)?;
    let large = by_frame
        .values()
        .filter(|v| median(v).is_some_and(|m| m > threshold_mm))
        .count();
    Ok(ErrorSummary {
        median_mm,
        pct_large: 100.0 * large as f64 / by_frame.len() as f64,
        threshold_mm,
        n_frames: by_frame.len(),
        n_markers: by_marker.len(),
    })
}

/// Two-way, absolute-agreement, single-measure ICC. Rows are subjects,
/// columns are conditions.
pub fn icc_a1(ratings: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let n = ratings.len();
    if n < 2 {
        return Err(MetricsError::BadMatrix(format!("need at least 2 subjects, have {n}")));
    }
    let k = ratings[0].len();
    if k < 2 {
        return Err(MetricsError::BadMatrix(format!("need at least 2 conditions, have {k}")));
    }
    if ratings.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(MetricsError::BadMatrix("ragged or non-finite ratings".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = ratings.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = ratings.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| ratings.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let mut ss_err = 0.0;
    for (i, r) in ratings.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            ss_err += (v - row_means[i] - col_means[j] + grand).powi(2);
        }
    }
    let ms_r = ss_rows / (nf - 1.0);
    let ms_c = ss_cols / (kf - 1.0);
    let ms_e = ss_err / ((nf - 1.0) * (kf - 1.0));
    let den = ms_r + (kf - 1.0) * ms_e + kf / nf * (ms_c - ms_e);
    let scale = grand.abs().max(1.0);
    if !(den.abs() > 1e-24 * scale * scale) {
        return Err(MetricsError::DegenerateVariance);
    }
    Ok((ms_r - ms_e) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    pub dt: f64,
    pub max_gap_frames: usize,
    pub large_error_mm: f64,
    pub correlation_mode: CorrelationMode,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            dt: METRICS_DT,
            max_gap_frames: 5,
            large_error_mm: HAND_FACE_LARGE_ERROR_MM,
            correlation_mode: CorrelationMode::PositionNorm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub corr_median: Option<f64>,
    pub ldj_median: Option<f64>,
    pub err_mm_median: f64,
    pub pct_large_errors: f64,
    pub n_frames: usize,
    pub n_markers: usize,
    pub correlation: CorrelationSummary,
    pub ldj: LdjSummary,
    pub options: MetricsOptions,
    /// How the mm error is anchored when several cameras contribute.
    pub mm_anchor: String,
}

/// Build per-landmark trajectories from 3D records (`t = frame / fps`).
pub fn trajectories_from_records(records: &[Point3DRecord], fps: f64) -> Vec<Trajectory3D> {
    let mut frames: Vec<u64> = records.iter().map(|r| r.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let index: BTreeMap<u64, usize> = frames.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let mut per: BTreeMap<u32, Vec<Option<Vector3<f64>>>> = BTreeMap::new();
    for r in records {
        let slot = per.entry(r.landmark_id).or_insert_with(|| vec![None; frames.len()]);
        slot[index[&r.frame]] = r.position.map(|p| p.coords);
    }
    let t: Vec<f64> = frames.iter().map(|f| *f as f64 / fps).collect();
    per.into_iter()
        .filter_map(|(id, p)| Trajectory3D::new(id, t.clone(), p, fps).ok())
        .collect()
}

pub fn compute_trial_metrics(
    records: &[Point3DRecord],
    fps: f64,
    opts: &MetricsOptions,
) -> Result<TrialMetrics, MetricsError> {
    let errors = error_summary(records, opts.large_error_mm)?;
    let resampled: Vec<Trajectory3D> = trajectories_from_records(records, fps)
        .iter()
        .filter_map(|t| t.interpolate_gaps(opts.max_gap_frames).resample_uniform(opts.dt).ok())
        .collect();
    let correlation = interframe_correlation(&resampled, opts.correlation_mode);
    let ldj = ldj_trial(&resampled);
    Ok(TrialMetrics {
        corr_median: correlation.median,
        ldj_median: ldj.median,
        err_mm_median: errors.median_mm,
        pct_large_errors: errors.pct_large,
        n_frames: errors.n_frames,
        n_markers: errors.n_markers,
        correlation,
        ldj,
        options: opts.clone(),
        mm_anchor: "mean_over_used_cameras".into(),
    })
}
