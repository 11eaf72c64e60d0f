use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use walkdir::WalkDir;

use super::steps::{verify_artifact, TrialMetricsFile, METRICS_CSV_HEADER};
use super::{io_err, rel_string, write_file, PipelineConfig, PipelineError, METRICS_DIR, REPORT_DIR};
use crate::metrics::{icc_a1, median};

const METRICS: [&str; 4] = ["corr", "ldj", "err_mm", "pct_large"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanSd {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub n_trials: usize,
    pub subjects: Vec<String>,
    pub conditions: Vec<String>,
    /// condition → metric → mean ± SD over per-subject medians.
    pub condition_summary: BTreeMap<String, BTreeMap<String, MeanSd>>,
    /// ICC(A,1) between the two conditions' per-subject medians; present
    /// only when exactly two conditions exist.
    pub icc: Option<BTreeMap<String, Option<f64>>>,
    pub written: Vec<String>,
}

struct TrialRow {
    subject: String,
    condition: String,
    trial: String,
    values: [Option<f64>; 4],
    n_frames: usize,
    n_markers: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_sd(v: &[f64]) -> MeanSd {
    let n = v.len();
    let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
    let sd = mean.filter(|_| n > 1).map(|m| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    MeanSd { n, mean, sd }
}

fn load_rows(cfg: &PipelineConfig) -> Result<Vec<TrialRow>, PipelineError> {
    let mut rows = Vec::new();
    for e in WalkDir::new(&cfg.saving_dir).sort_by_file_name() {
        let e = e.map_err(|e| PipelineError::Invalid(e.to_string()))?;
        let p = e.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let in_metrics = p.parent().and_then(Path::file_name).is_some_and(|n| n == METRICS_DIR);
        if !(e.file_type().is_file() && in_metrics && name.ends_with(".json") && !name.ends_with(".meta.json")) {
            continue;
        }
        verify_artifact(cfg, p, "report")?;
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        let f: TrialMetricsFile =
            serde_json::from_str(&text).map_err(|e| PipelineError::Invalid(format!("{}: {e}", p.display())))?;
        let mut parts = f.trial.split('/');
        let subject = parts.next().unwrap_or("").to_owned();
        let condition = parts.next().unwrap_or("").to_owned();
        let m = &f.metrics;
        rows.push(TrialRow {
            subject,
            condition,
            trial: if f.trial.is_empty() { f.segment.clone() } else { format!("{}/{}", f.trial, f.segment) },
            values: [m.corr_median, m.ldj_median, Some(m.err_mm_median), Some(m.pct_large_errors)],
            n_frames: m.n_frames,
            n_markers: m.n_markers,
        });
    }
    Ok(rows)
}

/// Aggregate every per-trial metrics file under the saving directory into
/// `report/`: trials, per-subject medians, condition summaries, long-format
/// plot data and a JSON summary.
pub fn emit_report(cfg: &PipelineConfig) -> Result<ReportSummary, PipelineError> {
    let rows = load_rows(cfg)?;
    if rows.is_empty() {
        return Err(PipelineError::NothingToReport);
    }
    let out_dir = cfg.saving_dir.join(REPORT_DIR);
    let mut written = Vec::new();

    let mut trials_csv = METRICS_CSV_HEADER.replacen("subject,trial", "subject,condition,trial", 1);
    trials_csv.push('\n');
    for r in &rows {
        let _ = writeln!(
            trials_csv,
            "{},{},{},{},{},{},{},{},{}",
            r.subject,
            r.condition,
            r.trial,
            fmt_opt(r.values[0]),
            fmt_opt(r.values[1]),
            fmt_opt(r.values[2]),
            fmt_opt(r.values[3]),
            r.n_frames,
            r.n_markers
        );
    }

    // (subject, condition) → per-metric trial values
    let mut groups: BTreeMap<(String, String), (usize, [Vec<f64>; 4])> = BTreeMap::new();
    for r in &rows {
        let g = groups.entry((r.subject.clone(), r.condition.clone())).or_default();
        g.0 += 1;
        for (k, v) in r.values.iter().enumerate() {
            if let Some(v) = v {
                g.1[k].push(*v);
            }
        }
    }
    let subject_medians: BTreeMap<(String, String), [Option<f64>; 4]> = groups
        .iter()
        .map(|(key, (_, vals))| (key.clone(), [0, 1, 2, 3].map(|k| median(&vals[k]))))
        .collect();

    let mut subjects_csv = String::from("subject,condition,n_trials,corr,ldj,err_mm,pct_large\n");
    let mut plot_csv = String::from("metric,condition,subject,value\n");
    for ((subject, condition), med) in &subject_medians {
        let _ = writeln!(
            subjects_csv,
            "{subject},{condition},{},{},{},{},{}",
            groups[&(subject.clone(), condition.clone())].0,
            fmt_opt(med[0]),
            fmt_opt(med[1]),
            fmt_opt(med[2]),
            fmt_opt(med[3])
        );
    }
    for (k, metric) in METRICS.iter().enumerate() {
        for ((subject, condition), med) in &subject_medians {
            if let Some(v) = med[k] {
                let _ = writeln!(plot_csv, "{metric},{condition},{subject},{v}");
            }
        }
    }

    let conditions: Vec<String> =
        subject_medians.keys().map(|k| k.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let subjects: Vec<String> =
        subject_medians.keys().map(|k| k.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut condition_summary = BTreeMap::new();
    let mut conditions_csv = String::from("condition,metric,n,mean,sd\n");
    for c in &conditions {
        let mut per_metric = BTreeMap::new();
        for (k, metric) in METRICS.iter().enumerate() {
            let vals: Vec<f64> =
                subject_medians.iter().filter(|(key, _)| &key.1 == c).filter_map(|(_, m)| m[k]).collect();
            let s = mean_sd(&vals);
            let _ = writeln!(conditions_csv, "{c},{metric},{},{},{}", s.n, fmt_opt(s.mean), fmt_opt(s.sd));
            per_metric.insert(metric.to_string(), s);
        }
        condition_summary.insert(c.clone(), per_metric);
    }

    let icc = (conditions.len() == 2).then(|| {
        METRICS
            .iter()
            .enumerate()
            .map(|(k, metric)| {
                let ratings: Vec<Vec<f64>> = subjects
                    .iter()
                    .filter_map(|s| {
                        let a = subject_medians.get(&(s.clone(), conditions[0].clone()))?[k]?;
                        let b = subject_medians.get(&(s.clone(), conditions[1].clone()))?[k]?;
                        Some(vec![a, b])
                    })
                    .collect();
                (metric.to_string(), icc_a1(&ratings).ok())
            })
            .collect::<BTreeMap<_, _>>()
    });

    for (name, body) in [
        ("trials.csv", trials_csv),
        ("subjects.csv", subjects_csv),
        ("conditions.csv", conditions_csv),
        ("plot_data.csv", plot_csv),
    ] {
        let p = out_dir.join(name);
        write_file(&p, body.as_bytes())?;
        written.push(rel_string(&cfg.saving_dir, &p));
    }
    let summary_path = out_dir.join("summary.json");
    written.push(rel_string(&cfg.saving_dir, &summary_path));
    let summary = ReportSummary { n_trials: rows.len(), subjects, conditions, condition_summary, icc, written };
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| PipelineError::Invalid(e.to_string()))?;
    json.push('\n');
    write_file(&summary_path, json.as_bytes())?;
    Ok(summary)
}
