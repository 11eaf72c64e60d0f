//! `calibration.toml` and corner-observation CSV formats.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::{CalibrationError, CalibrationResult, CornerObservation};
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, CameraRig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetadata {
    pub rms_error_px: f64,
    pub unit_scale: f64,
}

/// Float literal that TOML reads back as a float with identical bits.
fn fmt_f(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E', 'i', 'N']) {
        s
    } else {
        format!("{s}.0")
    }
}

fn fmt_list(vs: &[f64]) -> String {
    let items: Vec<String> = vs.iter().map(|v| fmt_f(*v)).collect();
    format!("[{}]", items.join(", "))
}

fn toml_str(s: &str) -> String {
    Value::String(s.to_owned()).to_string()
}

pub fn render_calibration(rig: &CameraRig, rms_error_px: f64) -> String {
    let mut out = String::new();
    for (i, cam) in rig.cameras().iter().enumerate() {
        let k = &cam.intrinsics;
        let e = &cam.extrinsics;
        let _ = writeln!(out, "[cam_{i}]");
        let _ = writeln!(out, "name = {}", toml_str(&cam.name));
        let _ = writeln!(out, "size = [{}, {}]", k.width, k.height);
        let _ = writeln!(
            out,
            "matrix = [{}, {}, {}]",
            fmt_list(&[k.fx, 0.0, k.cx]),
            fmt_list(&[0.0, k.fy, k.cy]),
            fmt_list(&[0.0, 0.0, 1.0])
        );
        let _ = writeln!(out, "distortions = {}", fmt_list(&k.dist));
        let _ = writeln!(out, "rotation = {}", fmt_list(e.rotvec.as_slice()));
        let _ = writeln!(out, "translation = {}", fmt_list(e.tvec.as_slice()));
        out.push('\n');
    }
    out.push_str("[metadata]\n");
    let _ = writeln!(out, "rms_error_px = {}", fmt_f(rms_error_px));
    let _ = writeln!(out, "unit_scale = {}", fmt_f(rig.unit_scale()));
    out
}

pub fn write_calibration(result: &CalibrationResult, path: &Path) -> Result<(), CalibrationError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, render_calibration(&result.rig, result.rms_error_px))?;
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<CameraRig, CalibrationError> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_calibration(&text)?.0)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn get<'a>(t: &'a Table, table: &str, key: &str) -> Result<&'a Value, CalibrationError> {
    t.get(key).ok_or_else(|| CalibrationError::Schema(format!("{table}.{key}")))
}

fn num_list(v: &Value, path: &str, len: usize) -> Result<Vec<f64>, CalibrationError> {
    let arr = v
        .as_array()
        .ok_or_else(|| CalibrationError::Schema(format!("{path}: expected array")))?;
    if arr.len() != len {
        return Err(CalibrationError::Schema(format!(
            "{path}: expected {len} values, found {}",
            arr.len()
        )));
    }
    arr.iter()
        .map(|x| number(x).ok_or_else(|| CalibrationError::Schema(format!("{path}: non-numeric value"))))
        .collect()
}

pub fn parse_calibration(text: &str) -> Result<(CameraRig, CalibrationMetadata), CalibrationError> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| CalibrationError::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_owned(),
    })?;

    let meta_t = doc
        .get("metadata")
        .and_then(Value::as_table)
        .ok_or_else(|| CalibrationError::Schema("metadata".into()))?;
    let rms = number(get(meta_t, "metadata", "rms_error_px")?)
        .ok_or_else(|| CalibrationError::Schema("metadata.rms_error_px".into()))?;
    let unit_scale = number(get(meta_t, "metadata", "unit_scale")?)
        .ok_or_else(|| CalibrationError::Schema("metadata.unit_scale".into()))?;

    let mut indices: Vec<usize> = doc
        .keys()
        .filter_map(|k| k.strip_prefix("cam_").and_then(|n| n.parse().ok()))
        .collect();
    indices.sort_unstable();
    if indices.iter().enumerate().any(|(i, &n)| i != n) {
        return Err(CalibrationError::Schema(format!(
            "camera tables must be cam_0..cam_{}",
            indices.len().saturating_sub(1)
        )));
    }

    let mut cameras = Vec::with_capacity(indices.len());
    for i in indices {
        let tname = format!("cam_{i}");
        let t = doc[&tname]
            .as_table()
            .ok_or_else(|| CalibrationError::Schema(format!("{tname}: expected table")))?;
        let name = get(t, &tname, "name")?
            .as_str()
            .ok_or_else(|| CalibrationError::Schema(format!("{tname}.name")))?
            .to_owned();
        let size = num_list(get(t, &tname, "size")?, &format!("{tname}.size"), 2)?;
        let mrows = get(t, &tname, "matrix")?
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| CalibrationError::Schema(format!("{tname}.matrix")))?;
        let mut m = [[0.0; 3]; 3];
        for (r, row) in mrows.iter().enumerate() {
            let vals = num_list(row, &format!("{tname}.matrix"), 3)?;
            m[r].copy_from_slice(&vals);
        }
        let dist = num_list(get(t, &tname, "distortions")?, &format!("{tname}.distortions"), 5)?;
        let rot = num_list(get(t, &tname, "rotation")?, &format!("{tname}.rotation"), 3)?;
        let tr = num_list(get(t, &tname, "translation")?, &format!("{tname}.translation"), 3)?;
        if size.iter().any(|s| *s < 1.0 || s.fract() != 0.0) {
            return Err(CalibrationError::Schema(format!("{tname}.size")));
        }
        let intrinsics = CameraIntrinsics {
            fx: m[0][0],
            fy: m[1][1],
            cx: m[0][2],
            cy: m[1][2],
            dist: [dist[0], dist[1], dist[2], dist[3], dist[4]],
            width: size[0] as u32,
            height: size[1] as u32,
        };
        let extrinsics = CameraExtrinsics::new(
            Vector3::new(rot[0], rot[1], rot[2]),
            Vector3::new(tr[0], tr[1], tr[2]),
        );
        cameras.push(Camera { name, intrinsics, extrinsics });
    }
    let rig = CameraRig::new(cameras, unit_scale)?;
    Ok((rig, CalibrationMetadata { rms_error_px: rms, unit_scale }))
}

#[derive(Debug, Serialize, Deserialize)]
struct CornerRow {
    camera: String,
    frame: u64,
    corner_id: u32,
    x_px: f64,
    y_px: f64,
}

pub fn read_corner_csv(path: &Path) -> Result<Vec<CornerObservation>, CalibrationError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["camera", "frame", "corner_id", "x_px", "y_px"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(CalibrationError::Schema(format!(
            "{}: header must be {}",
            path.display(),
            expected.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: CornerRow = row?;
        out.push(CornerObservation {
            camera: r.camera,
            frame: r.frame,
            corner_id: r.corner_id,
            pixel: Vector2::new(r.x_px, r.y_px),
        });
    }
    Ok(out)
}

pub fn write_corner_csv(path: &Path, obs: &[CornerObservation]) -> Result<(), CalibrationError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for o in obs {
        w.serialize(CornerRow {
            camera: o.camera.clone(),
            frame: o.frame,
            corner_id: o.corner_id,
            x_px: o.pixel.x,
            y_px: o.pixel.y,
        })?;
    }
    w.flush()?;
    Ok(())
}
