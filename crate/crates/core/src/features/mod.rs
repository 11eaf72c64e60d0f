//! Kinematic features from 3D landmarks: joint angles, hull volume and
//! fingertip apertures.

mod hull;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory3D;
use crate::triangulation::Point3DRecord;

pub use hull::{hull_volume, ConvexHull};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("degenerate vertex: coincident points")]
    DegenerateVertex,
    #[error("need at least 4 points, have {0}")]
    TooFewPoints(usize),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for FeatureError {
    fn from(e: std::io::Error) -> Self {
        FeatureError::Io(e.to_string())
    }
}

/// Angle at `b` between `a − b` and `c − b`, in degrees.
pub fn joint_angle(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Result<f64, FeatureError> {
    let u = a - b;
    let v = c - b;
    let (nu, nv) = (u.norm(), v.norm());
    if !(nu > 0.0 && nv > 0.0) {
        return Err(FeatureError::DegenerateVertex);
    }
    // atan2 keeps full precision near 0° and 180°
    Ok(u.cross(&v).norm().atan2(u.dot(&v)).to_degrees())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleTriple {
    pub name: String,
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AperturePair {
    pub name: String,
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSchema {
    pub id: String,
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub angles: Vec<AngleTriple>,
    pub apertures: Vec<AperturePair>,
}

const HAND_FINGERS: [(&str, [usize; 4]); 5] = [
    ("thumb", [1, 2, 3, 4]),
    ("index", [5, 6, 7, 8]),
    ("middle", [9, 10, 11, 12]),
    ("ring", [13, 14, 15, 16]),
    ("pinky", [17, 18, 19, 20]),
];

const POSE33_NAMES: [&str; 33] = [
    "nose", "left_eye_inner", "left_eye", "left_eye_outer", "right_eye_inner", "right_eye",
    "right_eye_outer", "left_ear", "right_ear", "mouth_left", "mouth_right", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_pinky",
    "right_pinky", "left_index", "right_index", "left_thumb", "right_thumb", "left_hip",
    "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle", "left_heel",
    "right_heel", "left_foot_index", "right_foot_index",
];

fn triple(name: &str, a: usize, b: usize, c: usize) -> AngleTriple {
    AngleTriple { name: name.into(), a, b, c }
}

impl LandmarkSchema {
    pub fn hand21() -> Self {
        let joint = |f: &str| match f {
            "thumb" => ["cmc", "mcp", "ip", "tip"],
            _ => ["mcp", "pip", "dip", "tip"],
        };
        let mut names = vec!["wrist".to_string()];
        let mut edges = Vec::new();
        let mut angles = Vec::new();
        for (finger, chain) in HAND_FINGERS {
            let j = joint(finger);
            names.extend(j.iter().map(|s| format!("{finger}_{s}")));
            edges.push((0, chain[0]));
            edges.extend(chain.windows(2).map(|w| (w[0], w[1])));
            let full = [0, chain[0], chain[1], chain[2], chain[3]];
            for k in 0..3 {
                angles.push(triple(
                    &format!("{finger}_{}_deg", j[k]),
                    full[k],
                    full[k + 1],
                    full[k + 2],
                ));
            }
        }
        edges.extend([(5, 9), (9, 13), (13, 17)]);
        Self {
            id: "hand21".into(),
            names,
            edges,
            angles,
            apertures: vec![AperturePair { name: "thumb_index_aperture".into(), a: 4, b: 8 }],
        }
    }

    pub fn pose33() -> Self {
        let edges = vec![
            (11, 12), (11, 13), (13, 15), (12, 14), (14, 16), (11, 23), (12, 24),
            (23, 24), (23, 25), (25, 27), (24, 26), (26, 28), (27, 29), (29, 31),
            (28, 30), (30, 32), (0, 2), (0, 5), (2, 7), (5, 8), (9, 10),
        ];
        let angles = vec![
            triple("left_elbow_deg", 11, 13, 15),
            triple("right_elbow_deg", 12, 14, 16),
            triple("left_shoulder_deg", 13, 11, 23),
            triple("right_shoulder_deg", 14, 12, 24),
            triple("left_hip_deg", 11, 23, 25),
            triple("right_hip_deg", 12, 24, 26),
            triple("left_knee_deg", 23, 25, 27),
            triple("right_knee_deg", 24, 26, 28),
        ];
        Self {
            id: "pose33".into(),
            names: POSE33_NAMES.iter().map(|s| s.to_string()).collect(),
            edges,
            angles,
            apertures: vec![AperturePair { name: "wrist_distance".into(), a: 15, b: 16 }],
        }
    }

    /// Unnamed landmarks with no angles or apertures; only the hull applies.
    pub fn generic(n: usize) -> Self {
        Self {
            id: format!("generic{n}"),
            names: (0..n).map(|i| format!("lm{i}")).collect(),
            edges: Vec::new(),
            angles: Vec::new(),
            apertures: Vec::new(),
        }
    }

    pub fn by_id(id: &str) -> Option<Self> {
        match id {
            "hand21" => Some(Self::hand21()),
            "pose33" => Some(Self::pose33()),
            other => other.strip_prefix("generic")?.parse().ok().map(Self::generic),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let n = self.len();
        let bad = self.edges.iter().any(|(a, b)| *a >= n || *b >= n)
            || self.angles.iter().any(|t| t.a >= n || t.b >= n || t.c >= n)
            || self.apertures.iter().any(|p| p.a >= n || p.b >= n);
        if bad {
            return Err(FeatureError::SchemaMismatch(format!("{}: index out of range", self.id)));
        }
        Ok(())
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.angles.iter().map(|t| t.name.clone()).collect();
        cols.push("hull_volume".into());
        cols.extend(self.apertures.iter().map(|p| p.name.clone()));
        cols
    }
}

/// One frame of features, in `LandmarkSchema::columns` order.
pub fn frame_features(landmarks: &[Option<Vector3<f64>>], schema: &LandmarkSchema) -> Vec<Option<f64>> {
    let at = |i: usize| landmarks.get(i).copied().flatten();
    let mut out = Vec::with_capacity(schema.angles.len() + 1 + schema.apertures.len());
    for t in &schema.angles {
        out.push(match (at(t.a), at(t.b), at(t.c)) {
            (Some(a), Some(b), Some(c)) => joint_angle(&a, &b, &c).ok(),
            _ => None,
        });
    }
    let present: Vec<Vector3<f64>> = landmarks.iter().flatten().copied().collect();
    out.push(if present.len() >= 4 { hull_volume(&present).ok() } else { None });
    for p in &schema.apertures {
        out.push(match (at(p.a), at(p.b)) {
            (Some(a), Some(b)) => Some((a - b).norm()),
            _ => None,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub columns: Vec<String>,
    pub frames: Vec<u64>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl FeatureTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (f, row) in self.frames.iter().zip(&self.rows) {
            let _ = write!(out, "{f}");
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Features per frame from per-landmark series sharing one time base.
/// Frame numbers are `round(t · source_fps)`.
pub fn feature_table(trajs: &[Trajectory3D], schema: &LandmarkSchema) -> Result<FeatureTable, FeatureError> {
    schema.validate()?;
    let Some(first) = trajs.first() else {
        return Err(FeatureError::SchemaMismatch("no trajectories".into()));
    };
    let mut slots: Vec<Option<&Trajectory3D>> = vec![None; schema.len()];
    for t in trajs {
        let id = t.landmark_id as usize;
        if id >= schema.len() {
            return Err(FeatureError::SchemaMismatch(format!(
                "landmark {id} outside {} ({} landmarks)",
                schema.id,
                schema.len()
            )));
        }
        if t.times() != first.times() {
            return Err(FeatureError::SchemaMismatch(format!("landmark {id} has a different time base")));
        }
        slots[id] = Some(t);
    }
    let fps = first.source_fps;
    let mut frames = Vec::with_capacity(first.len());
    let mut rows = Vec::with_capacity(first.len());
    for (i, t) in first.times().iter().enumerate() {
        let lms: Vec<Option<Vector3<f64>>> =
            slots.iter().map(|s| s.and_then(|tr| tr.positions()[i])).collect();
        frames.push((t * fps).round() as u64);
        rows.push(frame_features(&lms, schema));
    }
    Ok(FeatureTable { columns: schema.columns(), frames, rows })
}

/// Features per frame straight from triangulated records.
pub fn feature_table_from_records(
    records: &[Point3DRecord],
    schema: &LandmarkSchema,
) -> Result<FeatureTable, FeatureError> {
    schema.validate()?;
    let mut by_frame: BTreeMap<u64, Vec<Option<Vector3<f64>>>> = BTreeMap::new();
    for r in records {
        let id = r.landmark_id as usize;
        if id >= schema.len() {
            return Err(FeatureError::SchemaMismatch(format!(
                "landmark {id} outside {} ({} landmarks)",
                schema.id,
                schema.len()
            )));
        }
        by_frame.entry(r.frame).or_insert_with(|| vec![None; schema.len()])[id] = r.position.map(|p| p.coords);
    }
    let (frames, rows) = by_frame
        .into_iter()
        .map(|(f, lms)| (f, frame_features(&lms, schema)))
        .unzip();
    Ok(FeatureTable { columns: schema.columns(), frames, rows })
}
