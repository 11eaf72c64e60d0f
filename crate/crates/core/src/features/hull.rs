//! Incremental 3D convex hull and its enclosed volume.

use std::collections::HashSet;

use nalgebra::Vector3;

use super::FeatureError;

#[derive(Debug, Clone)]
struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
    alive: bool,
}

/// Triangulated convex hull; facets are wound counter-clockwise seen from
/// outside.
#[derive(Debug, Clone)]
pub struct ConvexHull {
    points: Vec<Vector3<f64>>,
    faces: Vec<Face>,
    interior: Vector3<f64>,
}

impl ConvexHull {
    /// Returns `Ok(None)` for collinear or coplanar input.
    pub fn build(points: &[Vector3<f64>]) -> Result<Option<Self>, FeatureError> {
        if points.len() < 4 {
            return Err(FeatureError::TooFewPoints(points.len()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(FeatureError::NonFinite);
        }
        let (lo, hi) = points.iter().fold(
            (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        let scale = (hi - lo).norm();
        if scale == 0.0 {
            return Ok(None);
        }
        let eps = 1e-12 * scale;

        let i0 = 0;
        let i1 = argmax(points, |p| (p - points[i0]).norm());
        let axis = points[i1] - points[i0];
        if axis.norm() <= eps {
            return Ok(None);
        }
        let i2 = argmax(points, |p| axis.cross(&(p - points[i0])).norm() / axis.norm());
        let n = axis.cross(&(points[i2] - points[i0]));
        if n.norm() <= eps * axis.norm() {
            return Ok(None);
        }
        let n = n.normalize();
        let i3 = argmax(points, |p| n.dot(&(p - points[i0])).abs());
        if n.dot(&(points[i3] - points[i0])).abs() <= eps {
            return Ok(None);
        }

        let interior = (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
        let mut hull = ConvexHull { points: points.to_vec(), faces: Vec::new(), interior };
        for f in [[i0, i1, i2], [i0, i1, i3], [i0, i2, i3], [i1, i2, i3]] {
            hull.push_face(f[0], f[1], f[2]);
        }

        let seed = [i0, i1, i2, i3];
        for idx in 0..points.len() {
            if !seed.contains(&idx) {
                hull.insert(idx, eps);
            }
        }
        Ok(Some(hull))
    }

    fn push_face(&mut self, a: usize, b: usize, c: usize) {
        let p = &self.points;
        let mut v = [a, b, c];
        let mut normal = (p[b] - p[a]).cross(&(p[c] - p[a]));
        if normal.dot(&(self.interior - p[a])) > 0.0 {
            v.swap(1, 2);
            normal = -normal;
        }
        let normal = normal.try_normalize(0.0).unwrap_or_else(Vector3::zeros);
        let offset = normal.dot(&p[v[0]]);
        self.faces.push(Face { v, normal, offset, alive: true });
    }

    fn insert(&mut self, idx: usize, eps: f64) {
        let q = self.points[idx];
        let visible: Vec<usize> = self
            .faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.alive && f.normal.dot(&q) - f.offset > eps)
            .map(|(i, _)| i)
            .collect();
        if visible.is_empty() {
            return;
        }
        let mut edges = HashSet::new();
        for &fi in &visible {
            let v = self.faces[fi].v;
            for k in 0..3 {
                edges.insert((v[k], v[(k + 1) % 3]));
            }
        }
        let mut horizon: Vec<(usize, usize)> =
            edges.iter().filter(|(a, b)| !edges.contains(&(*b, *a))).copied().collect();
        horizon.sort_unstable();
        for fi in visible {
            self.faces[fi].alive = false;
        }
        for (a, b) in horizon {
            self.push_face(a, b, idx);
        }
    }

    pub fn facets(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.faces.iter().filter(|f| f.alive).map(|f| f.v)
    }

    pub fn vertex_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.facets().flatten().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Sum of tetrahedra spanned by the interior point and each facet.
    pub fn volume(&self) -> f64 {
        let c = self.interior;
        self.facets()
            .map(|[a, b, d]| {
                let p = &self.points;
                (p[a] - c).dot(&(p[b] - c).cross(&(p[d] - c))) / 6.0
            })
            .sum()
    }
}

fn argmax(points: &[Vector3<f64>], f: impl Fn(&Vector3<f64>) -> f64) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in points.iter().enumerate() {
        let v = f(p);
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Convex-hull volume; zero for coplanar or collinear sets.
pub fn hull_volume(points: &[Vector3<f64>]) -> Result<f64, FeatureError> {
    Ok(ConvexHull::build(points)?.map_or(0.0, |h| h.volume()))
}
