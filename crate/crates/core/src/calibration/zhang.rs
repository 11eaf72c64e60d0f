//! Closed-form intrinsics from ≥3 planar homographies (image of the
//! absolute conic), zero skew assumed.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::CalibrationError;
use crate::geometry::{CameraExtrinsics, CameraIntrinsics};

fn conic_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Estimate `fx, fy, cx, cy` from board→image homographies. `image_size`
/// conditions the linear system and is carried into the result.
pub fn zhang_intrinsics_init(
    homographies: &[Matrix3<f64>],
    image_size: (u32, u32),
) -> Result<CameraIntrinsics, CalibrationError> {
    if homographies.len() < 3 {
        return Err(CalibrationError::InsufficientViews(homographies.len()));
    }
    let (w, h) = (f64::from(image_size.0), f64::from(image_size.1));
    let s = 0.5 * (w + h);
    let norm = Matrix3::new(1.0 / s, 0.0, -0.5 * w / s, 0.0, 1.0 / s, -0.5 * h / s, 0.0, 0.0, 1.0);

    let n = homographies.len();
    let mut v = DMatrix::<f64>::zeros(2 * n + 1, 6);
    for (k, hom) in homographies.iter().enumerate() {
        let hn = norm * hom;
        let hn = hn / hn.column(0).norm().max(hn.column(1).norm());
        let v12 = conic_row(&hn, 0, 1);
        let v11 = conic_row(&hn, 0, 0);
        let v22 = conic_row(&hn, 1, 1);
        for c in 0..6 {
            v[(2 * k, c)] = v12[c];
            v[(2 * k + 1, c)] = v11[c] - v22[c];
        }
    }
    // zero skew: B12 = 0
    v[(2 * n, 1)] = 1.0;

    let svd = v.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| CalibrationError::RankDeficient("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let smax = svd.singular_values[order[order.len() - 1]];
    let second = svd.singular_values[order[1]];
    if !(second > 1e-9 * smax) {
        return Err(CalibrationError::RankDeficient(format!(
            "conic system has a multi-dimensional null space (σ₂/σmax = {:.3e})",
            second / smax
        )));
    }
    let mut b: Vec<f64> = v_t.row(order[0]).iter().copied().collect();
    if b[0] < 0.0 {
        b.iter_mut().for_each(|x| *x = -*x);
    }
    let (b11, b12, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    let den = b11 * b22 - b12 * b12;
    let bad = || CalibrationError::RankDeficient("conic is not positive definite".into());
    if !(den > 0.0 && b11 > 0.0) {
        return Err(bad());
    }
    let v0 = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    let fx2 = lambda / b11;
    let fy2 = lambda * b11 / den;
    if !(fx2 > 0.0 && fy2 > 0.0) {
        return Err(bad());
    }
    let alpha = fx2.sqrt();
    let beta = fy2.sqrt();
    let u0 = -b13 * alpha * alpha / lambda;

    // undo conditioning: K = N⁻¹ K'
    let fx = alpha * s;
    let fy = beta * s;
    let cx = u0 * s + 0.5 * w;
    let cy = v0 * s + 0.5 * h;
    let intr = CameraIntrinsics::new(fx, fy, cx, cy, image_size.0, image_size.1);
    if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
        return Err(bad());
    }
    Ok(intr)
}

/// Board pose (board→camera) from a homography and intrinsics.
pub fn pose_from_homography(
    k: &CameraIntrinsics,
    hom: &Matrix3<f64>,
) -> Option<CameraExtrinsics> {
    let a = k.matrix().try_inverse()? * hom;
    let mut lambda = 1.0 / a.column(0).norm();
    if !lambda.is_finite() {
        return None;
    }
    if (a.column(2) * lambda).z < 0.0 {
        lambda = -lambda;
    }
    let r1: Vector3<f64> = a.column(0) * lambda;
    let r2: Vector3<f64> = a.column(1) * lambda;
    let t: Vector3<f64> = a.column(2) * lambda;
    let r3 = r1.cross(&r2);
    let q = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = q.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    Some(CameraExtrinsics::from_rotation(&r, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_homographies_insufficient() {
        let h = Matrix3::identity();
        assert!(matches!(
            zhang_intrinsics_init(&[h, h], (640, 480)),
            Err(CalibrationError::InsufficientViews(2))
        ));
    }

    #[test]
    fn identical_poses_rank_deficient() {
        let k = Matrix3::new(900.0, 0.0, 320.0, 0.0, 900.0, 240.0, 0.0, 0.0, 1.0);
        let rt = Matrix3::new(0.9, 0.1, 0.05, -0.1, 0.95, -0.02, 0.2, 0.3, 0.8);
        let h = k * rt;
        let hs = vec![h; 5];
        assert!(matches!(
            zhang_intrinsics_init(&hs, (640, 480)),
            Err(CalibrationError::RankDeficient(_))
        ));
    }
}
