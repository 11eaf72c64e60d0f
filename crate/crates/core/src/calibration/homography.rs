use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::CalibrationError;

/// Similarity transform moving the centroid to the origin with mean
/// distance √2 (Hartley normalization).
fn normalizer(pts: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean_dist > 0.0 && mean_dist.is_finite()) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

/// Ratio of the principal second moments; ~0 for collinear point sets.
fn spread_ratio(pts: &[Vector2<f64>], t: &Matrix3<f64>) -> f64 {
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let q = t * Vector3::new(p.x, p.y, 1.0);
        sxx += q.x * q.x;
        sxy += q.x * q.y;
        syy += q.y * q.y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let hi = 0.5 * tr + disc;
    let lo = 0.5 * tr - disc;
    if hi > 0.0 {
        lo / hi
    } else {
        0.0
    }
}

/// Normalized DLT homography mapping `board_pts` to `image_pts`, scaled so
/// that `H[2][2] = 1`.
pub fn estimate_homography(
    board_pts: &[Vector2<f64>],
    image_pts: &[Vector2<f64>],
) -> Result<Matrix3<f64>, CalibrationError> {
    if board_pts.len() != image_pts.len() {
        return Err(CalibrationError::DegenerateConfiguration(format!(
            "{} board points vs {} image points",
            board_pts.len(),
            image_pts.len()
        )));
    }
    let n = board_pts.len();
    if n < 4 {
        return Err(CalibrationError::DegenerateConfiguration(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    let degenerate = || CalibrationError::DegenerateConfiguration("collinear correspondences".into());
    let tb = normalizer(board_pts).ok_or_else(degenerate)?;
    let ti = normalizer(image_pts).ok_or_else(degenerate)?;
    if spread_ratio(board_pts, &tb) < 1e-10 || spread_ratio(image_pts, &ti) < 1e-10 {
        return Err(degenerate());
    }

    // pad to at least 9 rows so the thin SVD exposes the full right null space
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (b, i)) in board_pts.iter().zip(image_pts).enumerate() {
        let p = tb * Vector3::new(b.x, b.y, 1.0);
        let q = ti * Vector3::new(i.x, i.y, 1.0);
        let (x, y) = (p.x, p.y);
        let (u, v) = (q.x, q.y);
        let r0 = 2 * k;
        let r1 = r0 + 1;
        a.row_mut(r0).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(degenerate)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(degenerate)?;
    let h = v_t.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti.try_inverse().ok_or_else(degenerate)?;
    let hm = ti_inv * hn * tb;
    let h33 = hm[(2, 2)];
    if h33.abs() < 1e-15 * hm.abs().max() {
        return Err(degenerate());
    }
    Ok(hm / h33)
}

pub fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square() -> Vec<Vector2<f64>> {
        vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(0.0, 1.0),
        ]
    }

    #[test]
    fn identity_from_unit_square() {
        let h = estimate_homography(&square(), &square()).unwrap();
        assert!((h - Matrix3::identity()).abs().max() < 1e-12, "{h}");
    }

    #[test]
    fn pure_scaling() {
        let img: Vec<_> = square().iter().map(|p| p * 2.0).collect();
        let h = estimate_homography(&square(), &img).unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0));
        assert!((h - expect).abs().max() < 1e-12, "{h}");
    }

    #[test]
    fn recovers_random_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = Matrix3::new(
            800.0, 35.0, 640.0, -20.0, 760.0, 360.0, 0.05, -0.08, 1.0,
        );
        let board: Vec<_> = (0..20)
            .map(|_| Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let img: Vec<_> = board.iter().map(|p| apply_homography(&truth, p)).collect();
        let h = estimate_homography(&board, &img).unwrap();
        for p in &board {
            let d = apply_homography(&h, p) - apply_homography(&truth, p);
            assert!(d.norm() < 1e-8, "{d:?}");
        }
    }

    #[test]
    fn rejects_collinear_and_too_few() {
        let line: Vec<_> = (0..6).map(|i| Vector2::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(
            estimate_homography(&line, &line),
            Err(CalibrationError::DegenerateConfiguration(_))
        ));
        let three = &square()[..3];
        assert!(matches!(
            estimate_homography(three, three),
            Err(CalibrationError::DegenerateConfiguration(_))
        ));
    }
}
