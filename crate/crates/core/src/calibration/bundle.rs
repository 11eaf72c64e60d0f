//! Joint refinement of intrinsics, distortion, camera poses and board poses
//! by Levenberg–Marquardt on the Huber-weighted reprojection error.
//!
//! Parameter layout: `9·N` intrinsics (`fx fy cx cy k1 k2 p1 p2 k3` per
//! camera), then `6·(N−1)` extrinsics for cameras `1..N` (camera 0 is held
//! at identity), then `6` per board pose (rotvec, translation; board→world).

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::geometry::{project_camera_frame, rotate};
use crate::scalar::{Jet, Scalar};

const LOCAL: usize = 21;

#[derive(Debug, Clone)]
pub struct BundleObservation {
    pub camera: usize,
    pub pose: usize,
    /// Board-plane point (z = 0) in world units.
    pub board_point: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub rel_cost_tol: f64,
    pub huber_delta: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 200, initial_damping: 1e-3, rel_cost_tol: 1e-10, huber_delta: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// Robust cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct BundleProblem {
    pub n_cameras: usize,
    pub n_poses: usize,
    pub observations: Vec<BundleObservation>,
}

impl BundleProblem {
    pub fn n_params(&self) -> usize {
        9 * self.n_cameras + 6 * (self.n_cameras - 1) + 6 * self.n_poses
    }

    pub fn intr_offset(&self, cam: usize) -> usize {
        9 * cam
    }

    pub fn ext_offset(&self, cam: usize) -> Option<usize> {
        (cam > 0).then(|| 9 * self.n_cameras + 6 * (cam - 1))
    }

    pub fn pose_offset(&self, pose: usize) -> usize {
        9 * self.n_cameras + 6 * (self.n_cameras - 1) + 6 * pose
    }

    /// Global parameter index for each of the 21 local slots.
    fn local_indices(&self, o: &BundleObservation) -> [Option<usize>; LOCAL] {
        let mut idx = [None; LOCAL];
        let io = self.intr_offset(o.camera);
        for (k, slot) in idx.iter_mut().take(9).enumerate() {
            *slot = Some(io + k);
        }
        if let Some(eo) = self.ext_offset(o.camera) {
            for k in 0..6 {
                idx[9 + k] = Some(eo + k);
            }
        }
        let po = self.pose_offset(o.pose);
        for k in 0..6 {
            idx[15 + k] = Some(po + k);
        }
        idx
    }

    fn eval<T: Scalar>(local: &[T; LOCAL], o: &BundleObservation) -> Option<[T; 2]> {
        let bp = [T::cst(o.board_point.x), T::cst(o.board_point.y), T::cst(o.board_point.z)];
        let pr = [local[15], local[16], local[17]];
        let pw = rotate(&pr, &bp);
        let pw = [pw[0] + local[18], pw[1] + local[19], pw[2] + local[20]];
        let cr = [local[9], local[10], local[11]];
        let pc = rotate(&cr, &pw);
        let pc = [pc[0] + local[12], pc[1] + local[13], pc[2] + local[14]];
        let px = project_camera_frame(&local[..9], &pc)?;
        Some([px[0] - T::cst(o.pixel.x), px[1] - T::cst(o.pixel.y)])
    }

    fn gather(&self, x: &[f64], idx: &[Option<usize>; LOCAL]) -> [f64; LOCAL] {
        let mut l = [0.0; LOCAL];
        for (v, i) in l.iter_mut().zip(idx) {
            if let Some(i) = i {
                *v = x[*i];
            }
        }
        l
    }

    /// Residual for one observation, `None` if the point falls behind the camera.
    pub fn residual(&self, x: &[f64], o: &BundleObservation) -> Option<Vector2<f64>> {
        let l = self.gather(x, &self.local_indices(o));
        Self::eval(&l, o).map(|r| Vector2::new(r[0], r[1]))
    }

    /// Stacked residual vector (2 per observation); NaN for invalid ones.
    pub fn residuals(&self, x: &[f64]) -> DVector<f64> {
        let mut r = DVector::zeros(2 * self.observations.len());
        for (k, o) in self.observations.iter().enumerate() {
            let v = self.residual(x, o).unwrap_or(Vector2::new(f64::NAN, f64::NAN));
            r[2 * k] = v.x;
            r[2 * k + 1] = v.y;
        }
        r
    }

    fn local_jacobian(
        &self,
        x: &[f64],
        o: &BundleObservation,
    ) -> Option<([Option<usize>; LOCAL], [Jet<LOCAL>; 2])> {
        let idx = self.local_indices(o);
        let vals = self.gather(x, &idx);
        let mut local = [Jet::<LOCAL>::constant(0.0); LOCAL];
        for k in 0..LOCAL {
            local[k] = if idx[k].is_some() { Jet::var(vals[k], k) } else { Jet::constant(vals[k]) };
        }
        Self::eval(&local, o).map(|r| (idx, r))
    }

    /// Dense Jacobian of [`Self::residuals`]; intended for diagnostics.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.observations.len(), self.n_params());
        for (k, o) in self.observations.iter().enumerate() {
            if let Some((idx, r)) = self.local_jacobian(x, o) {
                for (row, jet) in r.iter().enumerate() {
                    for (slot, gi) in idx.iter().enumerate() {
                        if let Some(gi) = gi {
                            j[(2 * k + row, *gi)] = jet.d[slot];
                        }
                    }
                }
            }
        }
        j
    }

    fn huber(s: f64, delta: f64) -> (f64, f64) {
        if s <= delta {
            (s * s, 1.0)
        } else {
            (2.0 * delta * s - delta * delta, delta / s)
        }
    }

    /// Robust cost `Σ ρ(‖r‖)`; infinite if any point is behind its camera.
    pub fn robust_cost(&self, x: &[f64], delta: f64) -> f64 {
        let mut c = 0.0;
        for o in &self.observations {
            match self.residual(x, o) {
                Some(r) => c += Self::huber(r.norm(), delta).0,
                None => return f64::INFINITY,
            }
        }
        c
    }

    fn normal_equations(&self, x: &[f64], delta: f64) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.n_params();
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        for o in &self.observations {
            let Some((idx, r)) = self.local_jacobian(x, o) else { continue };
            let s = (r[0].v * r[0].v + r[1].v * r[1].v).sqrt();
            let w = Self::huber(s, delta).1;
            for a in 0..LOCAL {
                let Some(ga) = idx[a] else { continue };
                let ja0 = r[0].d[a];
                let ja1 = r[1].d[a];
                g[ga] += w * (ja0 * r[0].v + ja1 * r[1].v);
                for b in a..LOCAL {
                    let Some(gb) = idx[b] else { continue };
                    let v = w * (ja0 * r[0].d[b] + ja1 * r[1].d[b]);
                    h[(ga, gb)] += v;
                    if ga != gb {
                        h[(gb, ga)] += v;
                    }
                }
            }
        }
        (h, g)
    }

    pub fn solve(&self, x0: Vec<f64>, opts: &LmOptions) -> LmReport {
        let delta = opts.huber_delta;
        let mut x = x0;
        let mut cost = self.robust_cost(&x, delta);
        let mut history = vec![cost];
        let mut lambda = opts.initial_damping;
        let mut converged = false;
        let mut iterations = 0;
        let (mut h, mut g) = self.normal_equations(&x, delta);

        while iterations < opts.max_iterations {
            iterations += 1;
            let mut a = h.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let step = a.cholesky().map(|c| c.solve(&(-&g)));
            let accepted = match step {
                Some(dx) if dx.iter().all(|v| v.is_finite()) => {
                    let xn: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + b).collect();
                    let cn = self.robust_cost(&xn, delta);
                    if cn < cost {
                        let rel = (cost - cn) / cost;
                        x = xn;
                        cost = cn;
                        history.push(cost);
                        lambda = (lambda / 10.0).max(1e-15);
                        if rel < opts.rel_cost_tol || cost == 0.0 {
                            converged = true;
                        }
                        true
                    } else {
                        false
                    }
                }
                _ => false,
            };
            if converged {
                break;
            }
            if accepted {
                (h, g) = self.normal_equations(&x, delta);
            } else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    // no descent direction left at machine precision
                    converged = true;
                    break;
                }
            }
        }
        LmReport { params: x, cost_history: history, iterations, converged }
    }
}
