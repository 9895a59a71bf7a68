//! Trilinear stencils in p and RBF weights in g, with derivatives.

use ndarray::Array2;

use crate::geometry::Vec3;

/// Default angular RBF width.
pub const SIGMA_ANGULAR: f64 = 0.1;

/// Eight trilinear corners: `(voxel index or None, weight, ∂weight/∂y)`.
pub type Stencil = [(Option<usize>, f64, Vec3); 8];

/// Corners outside the grid carry `None` (zero padding).
pub fn trilinear_stencil(shape: [usize; 3], y: &Vec3) -> Stencil {
    let mut base = [0i64; 3];
    let mut f = [0.0; 3];
    for k in 0..3 {
        let fl = y[k].floor();
        base[k] = fl as i64;
        f[k] = y[k] - fl;
    }
    let mut out = [(None, 0.0, Vec3::zeros()); 8];
    // far outside (or non-finite): every corner is padding
    if (0..3).any(|k| !(y[k] > -2.0 && y[k] < shape[k] as f64 + 1.0)) {
        return out;
    }
    for (c, slot) in out.iter_mut().enumerate() {
        let bits = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
        let mut w1 = [0.0; 3];
        let mut dw1 = [0.0; 3];
        let mut idx = [0i64; 3];
        for k in 0..3 {
            if bits[k] == 1 {
                w1[k] = f[k];
                dw1[k] = 1.0;
            } else {
                w1[k] = 1.0 - f[k];
                dw1[k] = -1.0;
            }
            idx[k] = base[k] + bits[k] as i64;
        }
        let w = w1[0] * w1[1] * w1[2];
        let dw = Vec3::new(dw1[0] * w1[1] * w1[2], w1[0] * dw1[1] * w1[2], w1[0] * w1[1] * dw1[2]);
        let inside = (0..3).all(|k| idx[k] >= 0 && idx[k] < shape[k] as i64);
        let vox = if inside {
            Some(((idx[0] as usize) * shape[1] + idx[1] as usize) * shape[2] + idx[2] as usize)
        } else {
            None
        };
        *slot = (vox, w, dw);
    }
    out
}

/// Normalized RBF weights `ŵ_m`, their log-gradients, and lift signs
/// `sgn(h·g_m)`.
#[derive(Debug, Clone)]
pub struct AngularWeights {
    pub w: Vec<f64>,
    pub dlogw: Vec<Vec3>,
    pub sign: Vec<f64>,
}

impl AngularWeights {
    /// `∂ŵ_m/∂h`.
    pub fn dw(&self, m: usize) -> Vec3 {
        let mut mean = Vec3::zeros();
        for (wk, dk) in self.w.iter().zip(&self.dlogw) {
            mean += dk * *wk;
        }
        (self.dlogw[m] - mean) * self.w[m]
    }

    /// `Σ_m a_m ∂ŵ_m/∂h` for coefficients `a`.
    pub fn contract(&self, a: &[f64]) -> Vec3 {
        let mut mean = Vec3::zeros();
        for (wk, dk) in self.w.iter().zip(&self.dlogw) {
            mean += dk * *wk;
        }
        let abar: f64 = self.w.iter().zip(a).map(|(w, x)| w * x).sum();
        let mut out = Vec3::zeros();
        for m in 0..self.w.len() {
            out += self.dlogw[m] * (self.w[m] * a[m]);
        }
        out - mean * abar
    }
}

/// `w_m ∝ exp(−arccos(|h·g_m|)²/2σ²)`, normalized to sum 1.
pub fn angular_weights(dirs: &[Vec3], h: &Vec3, sigma: f64) -> AngularWeights {
    let n = dirs.len();
    let mut theta = Vec::with_capacity(n);
    let mut sign = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for g in dirs {
        let c = h.dot(g);
        cs.push(c);
        sign.push(if c < 0.0 { -1.0 } else { 1.0 });
        theta.push(c.abs().min(1.0).acos());
    }
    let tmin = theta.iter().cloned().fold(f64::INFINITY, f64::min);
    let s2 = sigma * sigma;
    let mut w: Vec<f64> = theta.iter().map(|t| (-(t * t - tmin * tmin) / (2.0 * s2)).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    let dlogw = (0..n)
        .map(|m| {
            let t = theta[m];
            let st = t.sin();
            let ratio = if st < 1e-12 { 1.0 } else { t / st };
            dirs[m] * (ratio * sign[m] / s2)
        })
        .collect();
    AngularWeights { w, dlogw, sign }
}

/// RBF-weighted angular interpolation at `(p, g)` of shell data `e`
/// (`(X·Y·Z) × D`), trilinear in p with zero outside the grid.
pub fn angular_interpolate(e: &Array2<f64>, shape: [usize; 3], dirs: &[Vec3], p: &Vec3, g: &Vec3, sigma: f64) -> f64 {
    let st = trilinear_stencil(shape, p);
    let aw = angular_weights(dirs, g, sigma);
    let mut acc = 0.0;
    for (m, wm) in aw.w.iter().enumerate() {
        if *wm == 0.0 {
            continue;
        }
        let mut t = 0.0;
        for (vox, w, _) in &st {
            if let Some(v) = vox {
                t += w * e[[*v, m]];
            }
        }
        acc += wm * t;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sphere_directions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stencil_is_exact_on_grid() {
        let st = trilinear_stencil([3, 3, 3], &Vec3::new(1.0, 2.0, 0.0));
        let active: Vec<_> = st.iter().filter(|c| c.1 != 0.0).collect();
        assert_eq!(active.len(), 1);
        assert_eq!(active[0].0, Some((3 + 2) * 3));
        assert_eq!(active[0].1, 1.0);
        let total: f64 = trilinear_stencil([3, 3, 3], &Vec3::new(0.3, 1.7, 0.2)).iter().map(|c| c.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn far_points_are_padding() {
        for y in [Vec3::new(1e300, 0.0, 0.0), Vec3::new(f64::NAN, 1.0, 1.0), Vec3::new(1.0, -f64::INFINITY, 1.0)] {
            assert!(trilinear_stencil([3, 3, 3], &y).iter().all(|c| c.0.is_none()));
        }
    }

    #[test]
    fn angular_interpolation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dirs = sphere_directions();
        let e = Array2::from_shape_fn((8, 13), |_| rng.gen_range(0.0..1.0));
        let p = Vec3::new(0.4, 0.6, 0.1);
        let g = Vec3::new(0.3, -0.5, 0.8).normalize();
        let a = angular_interpolate(&e, [2, 2, 2], &dirs, &p, &g, 0.1);
        let b = angular_interpolate(&e, [2, 2, 2], &dirs, &p, &(-g), 0.1);
        assert_eq!(a, b);

        // narrow RBF concentrates on the node
        let node = angular_interpolate(&e, [2, 2, 2], &dirs, &Vec3::new(1.0, 0.0, 1.0), &dirs[4], 1e-3);
        assert!((node - e[[5, 4]]).abs() < 1e-14);

        // single direction: any g returns that channel
        let e1 = e.slice(ndarray::s![.., 0..1]).to_owned();
        let v = angular_interpolate(&e1, [2, 2, 2], &dirs[..1], &p, &g, 0.1);
        let v0 = angular_interpolate(&e1, [2, 2, 2], &dirs[..1], &p, &dirs[0], 0.1);
        assert!((v - v0).abs() < 1e-15);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let dirs = sphere_directions();
        let h = Vec3::new(0.2, 0.3, 0.9).normalize();
        let aw = angular_weights(&dirs, &h, 0.3);
        let eps = 1e-6;
        for m in [0usize, 5, 9] {
            let g = aw.dw(m);
            for k in 0..3 {
                let mut hp = h;
                hp[k] += eps;
                let mut hm = h;
                hm[k] -= eps;
                let fd = (angular_weights(&dirs, &hp, 0.3).w[m] - angular_weights(&dirs, &hm, 0.3).w[m]) / (2.0 * eps);
                assert!((fd - g[k]).abs() < 1e-7);
            }
        }
    }
}
