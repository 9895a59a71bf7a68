use nalgebra::{Matrix2, Matrix2x3, Matrix3x2, SMatrix};

use crate::geometry::{log_sphere_lift, minimal_rotation, Mat3, Tangent6, Vec3};

pub type Mat5 = SMatrix<f64, 5, 5>;

/// Orthogonal ties between directions are detected with this tolerance.
pub const TIE_TOL: f64 = 1e-9;

/// Gauge `F_g` per sampled direction: `F_g e_z = g`.
#[derive(Debug, Clone)]
pub struct GaugeFrames {
    pub dirs: Vec<Vec3>,
    pub frames: Vec<Mat3>,
}

/// Minimal rotation about `e_z × g` taking `e_z` to `g`.
pub fn frame_for(g: &Vec3) -> Mat3 {
    minimal_rotation(&Vec3::z(), g)
}

impl GaugeFrames {
    pub fn new(dirs: &[Vec3]) -> Self {
        Self {
            dirs: dirs.to_vec(),
            frames: dirs.iter().map(frame_for).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Sphere-tangent basis at direction `k`: the first two frame columns.
    pub fn tangent_basis(&self, k: usize) -> Matrix3x2<f64> {
        self.frames[k].fixed_columns::<2>(0).into_owned()
    }

    /// Lifts of `g_j` used when transporting to `g`: the closer one, or
    /// both with weight ½ when `g ⟂ g_j`.
    pub fn lifts(&self, g: usize, j: usize) -> Vec<(f64, f64)> {
        let c = self.dirs[g].dot(&self.dirs[j]);
        if c.abs() < TIE_TOL {
            vec![(1.0, 0.5), (-1.0, 0.5)]
        } else if c > 0.0 {
            vec![(1.0, 1.0)]
        } else {
            vec![(-1.0, 1.0)]
        }
    }

    /// Filter argument toward the lift `σ g_j`.
    pub fn filter_arg_lift(&self, g: usize, dp: &Vec3, j: usize, sigma: f64) -> [f64; 5] {
        let f = &self.frames[g];
        let pp = f.transpose() * dp;
        let (angle, u) = log_sphere_lift(&self.dirs[g], &(self.dirs[j] * sigma));
        let u2 = self.tangent_basis(g).transpose() * u * angle;
        [pp.x, pp.y, pp.z, u2.x, u2.y]
    }

    /// `(F_gᵀΔp, angle·u₂)` from the antipodal logarithm.
    pub fn filter_arg(&self, g: usize, dp: &Vec3, j: usize) -> [f64; 5] {
        let sigma = if self.dirs[g].dot(&self.dirs[j]) < 0.0 { -1.0 } else { 1.0 };
        self.filter_arg_lift(g, dp, j, sigma)
    }

    /// Change of gauge from direction `j` (via lift `σ g_j`) to `g`:
    /// `block(F_gᵀF_j, σ B_gᵀ P B_j)` with `P` the parallel transport along
    /// the geodesic from `σ g_j` to `g`.
    pub fn transporter_lift(&self, g: usize, j: usize, sigma: f64) -> Mat5 {
        let r3 = self.frames[g].transpose() * self.frames[j];
        let h = self.dirs[j] * sigma;
        let p = minimal_rotation(&h, &self.dirs[g]);
        let r2: Matrix2<f64> = self.tangent_basis(g).transpose() * p * self.tangent_basis(j) * sigma;
        let mut t = Mat5::zeros();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&r3);
        t.fixed_view_mut::<2, 2>(3, 3).copy_from(&r2);
        t
    }

    pub fn transporter(&self, g: usize, j: usize) -> Mat5 {
        let sigma = if self.dirs[g].dot(&self.dirs[j]) < 0.0 { -1.0 } else { 1.0 };
        self.transporter_lift(g, j, sigma)
    }

    /// Feature-frame change for a global rotation `r` at direction `j`:
    /// returns `(j', T)` with `g_{j'} = s·r g_j` and
    /// `T = block(F_{j'}ᵀ r F_j, s·Q)`. `T` has determinant `s`.
    pub fn gauge_transform(&self, r: &Mat3, j: usize, jp: usize, s: f64) -> Mat5 {
        let m3 = self.frames[jp].transpose() * r * self.frames[j];
        let q: Matrix2<f64> = m3.fixed_view::<2, 2>(0, 0).into_owned();
        let mut t = Mat5::zeros();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&m3);
        t.fixed_view_mut::<2, 2>(3, 3).copy_from(&(q * s));
        t
    }

    /// 5-vector `(a, b, c, d, e)` at direction `k` as a tangent of Ω.
    pub fn to_tangent(&self, k: usize, x: &[f64]) -> Tangent6 {
        let f = &self.frames[k];
        let vp = f * Vec3::new(x[0], x[1], x[2]);
        let vs = self.tangent_basis(k) * nalgebra::Vector2::new(x[3], x[4]);
        Tangent6::new(vp, vs)
    }

    /// Inverse of [`GaugeFrames::to_tangent`] (drops any normal component).
    pub fn from_tangent(&self, k: usize, v: &Tangent6) -> [f64; 5] {
        let a = self.frames[k].transpose() * v.vp;
        let b: Matrix2x3<f64> = self.tangent_basis(k).transpose();
        let s = b * v.vs;
        [a.x, a.y, a.z, s.x, s.y]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::octahedral::{rotations, GridPermutation};
    use crate::geometry::sphere_directions;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn frames_examples() {
        let fr = GaugeFrames::new(&sphere_directions());
        assert_eq!(fr.frames[0], Mat3::identity());
        let rot_y = Mat3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        assert!((fr.frames[2] - rot_y).abs().max() < 1e-15);
        for (k, f) in fr.frames.iter().enumerate() {
            assert!((f * Vec3::z() - fr.dirs[k]).abs().max() < 1e-12);
            assert!((f.transpose() * f - Mat3::identity()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn filter_arg_examples() {
        let fr = GaugeFrames::new(&sphere_directions());
        for g in 0..13 {
            assert_eq!(fr.filter_arg(g, &Vec3::zeros(), g), [0.0; 5]);
        }
        let v = fr.filter_arg(0, &Vec3::zeros(), 2);
        let expected = [0.0, 0.0, 0.0, FRAC_PI_2, 0.0];
        for k in 0..5 {
            assert!((v[k] - expected[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_arg_is_isometric_under_octahedral_group() {
        let dirs = sphere_directions();
        let fr = GaugeFrames::new(&dirs);
        let dp = Vec3::new(1.0, -1.0, 0.0);
        for r in rotations() {
            let gp = GridPermutation::new(r, 3, &dirs).unwrap();
            for g in 0..13 {
                for j in 0..13 {
                    if dirs[g].dot(&dirs[j]).abs() < TIE_TOL {
                        continue;
                    }
                    let v = nalgebra::SVector::<f64, 5>::from(fr.filter_arg(g, &dp, j));
                    let v2 = nalgebra::SVector::<f64, 5>::from(fr.filter_arg(gp.dir_map[g].0, &(r * dp), gp.dir_map[j].0));
                    assert!((v.norm() - v2.norm()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transporter_properties() {
        let fr = GaugeFrames::new(&sphere_directions());
        for g in 0..13 {
            assert!((fr.transporter(g, g) - Mat5::identity()).abs().max() < 1e-15);
            for j in 0..13 {
                let t = fr.transporter(g, j);
                let back = fr.transporter(j, g);
                if fr.dirs[g].dot(&fr.dirs[j]).abs() > TIE_TOL {
                    assert!((t * back - Mat5::identity()).abs().max() < 1e-12);
                }
                assert!((t.transpose() * t - Mat5::identity()).abs().max() < 1e-12);
                // block R3 is a rotation; the whole block can be a reflection
                // because of the antipodal sign.
                let r3: Mat3 = t.fixed_view::<3, 3>(0, 0).into_owned();
                assert!((r3.determinant() - 1.0).abs() < 1e-12);
                assert!((t.determinant().abs() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tangent_round_trip() {
        let fr = GaugeFrames::new(&sphere_directions());
        let x = [0.3, -0.1, 0.7, 0.2, -0.5];
        for k in 0..13 {
            let t = fr.to_tangent(k, &x);
            assert!(t.vs.dot(&fr.dirs[k]).abs() < 1e-15);
            let y = fr.from_tangent(k, &t);
            for c in 0..5 {
                assert!((x[c] - y[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gauge_transform_is_orthogonal_with_sign_determinant() {
        let dirs = sphere_directions();
        let fr = GaugeFrames::new(&dirs);
        for r in rotations() {
            let gp = GridPermutation::new(r, 3, &dirs).unwrap();
            for j in 0..13 {
                let (jp, s) = gp.dir_map[j];
                let t = fr.gauge_transform(&r, j, jp, s);
                assert!((t.transpose() * t - Mat5::identity()).abs().max() < 1e-12);
                assert!((t.determinant() - s).abs() < 1e-12);
            }
        }
    }
}
