//! Velocity fields on Ω, their integration by scaling-and-squaring, and
//! the spatial transformer that warps attenuations.

mod interp;
mod squaring;
mod warp;

pub use interp::{angular_interpolate, angular_weights, trilinear_stencil, AngularWeights, Stencil, SIGMA_ANGULAR};
pub use squaring::{compose_step, scaling_squaring, scaling_squaring_backward, scaling_squaring_taped, SquaringTape};
pub use warp::{warp, warp_backward};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{canonical_unit, Tangent6, Vec3};
use crate::steerable::{ChannelType, FeatureField, GaugeFrames};

pub(crate) fn voxel_coords(shape: [usize; 3], vox: usize) -> Vec3 {
    let z = vox % shape[2];
    let y = (vox / shape[2]) % shape[1];
    let x = vox / (shape[1] * shape[2]);
    Vec3::new(x as f64, y as f64, z as f64)
}

pub(crate) fn read3(a: &Array2<f64>, r: usize, c: usize) -> Vec3 {
    Vec3::new(a[[r, c]], a[[r, c + 1]], a[[r, c + 2]])
}

pub(crate) fn add3(a: &mut Array2<f64>, r: usize, c: usize, v: &Vec3) {
    for k in 0..3 {
        a[[r, c + k]] += v[k];
    }
}

pub(crate) fn write3(a: &mut Array2<f64>, r: usize, c: usize, v: &Vec3) {
    for k in 0..3 {
        a[[r, c + k]] = v[k];
    }
}

/// Embedded tangents `(v_p, v_s)` per node, stored `(X·Y·Z) × (D·6)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity6Field {
    pub shape: [usize; 3],
    pub dirs: Vec<Vec3>,
    pub data: Array2<f64>,
}

impl Velocity6Field {
    pub fn zeros(shape: [usize; 3], dirs: &[Vec3]) -> Self {
        Self {
            shape,
            dirs: dirs.to_vec(),
            data: Array2::zeros((shape[0] * shape[1] * shape[2], 6 * dirs.len())),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, vox: usize, j: usize) -> Tangent6 {
        Tangent6::new(read3(&self.data, vox, 6 * j), read3(&self.data, vox, 6 * j + 3))
    }

    pub fn set(&mut self, vox: usize, j: usize, t: &Tangent6) {
        write3(&mut self.data, vox, 6 * j, &t.vp);
        write3(&mut self.data, vox, 6 * j + 3, &t.vs);
    }

    /// Converts one 5-vector channel through the gauge frames.
    pub fn from_feature(frames: &GaugeFrames, f: &FeatureField) -> Result<Self> {
        if f.types != [ChannelType::Vector] {
            return Err(Error::ChannelMismatch("velocity needs exactly one 5-vector channel".into()));
        }
        let mut v = Self::zeros(f.shape, &frames.dirs);
        for vox in 0..f.n_voxels() {
            for j in 0..f.n_dirs {
                let x: Vec<f64> = (0..5).map(|k| f.data[[vox, 5 * j + k]]).collect();
                v.set(vox, j, &frames.to_tangent(j, &x));
            }
        }
        Ok(v)
    }

    /// Pulls a gradient w.r.t. the embedded tangents back to the 5-vectors.
    pub fn feature_grad(frames: &GaugeFrames, d6: &Array2<f64>) -> Array2<f64> {
        let d = frames.len();
        let mut out = Array2::zeros((d6.nrows(), 5 * d));
        for vox in 0..d6.nrows() {
            for j in 0..d {
                let t = Tangent6::new(read3(d6, vox, 6 * j), read3(d6, vox, 6 * j + 3));
                let x = frames.from_tangent(j, &t);
                for k in 0..5 {
                    out[[vox, 5 * j + k]] = x[k];
                }
            }
        }
        out
    }

    /// Max `|g·v_s|` over all nodes.
    pub fn tangency_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for vox in 0..self.n_voxels() {
            for (j, g) in self.dirs.iter().enumerate() {
                worst = worst.max(g.dot(&read3(&self.data, vox, 6 * j + 3)).abs());
            }
        }
        worst
    }

    /// Off-grid evaluation: trilinear in p, RBF in g with lift-aligned
    /// sphere parts projected onto the tangent plane at `g`.
    pub fn sample(&self, p: &Vec3, g: &Vec3, sigma: f64) -> Tangent6 {
        let st = trilinear_stencil(self.shape, p);
        let aw = angular_weights(&self.dirs, g, sigma);
        let mut vp = Vec3::zeros();
        let mut vs = Vec3::zeros();
        for (c, w, _) in &st {
            if let Some(c) = c {
                if *w == 0.0 {
                    continue;
                }
                for m in 0..self.dirs.len() {
                    vp += read3(&self.data, *c, 6 * m) * (w * aw.w[m]);
                    vs += read3(&self.data, *c, 6 * m + 3) * (w * aw.w[m] * aw.sign[m]);
                }
            }
        }
        Tangent6::new(vp, vs - g * g.dot(&vs))
    }

    pub fn max_norm(&self) -> f64 {
        let mut worst = 0.0f64;
        for vox in 0..self.n_voxels() {
            for j in 0..self.dirs.len() {
                worst = worst.max(self.get(vox, j).norm_squared().sqrt());
            }
        }
        worst
    }
}

/// Sampled map `Φ: Ω → Ω`: per node the image `(p, g)`, `p` in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub shape: [usize; 3],
    pub dirs: Vec<Vec3>,
    pub data: Array2<f64>,
}

impl DeformationField {
    pub fn identity(shape: [usize; 3], dirs: &[Vec3]) -> Self {
        Self::from_fn(shape, dirs, |p, g| (*p, *g))
    }

    /// Builds `Φ` from a function of node coordinates; orientations are
    /// normalized and canonicalized.
    pub fn from_fn(shape: [usize; 3], dirs: &[Vec3], f: impl Fn(&Vec3, &Vec3) -> (Vec3, Vec3)) -> Self {
        let n = shape[0] * shape[1] * shape[2];
        let mut data = Array2::zeros((n, 6 * dirs.len()));
        for vox in 0..n {
            let p = voxel_coords(shape, vox);
            for (j, g) in dirs.iter().enumerate() {
                let (pp, gg) = f(&p, g);
                write3(&mut data, vox, 6 * j, &pp);
                write3(&mut data, vox, 6 * j + 3, &canonical_unit(&gg));
            }
        }
        Self {
            shape,
            dirs: dirs.to_vec(),
            data,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.data.nrows()
    }

    pub fn position(&self, vox: usize, j: usize) -> Vec3 {
        read3(&self.data, vox, 6 * j)
    }

    pub fn orientation(&self, vox: usize, j: usize) -> Vec3 {
        read3(&self.data, vox, 6 * j + 3)
    }

    /// Largest p-displacement from the identity.
    pub fn max_displacement(&self) -> f64 {
        let mut worst = 0.0f64;
        for vox in 0..self.n_voxels() {
            let x = voxel_coords(self.shape, vox);
            for j in 0..self.dirs.len() {
                worst = worst.max((self.position(vox, j) - x).norm());
            }
        }
        worst
    }

    /// Max deviation of `‖g‖` from 1 and max non-canonical count.
    pub fn orientation_defects(&self) -> (f64, usize) {
        let mut worst = 0.0f64;
        let mut bad = 0;
        for vox in 0..self.n_voxels() {
            for j in 0..self.dirs.len() {
                let g = self.orientation(vox, j);
                worst = worst.max((g.norm() - 1.0).abs());
                if crate::geometry::canonical(&g) != g {
                    bad += 1;
                }
            }
        }
        (worst, bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sphere_directions;
    use crate::steerable::channel_layout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn velocity_conversion_is_tangent_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = GaugeFrames::new(&sphere_directions());
        let mut f = FeatureField::zeros([2, 2, 2], 13, channel_layout(0, 1));
        f.data.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let v = Velocity6Field::from_feature(&frames, &f).unwrap();
        assert!(v.tangency_residual() < 1e-15);
        let d6 = Array2::from_shape_fn(v.data.raw_dim(), |_| rng.gen_range(-1.0..1.0));
        let lhs = (&v.data * &d6).sum();
        let rhs = (&f.data * &Velocity6Field::feature_grad(&frames, &d6)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // norms agree: frames are orthonormal
        let n5: f64 = f.data.iter().map(|x| x * x).sum();
        let n6: f64 = v.data.iter().map(|x| x * x).sum();
        assert!((n5 - n6).abs() < 1e-12);
    }
}
