//! Action of octahedral rototranslations on sampled fields.
//!
//! A rotation `r` from the 24-element group acts about the grid center and
//! is followed by an integer shift. Voxels mapped outside the grid are
//! dropped (zero fill), so exact comparisons need data supported away from
//! the boundary whenever the shift is nonzero. A periodic action wraps the
//! shift instead, matching periodically padded convolutions.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::octahedral::GridPermutation;
use crate::geometry::{canonical, Mat3, Vec3};
use crate::steerable::{ChannelType, FeatureField, GaugeFrames, Mat5};

#[derive(Debug, Clone)]
pub struct OctahedralAction {
    pub perm: GridPermutation,
    pub shift: [i64; 3],
    /// Feature-frame change per source direction.
    pub gauge: Vec<Mat5>,
    pub periodic: bool,
}

impl OctahedralAction {
    pub fn new(rotation: Mat3, n: usize, shift: [i64; 3], frames: &GaugeFrames) -> Result<Self> {
        let perm = GridPermutation::new(rotation, n, &frames.dirs)
            .ok_or_else(|| Error::SamplingMismatch("direction set not closed under rotation".into()))?;
        let gauge = perm
            .dir_map
            .iter()
            .enumerate()
            .map(|(j, &(jp, s))| {
                if rotation == Mat3::identity() {
                    Mat5::identity()
                } else {
                    frames.gauge_transform(&rotation, j, jp, s)
                }
            })
            .collect();
        Ok(Self {
            perm,
            shift,
            gauge,
            periodic: false,
        })
    }

    pub fn periodic(mut self) -> Self {
        self.periodic = true;
        self
    }

    fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let n = self.perm.n;
        if shape != [n, n, n] {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: shape[0],
            });
        }
        Ok(())
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.perm.rotation
    }

    /// Image voxel, or `None` if shifted outside the grid.
    pub fn map_voxel(&self, idx: [usize; 3]) -> Option<[usize; 3]> {
        let m = self.perm.map_voxel(idx);
        let n = self.perm.n as i64;
        let mut out = [0usize; 3];
        for k in 0..3 {
            let mut v = m[k] as i64 + self.shift[k];
            if self.periodic {
                v = v.rem_euclid(n);
            }
            if v < 0 || v >= n {
                return None;
            }
            out[k] = v as usize;
        }
        Some(out)
    }

    /// Continuous voxel-space point image.
    pub fn map_point(&self, p: &Vec3) -> Vec3 {
        self.perm.map_point(p) + Vec3::new(self.shift[0] as f64, self.shift[1] as f64, self.shift[2] as f64)
    }

    /// Orientation image as a canonical representative.
    pub fn map_orientation(&self, g: &Vec3) -> Vec3 {
        canonical(&(self.perm.rotation * g))
    }

    fn for_each_voxel(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    if let Some(m) = self.map_voxel([x, y, z]) {
                        f((x * n + y) * n + z, (m[0] * n + m[1]) * n + m[2]);
                    }
                }
            }
        }
    }

    /// `(γ▶f)(γx) = T f(x)` with `T` the gauge change on 5-vector channels.
    pub fn act_feature(&self, f: &FeatureField) -> Result<FeatureField> {
        self.check_shape(f.shape)?;
        let c = f.channels();
        let offs = f.offsets();
        let mut out = FeatureField::zeros(f.shape, f.n_dirs, f.types.clone());
        out.spacing = f.spacing;
        self.for_each_voxel(f.shape[0], |src, dst| {
            for j in 0..f.n_dirs {
                let (jp, _) = self.perm.dir_map[j];
                let t = &self.gauge[j];
                for (ch, ty) in f.types.iter().enumerate() {
                    let a = j * c + offs[ch];
                    let b = jp * c + offs[ch];
                    match ty {
                        ChannelType::Scalar => out.data[[dst, b]] = f.data[[src, a]],
                        ChannelType::Vector => {
                            for r in 0..5 {
                                let mut acc = 0.0;
                                for k in 0..5 {
                                    acc += t[(r, k)] * f.data[[src, a + k]];
                                }
                                out.data[[dst, b + r]] = acc;
                            }
                        }
                    }
                }
            }
        });
        Ok(out)
    }

    /// Scalar shell data `(X·Y·Z) × D`.
    pub fn act_shell(&self, e: &Array2<f64>, shape: [usize; 3]) -> Result<Array2<f64>> {
        self.check_shape(shape)?;
        let mut out = Array2::zeros(e.raw_dim());
        self.for_each_voxel(shape[0], |src, dst| {
            for j in 0..e.ncols() {
                out[[dst, self.perm.dir_map[j].0]] = e[[src, j]];
            }
        });
        Ok(out)
    }

    /// Embedded tangent data `(X·Y·Z) × (D·6)`: `(r v_p, s r v_s)`.
    pub fn act_tangent(&self, v: &Array2<f64>, shape: [usize; 3]) -> Result<Array2<f64>> {
        self.check_shape(shape)?;
        let r = self.perm.rotation;
        let d = v.ncols() / 6;
        let mut out = Array2::zeros(v.raw_dim());
        self.for_each_voxel(shape[0], |src, dst| {
            for j in 0..d {
                let (jp, s) = self.perm.dir_map[j];
                let vp = r * Vec3::new(v[[src, 6 * j]], v[[src, 6 * j + 1]], v[[src, 6 * j + 2]]);
                let vs = r * Vec3::new(v[[src, 6 * j + 3]], v[[src, 6 * j + 4]], v[[src, 6 * j + 5]]) * s;
                for k in 0..3 {
                    out[[dst, 6 * jp + k]] = vp[k];
                    out[[dst, 6 * jp + 3 + k]] = vs[k];
                }
            }
        });
        Ok(out)
    }

    /// Map data `(X·Y·Z) × (D·6)` holding `(Φ_p, Φ_g)`: `(γ Φ γ⁻¹)`.
    pub fn act_map(&self, phi: &Array2<f64>, shape: [usize; 3]) -> Result<Array2<f64>> {
        self.check_shape(shape)?;
        let d = phi.ncols() / 6;
        let mut out = Array2::zeros(phi.raw_dim());
        self.for_each_voxel(shape[0], |src, dst| {
            for j in 0..d {
                let (jp, _) = self.perm.dir_map[j];
                let p = self.map_point(&Vec3::new(phi[[src, 6 * j]], phi[[src, 6 * j + 1]], phi[[src, 6 * j + 2]]));
                let g = self.map_orientation(&Vec3::new(phi[[src, 6 * j + 3]], phi[[src, 6 * j + 4]], phi[[src, 6 * j + 5]]));
                for k in 0..3 {
                    out[[dst, 6 * jp + k]] = p[k];
                    out[[dst, 6 * jp + 3 + k]] = g[k];
                }
            }
        });
        Ok(out)
    }
}
