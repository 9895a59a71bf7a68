//! Synthetic crossing-tube phantoms and ground-truth deformations.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deform::{scaling_squaring, DeformationField, Velocity6Field, SIGMA_ANGULAR};
use crate::error::{Error, Result};
use crate::geometry::octahedral::rotations;
use crate::geometry::{find_direction, sphere_directions, Mat3, QVector, Tangent6, Vec3};
use crate::pipeline::RawDwi;
use crate::steerable::GaugeFrames;
use crate::symmetry::OctahedralAction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    /// Point on the axis, voxel coordinates.
    pub center: [f64; 3],
    pub axis: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub b: f64,
    pub s0: f64,
    /// Rician noise std (absolute).
    pub noise_std: f64,
    /// Tube tensor eigenvalues (mm²/s): along and across the axis.
    pub lambda_par: f64,
    pub lambda_perp: f64,
    pub d_iso: f64,
    /// Width of the soft tube boundary, voxels.
    pub edge: f64,
    pub tubes: Vec<Tube>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::crossing([24, 24, 24])
    }
}

impl PhantomSpec {
    /// Two orthogonal tubes crossing near the grid center.
    pub fn crossing(shape: [usize; 3]) -> Self {
        let c = |k: usize| (shape[k] - 1) as f64 / 2.0;
        let r = shape.iter().copied().min().unwrap_or(1) as f64 / 6.0;
        Self {
            shape,
            b: 1000.0,
            s0: 1.0,
            noise_std: 0.02,
            lambda_par: 1.7e-3,
            lambda_perp: 0.3e-3,
            d_iso: 0.9e-3,
            edge: 0.75,
            tubes: vec![
                Tube {
                    center: [c(0), c(1) - 0.5 * r, c(2)],
                    axis: [1.0, 0.0, 0.0],
                    radius: r,
                },
                Tube {
                    center: [c(0) + 0.5 * r, c(1), c(2)],
                    axis: [0.0, 1.0, 1.0],
                    radius: r,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("phantom spec: {m}")));
        if self.shape.iter().any(|&n| n == 0) {
            return bad("empty grid");
        }
        if !(self.lambda_par > 0.0 && self.lambda_perp > 0.0 && self.d_iso > 0.0) {
            return bad("eigenvalues must be positive");
        }
        if !(self.b > 0.0 && self.s0 > 0.0 && self.noise_std >= 0.0 && self.edge > 0.0) {
            return bad("b, s0, edge must be positive and noise non-negative");
        }
        if self.tubes.iter().any(|t| Vec3::from(t.axis).norm() < 1e-12 || !(t.radius > 0.0)) {
            return bad("tube axis must be nonzero and radius positive");
        }
        Ok(())
    }

    /// Spec of the image `γ▶` under an octahedral rototranslation.
    pub fn transformed(&self, act: &OctahedralAction) -> Self {
        let mut out = self.clone();
        for t in &mut out.tubes {
            t.center = act.map_point(&Vec3::from(t.center)).into();
            t.axis = (act.rotation() * Vec3::from(t.axis)).into();
        }
        out
    }

    /// Tube volume fractions at `p` (rescaled if they sum above 1).
    pub fn fractions(&self, p: &Vec3) -> Vec<f64> {
        let mut f: Vec<f64> = self
            .tubes
            .iter()
            .map(|t| {
                let a = Vec3::from(t.axis).normalize();
                let d = p - Vec3::from(t.center);
                let dist = (d - a * d.dot(&a)).norm();
                1.0 / (1.0 + ((dist - t.radius) / self.edge).exp())
            })
            .collect();
        let total: f64 = f.iter().sum();
        if total > 1.0 {
            f.iter_mut().for_each(|x| *x /= total);
        }
        f
    }

    /// Noise-free attenuation at `(p, q̂)`.
    pub fn attenuation(&self, p: &Vec3, g: &Vec3) -> f64 {
        let f = self.fractions(p);
        let iso = 1.0 - f.iter().sum::<f64>();
        let mut e = iso * (-self.b * self.d_iso).exp();
        for (fk, t) in f.iter().zip(&self.tubes) {
            let a = Vec3::from(t.axis).normalize();
            let c = g.dot(&a);
            e += fk * (-self.b * (self.lambda_perp + (self.lambda_par - self.lambda_perp) * c * c)).exp();
        }
        e
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub dwi: RawDwi,
    /// Bit k set where tube k holds more than half the volume.
    pub labels: Vec<u8>,
    /// Axis of the dominant tube, zero in the background.
    pub principal: Vec<Vec3>,
}

fn voxel_point(shape: [usize; 3], vox: usize) -> Vec3 {
    Vec3::new((vox / (shape[1] * shape[2])) as f64, ((vox / shape[2]) % shape[1]) as f64, (vox % shape[2]) as f64)
}

fn rician(s: f64, std: f64, rng: &mut ChaCha8Rng) -> f64 {
    if std == 0.0 {
        return s;
    }
    let n = Normal::new(0.0, std).expect("finite std");
    let a = s + n.sample(rng);
    let b = n.sample(rng);
    (a * a + b * b).sqrt()
}

/// One b0 volume followed by the 13 octahedral directions at `spec.b`.
pub fn phantom_qvecs(b: f64) -> Vec<QVector> {
    let mut q = vec![QVector::from_b(0.0, &Vec3::z()).expect("b = 0")];
    q.extend(sphere_directions().iter().map(|g| QVector::from_b(b, g).expect("b > 0")));
    q
}

/// Signal with per-voxel noise streams, so values do not depend on the
/// traversal order.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    generate_with(spec, seed, |p, g| (*p, *g))
}

/// Phantom pulled back through a map: the signal at grid point `(x, g_j)`
/// is the noise-free model at `map(x, g_j)`. Labels follow the mapped
/// positions.
pub fn generate_with(spec: &PhantomSpec, seed: u64, map: impl Fn(&Vec3, &Vec3) -> (Vec3, Vec3)) -> Result<Phantom> {
    spec.validate()?;
    let qvecs = phantom_qvecs(spec.b);
    let dirs = sphere_directions();
    let n: usize = spec.shape.iter().product();
    let mut data = Array2::zeros((n, qvecs.len()));
    let mut labels = vec![0u8; n];
    let mut principal = vec![Vec3::zeros(); n];
    for vox in 0..n {
        let x = voxel_point(spec.shape, vox);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(vox as u64);
        data[[vox, 0]] = rician(spec.s0, spec.noise_std, &mut rng);
        let mut centre = Vec3::zeros();
        for (j, g) in dirs.iter().enumerate() {
            let (p, h) = map(&x, g);
            centre += p;
            data[[vox, j + 1]] = rician(spec.s0 * spec.attenuation(&p, &h), spec.noise_std, &mut rng);
        }
        let f = spec.fractions(&(centre / dirs.len() as f64));
        let mut best = 0.5;
        for (k, fk) in f.iter().enumerate() {
            if *fk > 0.5 {
                labels[vox] |= 1 << k;
            }
            if *fk > best {
                best = *fk;
                principal[vox] = Vec3::from(spec.tubes[k].axis).normalize();
            }
        }
    }
    Ok(Phantom {
        dwi: RawDwi::new(spec.shape, [1.0; 3], qvecs, data)?,
        labels,
        principal,
    })
}

/// A fixed phantom, a moving phantom with `moving ∘ Φ = fixed`, and the
/// ground-truth `Φ = exp(v)`. The moving image samples the model at
/// `exp(−v)` of each grid point, so no interpolation enters the data.
pub struct PhantomPair {
    pub fixed: Phantom,
    pub moving: Phantom,
    pub velocity: Velocity6Field,
    pub truth: DeformationField,
}

pub fn phantom_pair(spec: &PhantomSpec, warp: &SmoothWarpSpec, seed: u64) -> Result<PhantomPair> {
    let n = spec.shape[0];
    if spec.shape.iter().any(|&k| k != n) {
        return Err(Error::InvalidInput("smooth warps need a cubic grid".into()));
    }
    let (velocity, truth) = smooth_warp(n, warp, seed)?;
    let mut neg = velocity.clone();
    neg.data.mapv_inplace(|x| -x);
    let inverse = scaling_squaring(&neg, warp.squaring_steps, SIGMA_ANGULAR);
    let dirs = sphere_directions();
    let fixed = generate(spec, seed.wrapping_mul(2).wrapping_add(1))?;
    let moving = generate_with(spec, seed.wrapping_mul(2).wrapping_add(2), |x, g| {
        let vox = ((x[0] as usize) * n + x[1] as usize) * n + x[2] as usize;
        let j = find_direction(&dirs, g, 1e-12).expect("grid direction");
        (inverse.position(vox, j), inverse.orientation(vox, j))
    })?;
    Ok(PhantomPair {
        fixed,
        moving,
        velocity,
        truth,
    })
}

/// `Φ_γ(p, g) = γ(p, g)` sampled on the grid.
pub fn global_warp(act: &OctahedralAction, shape: [usize; 3], dirs: &[Vec3]) -> DeformationField {
    DeformationField::from_fn(shape, dirs, |p, g| (act.map_point(p), act.rotation() * g))
}

/// Index into [`rotations`] of the quarter turn about z.
pub fn quarter_turn_z() -> usize {
    let rz = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    rotations().iter().position(|r| *r == rz).expect("Rz(90°) is octahedral")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothWarpSpec {
    /// Largest ‖v_p‖ in voxels.
    pub max_velocity: f64,
    pub n_modes: usize,
    /// Indices into the octahedral rotations; must form a subgroup.
    pub subgroup: Vec<usize>,
    pub squaring_steps: usize,
}

impl Default for SmoothWarpSpec {
    fn default() -> Self {
        Self {
            max_velocity: 2.0,
            n_modes: 4,
            subgroup: crate::geometry::octahedral::cyclic_subgroup(quarter_turn_z()),
            squaring_steps: 4,
        }
    }
}

/// Band-limited random field, windowed to vanish on the grid boundary.
/// `v_p` depends on p only; `v_s = ½ curl(v_p) × g` rotates orientations
/// with the local spin of the flow. The field is averaged over the chosen
/// octahedral subgroup (about the grid center) and rescaled.
pub fn smooth_velocity(n: usize, spec: &SmoothWarpSpec, seed: u64) -> Result<Velocity6Field> {
    let dirs = sphere_directions();
    let shape = [n, n, n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = (n.max(2) - 1) as f64;
    let pi = std::f64::consts::PI;
    let modes: Vec<(Vec3, f64, Vec3)> = (0..spec.n_modes)
        .map(|_| {
            let k = Vec3::from_fn(|_, _| rng.gen_range(-1.5..1.5) * pi);
            let phase = rng.gen_range(0.0..2.0 * pi);
            let amp = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            (k, phase, amp)
        })
        .collect();
    let mut v = Velocity6Field::zeros(shape, &dirs);
    for vox in 0..v.n_voxels() {
        let u = voxel_point(shape, vox) / l;
        // window w = Π sin²(π u_k) and its gradient
        let s: Vec<f64> = (0..3).map(|k| (pi * u[k]).sin()).collect();
        let c: Vec<f64> = (0..3).map(|k| (pi * u[k]).cos()).collect();
        let w = s[0] * s[0] * s[1] * s[1] * s[2] * s[2];
        let mut dw = Vec3::zeros();
        for k in 0..3 {
            let mut t = 2.0 * pi * s[k] * c[k];
            for o in 0..3 {
                if o != k {
                    t *= s[o] * s[o];
                }
            }
            dw[k] = t;
        }
        let mut f = Vec3::zeros();
        let mut jac = Mat3::zeros(); // jac[(j, i)] = ∂_i f_j
        for (k, ph, a) in &modes {
            let arg = k.dot(&u) + ph;
            f += a * arg.sin();
            jac += a * k.transpose() * arg.cos();
        }
        let vp = f * w;
        let dv = (jac * w + f * dw.transpose()) / l;
        let curl = Vec3::new(dv[(2, 1)] - dv[(1, 2)], dv[(0, 2)] - dv[(2, 0)], dv[(1, 0)] - dv[(0, 1)]);
        for (j, g) in dirs.iter().enumerate() {
            v.set(vox, j, &Tangent6::new(vp, (curl * 0.5).cross(g)));
        }
    }
    let frames = GaugeFrames::new(&dirs);
    let rots = rotations();
    let mut avg = Array2::zeros(v.data.raw_dim());
    for &i in &spec.subgroup {
        let act = OctahedralAction::new(rots[i], n, [0; 3], &frames)?;
        avg += &act.act_tangent(&v.data, shape)?;
    }
    avg /= spec.subgroup.len() as f64;
    let mut vmax = 0.0f64;
    for vox in 0..avg.nrows() {
        for j in 0..dirs.len() {
            vmax = vmax.max(Vec3::new(avg[[vox, 6 * j]], avg[[vox, 6 * j + 1]], avg[[vox, 6 * j + 2]]).norm());
        }
    }
    if vmax > 0.0 {
        avg *= spec.max_velocity / vmax;
    }
    v.data = avg;
    Ok(v)
}

/// Smooth ground-truth map: scaling-and-squaring of [`smooth_velocity`].
pub fn smooth_warp(n: usize, spec: &SmoothWarpSpec, seed: u64) -> Result<(Velocity6Field, DeformationField)> {
    let v = smooth_velocity(n, spec, seed)?;
    let phi = scaling_squaring(&v, spec.squaring_steps, SIGMA_ANGULAR);
    Ok((v, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::warp;
    use crate::pipeline::normalize_b0;

    fn small() -> PhantomSpec {
        let mut s = PhantomSpec::crossing([8, 8, 8]);
        s.noise_std = 0.0;
        s
    }

    #[test]
    fn isotropic_phantom_is_flat() {
        let mut s = small();
        s.tubes.clear();
        let p = generate(&s, 1).unwrap();
        for row in p.dwi.data.rows() {
            assert!(row.iter().skip(2).all(|&x| x == row[1]));
        }
        assert!(p.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn single_tensor_closed_form() {
        let mut s = small();
        s.tubes.truncate(1);
        s.edge = 0.05;
        let p = generate(&s, 1).unwrap();
        // tube 0 runs along x through (·, 3.5 − 4/6, 3.5)
        let vox = (3 * 8 + 3) * 8 + 3;
        assert!(p.labels[vox] & 1 == 1);
        let f = s.fractions(&Vec3::new(3.0, 3.0, 3.0))[0];
        let dirs = sphere_directions();
        let ex = dirs.iter().position(|g| *g == Vec3::x()).unwrap();
        let ey = dirs.iter().position(|g| *g == Vec3::y()).unwrap();
        let e = &p.dwi.data;
        assert!(e[[vox, ex + 1]] < e[[vox, ey + 1]]);
        let expect = f * (-s.b * s.lambda_par).exp() + (1.0 - f) * (-s.b * s.d_iso).exp();
        assert!((e[[vox, ex + 1]] - expect).abs() < 1e-14);
    }

    #[test]
    fn noise_is_seeded_per_voxel() {
        let mut s = small();
        s.noise_std = 0.02;
        let a = generate(&s, 7).unwrap();
        let b = generate(&s, 7).unwrap();
        let c = generate(&s, 8).unwrap();
        assert_eq!(a.dwi, b.dwi);
        assert_ne!(a.dwi, c.dwi);
        let clean = generate(&small(), 7).unwrap();
        let dev = (&a.dwi.data - &clean.dwi.data).iter().map(|x| x * x).sum::<f64>() / a.dwi.data.len() as f64;
        assert!(dev.sqrt() > 0.01 && dev.sqrt() < 0.04);
    }

    #[test]
    fn rotated_spec_matches_global_warp() {
        let s = small();
        let dirs = sphere_directions();
        let frames = GaugeFrames::new(&dirs);
        let e = normalize_b0(&generate(&s, 0).unwrap().dwi).unwrap().remove(0);
        let rots = rotations();
        for i in [quarter_turn_z(), 7, 19] {
            let act = OctahedralAction::new(rots[i], 8, [0; 3], &frames).unwrap();
            let inv = OctahedralAction::new(rots[i].transpose(), 8, [0; 3], &frames).unwrap();
            let warped = warp(&e.data, &global_warp(&act, s.shape, &dirs), SIGMA_ANGULAR).unwrap();
            let e2 = normalize_b0(&generate(&s.transformed(&inv), 0).unwrap().dwi).unwrap().remove(0);
            let resampled = warp(&e2.data, &DeformationField::identity(s.shape, &dirs), SIGMA_ANGULAR).unwrap();
            let err = (&warped - &resampled).iter().fold(0.0f64, |a, x| a.max(x.abs()));
            assert!(err < 1e-12, "{err}");
        }
        let id = OctahedralAction::new(rots[0], 8, [0; 3], &frames).unwrap();
        assert_eq!(global_warp(&id, s.shape, &dirs), DeformationField::identity(s.shape, &dirs));
    }

    #[test]
    fn smooth_velocity_is_symmetric_and_bounded() {
        let spec = SmoothWarpSpec::default();
        let v = smooth_velocity(8, &spec, 3).unwrap();
        let frames = GaugeFrames::new(&v.dirs);
        let rots = rotations();
        for &i in &spec.subgroup {
            let act = OctahedralAction::new(rots[i], 8, [0; 3], &frames).unwrap();
            let moved = act.act_tangent(&v.data, v.shape).unwrap();
            let err = (&moved - &v.data).iter().fold(0.0f64, |a, x| a.max(x.abs()));
            assert!(err < 1e-12, "{err}");
        }
        assert!(v.tangency_residual() < 1e-12);
        let mut vmax = 0.0f64;
        for vox in 0..v.n_voxels() {
            vmax = vmax.max(v.get(vox, 0).vp.norm());
        }
        assert!((vmax - 2.0).abs() < 1e-12);
        let (_, phi) = smooth_warp(8, &spec, 3).unwrap();
        assert!(phi.max_displacement() > 0.5);
    }

    #[test]
    fn phantom_pair_is_aligned_by_its_ground_truth() {
        let mut spec = PhantomSpec::crossing([10, 10, 10]);
        spec.noise_std = 0.0;
        let pair = phantom_pair(&spec, &SmoothWarpSpec::default(), 4).unwrap();
        let att = |p: &Phantom| normalize_b0(&p.dwi).unwrap().remove(0).data;
        let (f, m) = (att(&pair.fixed), att(&pair.moving));
        let mse = |a: &Array2<f64>| (a - &f).iter().map(|x| x * x).sum::<f64>() / f.len() as f64;
        let aligned = warp(&m, &pair.truth, SIGMA_ANGULAR).unwrap();
        assert!(mse(&aligned) < 0.6 * mse(&m), "{} vs {}", mse(&aligned), mse(&m));
        assert!(pair.truth.max_displacement() > 1.0);
    }
}
