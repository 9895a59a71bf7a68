//! Position-orientation space Ω = R³ × S² with antipodal identification.
//!
//! Points are `(p, g)` where `p` is a position in voxel units and `g` a unit
//! orientation. Orientations are stored as canonical antipodal
//! representatives (`g_z > 0`, ties broken by `g_y > 0`, then `g_x > 0`), so
//! every antipodal class has exactly one stored vector. SE(3) acts by
//! `(t, r) ▶ (p, q) = (r p + t, r q)`.

pub mod octahedral;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this tangent norm, exp/log use their first-order limits.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Components this close to zero are treated as zero when picking the
/// antipodal representative.
const CANON_EPS: f64 = 1e-12;

/// Canonical antipodal representative of `g` (not normalized).
pub fn canonical(g: &Vec3) -> Vec3 {
    canonical_sign(g) * g
}

/// The sign `s ∈ {±1}` with `canonical(g) = s·g`.
pub fn canonical_sign(g: &Vec3) -> f64 {
    for k in [2usize, 1, 0] {
        if g[k] > CANON_EPS {
            return 1.0;
        }
        if g[k] < -CANON_EPS {
            return -1.0;
        }
    }
    1.0
}

/// Normalize and canonicalize an orientation.
pub fn canonical_unit(g: &Vec3) -> Vec3 {
    canonical(&g.normalize())
}

/// A point of Ω with a canonical unit orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaPoint {
    pub p: Vec3,
    pub g: Vec3,
}

impl OmegaPoint {
    /// Builds a point, normalizing and canonicalizing `g`.
    pub fn new(p: Vec3, g: Vec3) -> Self {
        Self {
            p,
            g: canonical_unit(&g),
        }
    }
}

/// A q-space sample: wavevector `q` with `‖q‖ = √b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QVector {
    pub q: Vec3,
    pub b: f64,
}

impl QVector {
    /// Builds a q-vector from a b-value and a direction. A zero b-value gives
    /// `q = 0` regardless of `dir`.
    pub fn from_b(b: f64, dir: &Vec3) -> Result<Self> {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::InvalidInput(format!("b-value must be >= 0, got {b}")));
        }
        if b == 0.0 {
            return Ok(Self { q: Vec3::zeros(), b });
        }
        let n = dir.norm();
        if n < 1e-12 {
            return Err(Error::InvalidInput("nonzero b-value with zero direction".into()));
        }
        Ok(Self {
            q: dir * (b.sqrt() / n),
            b,
        })
    }

    pub fn magnitude(&self) -> f64 {
        self.q.norm()
    }

    /// Unit direction, or zero for b = 0.
    pub fn direction(&self) -> Vec3 {
        let n = self.q.norm();
        if n == 0.0 {
            Vec3::zeros()
        } else {
            self.q / n
        }
    }
}

/// An element `(t, r)` of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotoTranslation {
    pub t: Vec3,
    pub r: Mat3,
}

impl RotoTranslation {
    pub fn new(t: Vec3, r: Mat3) -> Result<Self> {
        check_rotation(&r, 1e-12)?;
        Ok(Self { t, r })
    }

    pub fn identity() -> Self {
        Self {
            t: Vec3::zeros(),
            r: Mat3::identity(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            t,
            r: Mat3::identity(),
        }
    }

    /// Rotation about `center` (no validation beyond what `r` already has).
    pub fn rotation_about(r: Mat3, center: &Vec3) -> Self {
        Self {
            t: center - r * center,
            r,
        }
    }

    /// `(t_a + r_a t_b, r_a r_b)`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            t: self.t + self.r * other.t,
            r: self.r * other.r,
        }
    }

    /// `(−rᵀ t, rᵀ)`.
    pub fn inverse(&self) -> Self {
        let rt = self.r.transpose();
        Self { t: -(rt * self.t), r: rt }
    }

    /// `(r p + t, r q)`; `q` is not canonicalized.
    pub fn act(&self, p: &Vec3, q: &Vec3) -> (Vec3, Vec3) {
        (self.r * p + self.t, self.r * q)
    }

    /// Action on Ω; the orientation is re-canonicalized.
    pub fn act_omega(&self, x: &OmegaPoint) -> OmegaPoint {
        let (p, g) = self.act(&x.p, &x.g);
        OmegaPoint { p, g: canonical(&g) }
    }
}

pub fn check_rotation(r: &Mat3, tol: f64) -> Result<()> {
    let orth = (r.transpose() * r - Mat3::identity()).abs().max();
    let det = r.determinant();
    if orth > tol || (det - 1.0).abs() > tol {
        return Err(Error::NotARotation {
            orthogonality: orth,
            det,
        });
    }
    Ok(())
}

/// A tangent vector of Ω: `(v_p, v_s)` with `v_s ⟂ g`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tangent6 {
    pub vp: Vec3,
    pub vs: Vec3,
}

impl Tangent6 {
    pub fn new(vp: Vec3, vs: Vec3) -> Self {
        Self { vp, vs }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vp: self.vp * s,
            vs: self.vs * s,
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.vp.norm_squared() + self.vs.norm_squared()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.vp.x, self.vp.y, self.vp.z, self.vs.x, self.vs.y, self.vs.z,
        ]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            vp: Vec3::new(a[0], a[1], a[2]),
            vs: Vec3::new(a[3], a[4], a[5]),
        }
    }
}

/// Great-circle point `cos‖w‖ g + sin‖w‖ w/‖w‖` (not canonicalized).
pub fn sphere_exp(g: &Vec3, w: &Vec3) -> Vec3 {
    let theta = w.norm();
    if theta < SMALL_ANGLE {
        return *g;
    }
    g * theta.cos() + w * (theta.sin() / theta)
}

/// Riemannian exponential on Ω under the product metric.
pub fn exp_omega(x: &OmegaPoint, v: &Tangent6) -> OmegaPoint {
    OmegaPoint {
        p: x.p + v.vp,
        g: canonical_unit(&sphere_exp(&x.g, &v.vs)),
    }
}

/// Logarithm on the antipodally identified sphere.
///
/// Returns the angle `arccos|g·h| ∈ [0, π/2]` and the unit tangent at `g`
/// pointing toward the lift of `h` with non-negative dot product with `g`.
/// When `g ⟂ h` both lifts are equally close; `h` itself is used.
pub fn log_sphere(g: &Vec3, h: &Vec3) -> (f64, Vec3) {
    let sigma = if g.dot(h) < 0.0 { -1.0 } else { 1.0 };
    log_sphere_lift(g, &(h * sigma))
}

/// Logarithm toward a specific lift `h` (assumed `g·h ≥ 0`).
pub fn log_sphere_lift(g: &Vec3, h: &Vec3) -> (f64, Vec3) {
    let c = g.dot(h).clamp(-1.0, 1.0);
    let perp = h - g * c;
    let s = perp.norm();
    let angle = s.atan2(c);
    if angle < SMALL_ANGLE || s < SMALL_ANGLE {
        return (0.0, Vec3::zeros());
    }
    (angle, perp / s)
}

/// Geodesic distance between antipodal classes.
pub fn antipodal_angle(g: &Vec3, h: &Vec3) -> f64 {
    let c = g.dot(h).abs() / (g.norm() * h.norm());
    c.min(1.0).acos()
}

/// Rotation by `angle` about unit `axis`.
pub fn rodrigues(axis: &Vec3, angle: f64) -> Mat3 {
    let k = axis.normalize();
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Minimal rotation taking unit `from` to unit `to` (identity when equal).
/// Undefined for exactly opposite vectors, which never occurs between
/// canonical representatives of distinct lifts used here.
pub fn minimal_rotation(from: &Vec3, to: &Vec3) -> Mat3 {
    let axis = from.cross(to);
    let s = axis.norm();
    let c = from.dot(to).clamp(-1.0, 1.0);
    if s < 1e-15 {
        return Mat3::identity();
    }
    rodrigues(&(axis / s), s.atan2(c))
}

/// Rotation about the z axis.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// The 13 canonical representatives of the octahedral direction classes:
/// 3 axes, 6 face diagonals and 4 body diagonals.
pub fn sphere_directions() -> Vec<Vec3> {
    let raw: [[f64; 3]; 13] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0],
        [-1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [-1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0],
        [-1.0, -1.0, 1.0],
    ];
    raw.iter()
        .map(|v| canonical(&Vec3::new(v[0], v[1], v[2]).normalize()))
        .collect()
}

/// Index of the direction in `dirs` matching the antipodal class of `g`.
pub fn find_direction(dirs: &[Vec3], g: &Vec3, tol: f64) -> Option<usize> {
    let gc = canonical_unit(g);
    dirs.iter().position(|d| (d - gc).abs().max() <= tol)
}

/// Index of the direction closest to `g` in antipodal distance.
pub fn nearest_direction(dirs: &[Vec3], g: &Vec3) -> usize {
    let mut best = 0;
    let mut best_c = f64::NEG_INFINITY;
    for (j, d) in dirs.iter().enumerate() {
        let c = d.dot(g).abs();
        if c > best_c {
            best_c = c;
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n < 1.0 {
                return v / n;
            }
        }
    }

    fn random_rt(rng: &mut impl Rng) -> RotoTranslation {
        let axis = random_unit(rng);
        let r = rodrigues(&axis, rng.gen_range(-PI..PI));
        RotoTranslation::new(
            Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            r,
        )
        .unwrap()
    }

    #[test]
    fn act_examples() {
        let e = RotoTranslation::identity();
        let (p, q) = e.act(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(0.0, 0.6, 0.8));
        assert_eq!(p, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(q, Vec3::new(0.0, 0.6, 0.8));

        let tr = RotoTranslation::translation(Vec3::new(1.0, 0.0, 0.0));
        let (p, q) = tr.act(&Vec3::zeros(), &Vec3::z());
        assert_eq!(p, Vec3::x());
        assert_eq!(q, Vec3::z());

        let rz = RotoTranslation::new(Vec3::zeros(), rot_z(FRAC_PI_2)).unwrap();
        let (p, q) = rz.act(&Vec3::x(), &Vec3::x());
        assert!((p - Vec3::y()).norm() < 1e-15);
        assert!((q - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn rejects_non_rotation() {
        let refl = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RotoTranslation::new(Vec3::zeros(), refl).is_err());
        assert!(RotoTranslation::new(Vec3::zeros(), Mat3::identity() * 2.0).is_err());
    }

    #[test]
    fn compose_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_rt(&mut rng);
        let e = RotoTranslation::identity();
        let ea = e.compose(&a);
        assert!((ea.t - a.t).norm() < 1e-15 && (ea.r - a.r).norm() < 1e-15);
        let inv = RotoTranslation::translation(Vec3::new(1.0, -2.0, 3.0)).inverse();
        assert_eq!(inv.t, Vec3::new(-1.0, 2.0, -3.0));
        let id = a.compose(&a.inverse());
        assert!(id.t.norm() < 1e-12 && (id.r - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn action_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = random_rt(&mut rng);
            let b = random_rt(&mut rng);
            let p = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let q = random_unit(&mut rng);
            let (p1, q1) = b.act(&p, &q);
            let (p2, q2) = a.act(&p1, &q1);
            let (p3, q3) = a.compose(&b).act(&p, &q);
            assert!((p2 - p3).norm() < 1e-10);
            assert!((q2 - q3).norm() < 1e-10);
        }
    }

    #[test]
    fn canonicalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let g = random_unit(&mut rng);
            let c = canonical(&g);
            assert_eq!(canonical(&c), c);
            assert_eq!(canonical(&-g), c);
            assert!(c.z > 0.0);
        }
        assert_eq!(canonical(&Vec3::new(-1.0, 0.0, 0.0)), Vec3::x());
        assert_eq!(canonical(&Vec3::new(1.0, -1.0, 0.0)), Vec3::new(-1.0, 1.0, 0.0));
    }

    #[test]
    fn exp_examples() {
        let x = OmegaPoint::new(Vec3::new(1.0, 2.0, 3.0), Vec3::z());
        assert_eq!(exp_omega(&x, &Tangent6::zero()), x);
        let y = exp_omega(&x, &Tangent6::new(Vec3::zeros(), Vec3::new(FRAC_PI_2, 0.0, 0.0)));
        assert!((y.g - Vec3::x()).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let g = canonical(&random_unit(&mut rng));
            let w = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let vs = w - g * g.dot(&w);
            let y = exp_omega(&OmegaPoint::new(Vec3::zeros(), g), &Tangent6::new(Vec3::zeros(), vs));
            assert!((y.g.norm() - 1.0).abs() < 1e-12);
            assert_eq!(canonical(&y.g), y.g);
        }
    }

    #[test]
    fn log_examples() {
        let g = Vec3::z();
        assert_eq!(log_sphere(&g, &g), (0.0, Vec3::zeros()));
        assert_eq!(log_sphere(&g, &-g), (0.0, Vec3::zeros()));
        let (a, u) = log_sphere(&g, &Vec3::x());
        assert!((a - FRAC_PI_2).abs() < 1e-15);
        assert!((u - Vec3::x()).norm() < 1e-15);
    }

    #[test]
    fn exp_log_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let g = canonical(&random_unit(&mut rng));
            let h = canonical(&random_unit(&mut rng));
            let (angle, u) = log_sphere(&g, &h);
            assert!((0.0..=FRAC_PI_2 + 1e-15).contains(&angle));
            assert!(u.dot(&g).abs() < 1e-12);
            let y = exp_omega(&OmegaPoint::new(Vec3::zeros(), g), &Tangent6::new(Vec3::zeros(), u * angle));
            assert!((y.g - h).norm() < 1e-10, "{} vs {}", y.g, h);
        }
    }

    #[test]
    fn direction_set() {
        let dirs = sphere_directions();
        assert_eq!(dirs.len(), 13);
        assert!(dirs.contains(&Vec3::z()));
        for d in &dirs {
            assert!((d.norm() - 1.0).abs() < 1e-15);
            assert_eq!(canonical(d), *d);
        }
        let rz = rot_z(FRAC_PI_2);
        let rz = rz.map(|x| x.round());
        let mut hit = vec![false; 13];
        for d in &dirs {
            let j = find_direction(&dirs, &(rz * d), 1e-14).expect("closed under Rz(90)");
            hit[j] = true;
        }
        assert!(hit.iter().all(|&h| h));
    }

    proptest::proptest! {
        #[test]
        fn canonical_picks_one_lift(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0) {
            let g = Vec3::new(x, y, z);
            proptest::prop_assume!(g.norm() > 1e-6);
            let c = canonical(&g);
            proptest::prop_assert_eq!(c, canonical(&-g));
            proptest::prop_assert_eq!(canonical(&c), c);
            proptest::prop_assert!((c.norm() - g.norm()).abs() == 0.0);
        }

        #[test]
        fn antipodal_angle_is_a_class_distance(a in proptest::array::uniform3(-1.0f64..1.0), b in proptest::array::uniform3(-1.0f64..1.0)) {
            let (g, h) = (Vec3::from(a), Vec3::from(b));
            proptest::prop_assume!(g.norm() > 1e-3 && h.norm() > 1e-3);
            let d = antipodal_angle(&g, &h);
            proptest::prop_assert!((0.0..=FRAC_PI_2 + 1e-12).contains(&d));
            proptest::prop_assert!((d - antipodal_angle(&h, &-g)).abs() < 1e-12);
        }

        #[test]
        fn exp_stays_on_the_canonical_sphere(a in proptest::array::uniform3(-1.0f64..1.0), w in proptest::array::uniform3(-2.0f64..2.0)) {
            let g = Vec3::from(a);
            proptest::prop_assume!(g.norm() > 1e-3);
            let x = OmegaPoint::new(Vec3::zeros(), g);
            let w = Vec3::from(w);
            let vs = w - x.g * x.g.dot(&w);
            let y = exp_omega(&x, &Tangent6::new(Vec3::zeros(), vs));
            proptest::prop_assert!((y.g.norm() - 1.0).abs() < 1e-12);
            proptest::prop_assert_eq!(canonical(&y.g), y.g);
        }
    }
}
