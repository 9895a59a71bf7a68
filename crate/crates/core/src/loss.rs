//! Characteristic-function MMD loss and a kernel-sum MMD oracle.
//!
//! The normalized attenuation at fixed p is the characteristic function of
//! the displacement density, so comparing attenuations under a Gaussian
//! spectral measure on q is a kernel MMD between the two densities.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, QVector, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Std of the Gaussian spectral measure, in units of ‖q‖.
    pub sigma_q: f64,
    pub lambda: f64,
}

impl LossConfig {
    pub fn new(sigma_q: f64, lambda: f64) -> Result<Self> {
        if !(sigma_q > 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidInput(format!("need sigma_q > 0 and lambda >= 0, got {sigma_q}, {lambda}")));
        }
        Ok(Self { sigma_q, lambda })
    }

    /// Default width: median ‖q‖ over the acquisition.
    pub fn from_qvecs(qvecs: &[QVector], lambda: f64) -> Result<Self> {
        let mut mags: Vec<f64> = qvecs.iter().map(|q| q.magnitude()).collect();
        if mags.is_empty() {
            return Err(Error::InvalidInput("no q-vectors".into()));
        }
        mags.sort_by(f64::total_cmp);
        let n = mags.len();
        let med = if n % 2 == 1 { mags[n / 2] } else { 0.5 * (mags[n / 2 - 1] + mags[n / 2]) };
        Self::new(med, lambda)
    }

    pub fn normalization(&self) -> f64 {
        (2.0 * PI * self.sigma_q * self.sigma_q).powf(-1.5)
    }

    /// `C·exp(−‖q‖²/2σ²)·‖q‖²` per direction column.
    pub fn weights(&self, q_norms: &[f64]) -> Vec<f64> {
        let c = self.normalization();
        let s2 = self.sigma_q * self.sigma_q;
        q_norms.iter().map(|&q| c * (-q * q / (2.0 * s2)).exp() * q * q).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub data: f64,
    /// `Σ‖v‖²`, before multiplying by λ.
    pub regularizer: f64,
    pub total: f64,
    /// Weighted squared residual per voxel.
    pub residual: Array1<f64>,
}

/// Loss with gradients w.r.t. the warped attenuation and the velocity.
pub struct LossGrad {
    pub report: LossReport,
    pub d_warped: Array2<f64>,
    pub d_velocity: Array2<f64>,
}

fn check(e_f: &Array2<f64>, e_w: &Array2<f64>, q_norms: &[f64]) -> Result<()> {
    if e_f.dim() != e_w.dim() {
        return Err(Error::SamplingMismatch(format!("fixed {:?} vs warped {:?}", e_f.dim(), e_w.dim())));
    }
    if q_norms.len() != e_f.ncols() {
        return Err(Error::SamplingMismatch(format!("{} q-magnitudes for {} directions", q_norms.len(), e_f.ncols())));
    }
    Ok(())
}

/// `E_f`, `E_w` are `(X·Y·Z) × D`; `v` is any array of velocity samples.
pub fn mmd_loss(e_f: &Array2<f64>, e_w: &Array2<f64>, q_norms: &[f64], v: &Array2<f64>, cfg: &LossConfig) -> Result<LossReport> {
    check(e_f, e_w, q_norms)?;
    let w = cfg.weights(q_norms);
    let mut residual = Array1::zeros(e_f.nrows());
    for (r, (a, b)) in residual.iter_mut().zip(e_f.rows().into_iter().zip(e_w.rows())) {
        *r = a.iter().zip(b.iter()).zip(&w).map(|((x, y), wq)| wq * (x - y) * (x - y)).sum();
    }
    let data = residual.sum();
    let regularizer = v.iter().map(|x| x * x).sum::<f64>();
    Ok(LossReport {
        data,
        regularizer,
        total: data + cfg.lambda * regularizer,
        residual,
    })
}

pub fn mmd_loss_grad(e_f: &Array2<f64>, e_w: &Array2<f64>, q_norms: &[f64], v: &Array2<f64>, cfg: &LossConfig) -> Result<LossGrad> {
    let report = mmd_loss(e_f, e_w, q_norms, v, cfg)?;
    let w = cfg.weights(q_norms);
    let mut d_warped = Array2::zeros(e_w.raw_dim());
    Zip::indexed(&mut d_warped).for_each(|(i, j), d| *d = -2.0 * w[j] * (e_f[[i, j]] - e_w[[i, j]]));
    let d_velocity = v.mapv(|x| 2.0 * cfg.lambda * x);
    Ok(LossGrad {
        report,
        d_warped,
        d_velocity,
    })
}

/// Squared MMD between sample sets with `k(r, r′) = exp(−σ²‖r − r′‖²/2)`.
///
/// The unbiased form drops the diagonal of the within-set sums.
pub fn mmd_oracle(p: &[Vec3], q: &[Vec3], sigma: f64, unbiased: bool) -> Result<f64> {
    if p.len() < 2 || q.len() < 2 {
        return Err(Error::TooFewSamples(p.len().min(q.len())));
    }
    let k = |a: &Vec3, b: &Vec3| (-0.5 * sigma * sigma * (a - b).norm_squared()).exp();
    let within = |s: &[Vec3]| {
        let mut acc = 0.0;
        for (i, a) in s.iter().enumerate() {
            for (j, b) in s.iter().enumerate() {
                if !(unbiased && i == j) {
                    acc += k(a, b);
                }
            }
        }
        let n = s.len() as f64;
        acc / if unbiased { n * (n - 1.0) } else { n * n }
    };
    let mut cross = 0.0;
    for a in p {
        for b in q {
            cross += k(a, b);
        }
    }
    cross /= (p.len() * q.len()) as f64;
    Ok(within(p) + within(q) - 2.0 * cross)
}

/// Closed-form squared MMD between `N(μ₁, s²I)` and `N(μ₂, s²I)` in R³ for
/// the kernel of [`mmd_oracle`].
pub fn gaussian_mmd(mu1: &Vec3, mu2: &Vec3, s: f64, sigma: f64) -> f64 {
    let l2 = 1.0 / (sigma * sigma);
    let denom = l2 + 2.0 * s * s;
    let c = (l2 / denom).powf(1.5);
    2.0 * c * (1.0 - (-(mu1 - mu2).norm_squared() / (2.0 * denom)).exp())
}

/// Characteristic function of a zero-mean Gaussian EAP with covariance
/// `cov`, in the `exp(2πi q·r)` convention.
pub fn gaussian_characteristic(cov: &Mat3, q: &Vec3) -> f64 {
    (-2.0 * PI * PI * q.dot(&(cov * q))).exp()
}

/// Max deviation of shell values from the characteristic function of
/// `N(0, cov)`.
pub fn eap_characteristic_check(e: &[f64], qvecs: &[QVector], cov: &Mat3) -> Result<f64> {
    if e.len() != qvecs.len() {
        return Err(Error::SamplingMismatch(format!("{} values for {} q-vectors", e.len(), qvecs.len())));
    }
    Ok(e.iter().zip(qvecs).map(|(x, q)| (x - gaussian_characteristic(cov, &q.q)).abs()).fold(0.0, f64::max))
}

/// EAP covariance of a diffusion tensor `D` (mm²/s) under `‖q‖ = √b`.
pub fn tensor_covariance(d: &Mat3) -> Mat3 {
    d / (2.0 * PI * PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::new(1.0, 0.0).unwrap();
        let e_f = Array2::from_elem((1, 1), 1.0);
        let e_w = Array2::zeros((1, 1));
        let v = Array2::zeros((1, 6));
        let r = mmd_loss(&e_f, &e_w, &[1.0], &v, &cfg).unwrap();
        let expect = (2.0 * PI).powf(-1.5) * (-0.5f64).exp();
        assert!((r.total - expect).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((8, 13), |_| rng.gen_range(0.0..1.0));
        let b = Array2::from_shape_fn((8, 13), |_| rng.gen_range(0.0..1.0));
        let qn = vec![2.0; 13];
        let cfg = LossConfig::new(1.5, 0.01).unwrap();
        let z = Array2::zeros((8, 78));
        assert_eq!(mmd_loss(&a, &a, &qn, &z, &cfg).unwrap().total, 0.0);
        let base = mmd_loss(&a, &b, &qn, &z, &cfg).unwrap().data;
        let scaled = &a + &((&b - &a) * 3.0);
        let s = mmd_loss(&a, &scaled, &qn, &z, &cfg).unwrap().data;
        assert!((s - 9.0 * base).abs() < 1e-12 * s);
        assert!(mmd_loss(&a, &b, &qn[..5], &z, &cfg).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.0..1.0));
        let b = Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.0..1.0));
        let v = Array2::from_shape_fn((4, 30), |_| rng.gen_range(-1.0..1.0));
        let qn = [0.5, 1.0, 1.0, 1.5, 2.0];
        let cfg = LossConfig::new(1.2, 0.3).unwrap();
        let g = mmd_loss_grad(&a, &b, &qn, &v, &cfg).unwrap();
        let h = 1e-3;
        for idx in [(0, 0), (3, 4), (2, 1)] {
            let mut bp = b.clone();
            bp[idx] += h;
            let mut bm = b.clone();
            bm[idx] -= h;
            let fd = (mmd_loss(&a, &bp, &qn, &v, &cfg).unwrap().total - mmd_loss(&a, &bm, &qn, &v, &cfg).unwrap().total) / (2.0 * h);
            assert!((fd - g.d_warped[idx]).abs() < 1e-10 * fd.abs().max(1e-6));
            let mut vp = v.clone();
            vp[idx] += h;
            let mut vm = v.clone();
            vm[idx] -= h;
            let fd = (mmd_loss(&a, &b, &qn, &vp, &cfg).unwrap().total - mmd_loss(&a, &b, &qn, &vm, &cfg).unwrap().total) / (2.0 * h);
            assert!((fd - g.d_velocity[idx]).abs() < 1e-9 * fd.abs().max(1e-6));
        }
    }

    #[test]
    fn oracle_point_masses_and_identity() {
        let r = Vec3::new(0.2, -0.4, 1.0);
        let rp = Vec3::new(-0.3, 0.5, 0.1);
        let sigma = 1.7;
        let expect = 2.0 - 2.0 * (-sigma * sigma * (r - rp).norm_squared() / 2.0).exp();
        for unbiased in [false, true] {
            let m = mmd_oracle(&[r, r], &[rp, rp], sigma, unbiased).unwrap();
            assert!((m - expect).abs() < 1e-12);
        }
        let s = [r, rp, Vec3::new(1.0, 1.0, 1.0)];
        assert_eq!(mmd_oracle(&s, &s, sigma, false).unwrap(), 0.0);
        assert!(matches!(mmd_oracle(&[r], &s, sigma, true), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn oracle_matches_gaussian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let (mu1, mu2, s, sigma) = (Vec3::zeros(), Vec3::new(0.8, 0.0, -0.3), 0.6, 1.1);
        let exact = gaussian_mmd(&mu1, &mu2, s, sigma);
        let n = 400;
        let reps = 8;
        let mut vals = Vec::new();
        for _ in 0..reps {
            let mut draw = |mu: &Vec3| -> Vec<Vec3> { (0..n).map(|_| mu + Vec3::from_fn(|_, _| s * n01.sample(&mut rng))).collect() };
            let p = draw(&mu1);
            let q = draw(&mu2);
            vals.push(mmd_oracle(&p, &q, sigma, true).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn characteristic_function_examples() {
        let d = Mat3::from_diagonal(&Vec3::new(1.7e-3, 0.3e-3, 0.3e-3));
        let cov = tensor_covariance(&d);
        let dirs = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.6, 0.8), Vec3::new(0.0, 0.0, 0.0)];
        let q: Vec<QVector> = dirs.iter().map(|g| QVector::from_b(if g.norm() > 0.0 { 1000.0 } else { 0.0 }, g).unwrap()).collect();
        let e: Vec<f64> = q.iter().map(|qq| (-qq.b * qq.direction().dot(&(d * qq.direction()))).exp()).collect();
        assert_eq!(e[2], 1.0);
        assert!(eap_characteristic_check(&e, &q, &cov).unwrap() < 1e-14);
        assert_eq!(gaussian_characteristic(&cov, &q[1].q), gaussian_characteristic(&cov, &(-q[1].q)));
    }
}
