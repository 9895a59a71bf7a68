//! Scaling-and-squaring on Ω.
//!
//! `Φ⁰ = exp(2^{−N} v)`, then `Φ^{k+1} = Φ^k ∘ Φ^k`. Off-grid evaluation of
//! `Φ^k` interpolates its displacement: the p-part trilinearly (zero outside
//! the grid) and RBF-weighted over directions; the g-part is the aligned
//! orientation offset `s·G − g_j`, summed with lift signs, added to the
//! query orientation and renormalized.

use ndarray::{Array2, Zip};

use super::interp::{angular_weights, trilinear_stencil};
use super::{add3, read3, voxel_coords, write3, DeformationField, Velocity6Field};
use crate::geometry::{canonical_sign, exp_omega, nearest_direction, OmegaPoint, Vec3};
use crate::geometry::Mat3;

const DEGENERATE_NORM: f64 = 1e-6;

fn lift_sign(a: &Vec3, b: &Vec3) -> f64 {
    if a.dot(b) < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Displacement fields `(D_p, D_g)` as `(X·Y·Z) × (D·3)` arrays.
fn displacements(phi: &Array2<f64>, shape: [usize; 3], dirs: &[Vec3]) -> (Array2<f64>, Array2<f64>) {
    let d = dirs.len();
    let n = phi.nrows();
    let mut dp = Array2::zeros((n, 3 * d));
    let mut dg = Array2::zeros((n, 3 * d));
    for vox in 0..n {
        let x = voxel_coords(shape, vox);
        for (j, gj) in dirs.iter().enumerate() {
            let p = read3(phi, vox, 6 * j);
            let g = read3(phi, vox, 6 * j + 3);
            write3(&mut dp, vox, 3 * j, &(p - x));
            write3(&mut dg, vox, 3 * j, &(g * lift_sign(&g, gj) - gj));
        }
    }
    (dp, dg)
}

/// Per-direction trilinear sums `T_m = Σ_c t_c D[c, m]`.
fn stencil_sums(field: &Array2<f64>, st: &super::Stencil, d: usize) -> Vec<Vec3> {
    let mut out = vec![Vec3::zeros(); d];
    for (vox, w, _) in st {
        if let Some(v) = vox {
            if *w == 0.0 {
                continue;
            }
            for (m, o) in out.iter_mut().enumerate() {
                *o += read3(field, *v, 3 * m) * *w;
            }
        }
    }
    out
}

/// One squaring step `Φ ∘ Φ`.
pub fn compose_step(phi: &Array2<f64>, shape: [usize; 3], dirs: &[Vec3], sigma: f64) -> Array2<f64> {
    let d = dirs.len();
    let (dp, dg) = displacements(phi, shape, dirs);
    let mut out = Array2::zeros(phi.raw_dim());
    Zip::indexed(out.rows_mut()).par_for_each(|vox, mut row| {
        for j in 0..d {
            let y = read3(phi, vox, 6 * j);
            let h = read3(phi, vox, 6 * j + 3);
            let st = trilinear_stencil(shape, &y);
            let aw = angular_weights(dirs, &h, sigma);
            let tp = stencil_sums(&dp, &st, d);
            let tg = stencil_sums(&dg, &st, d);
            let mut disp_p = Vec3::zeros();
            let mut disp_g = Vec3::zeros();
            for m in 0..d {
                disp_p += tp[m] * aw.w[m];
                disp_g += tg[m] * (aw.w[m] * aw.sign[m]);
            }
            let u = h + disp_g;
            let un = u.norm();
            let g_new = if un < DEGENERATE_NORM {
                dirs[nearest_direction(dirs, &h)]
            } else {
                let gh = u / un;
                gh * canonical_sign(&gh)
            };
            let p_new = y + disp_p;
            for k in 0..3 {
                row[6 * j + k] = p_new[k];
                row[6 * j + 3 + k] = g_new[k];
            }
        }
    });
    out
}

fn initial_map(v: &Velocity6Field, n_steps: usize) -> Array2<f64> {
    let scale = 0.5f64.powi(n_steps as i32);
    let d = v.dirs.len();
    let mut phi = Array2::zeros(v.data.raw_dim());
    for vox in 0..v.n_voxels() {
        let x = voxel_coords(v.shape, vox);
        for j in 0..d {
            let t = v.get(vox, j).scaled(scale);
            let o = exp_omega(
                &OmegaPoint {
                    p: x,
                    g: v.dirs[j],
                },
                &t,
            );
            write3(&mut phi, vox, 6 * j, &o.p);
            write3(&mut phi, vox, 6 * j + 3, &o.g);
        }
    }
    phi
}

/// States `Φ⁰ … Φ^{N−1}` kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SquaringTape {
    pub n_steps: usize,
    pub sigma: f64,
    states: Vec<Array2<f64>>,
}

pub fn scaling_squaring(v: &Velocity6Field, n_steps: usize, sigma: f64) -> DeformationField {
    scaling_squaring_taped(v, n_steps, sigma).0
}

pub fn scaling_squaring_taped(v: &Velocity6Field, n_steps: usize, sigma: f64) -> (DeformationField, SquaringTape) {
    let mut phi = initial_map(v, n_steps);
    let mut states = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let next = compose_step(&phi, v.shape, &v.dirs, sigma);
        states.push(phi);
        phi = next;
    }
    (
        DeformationField {
            shape: v.shape,
            dirs: v.dirs.clone(),
            data: phi,
        },
        SquaringTape {
            n_steps,
            sigma,
            states,
        },
    )
}

/// Gradient of one squaring step w.r.t. its input state.
fn compose_step_backward(phi: &Array2<f64>, shape: [usize; 3], dirs: &[Vec3], sigma: f64, d_out: &Array2<f64>) -> Array2<f64> {
    let d = dirs.len();
    let (dp, dg) = displacements(phi, shape, dirs);
    let mut d_in = Array2::zeros(phi.raw_dim());
    let mut d_dp = Array2::zeros(dp.raw_dim());
    let mut d_dg = Array2::zeros(dg.raw_dim());
    for vox in 0..phi.nrows() {
        for j in 0..d {
            let a = read3(d_out, vox, 6 * j);
            let b = read3(d_out, vox, 6 * j + 3);
            let y = read3(phi, vox, 6 * j);
            let h = read3(phi, vox, 6 * j + 3);
            let st = trilinear_stencil(shape, &y);
            let aw = angular_weights(dirs, &h, sigma);
            let tp = stencil_sums(&dp, &st, d);
            let tg = stencil_sums(&dg, &st, d);
            let mut disp_g = Vec3::zeros();
            for m in 0..d {
                disp_g += tg[m] * (aw.w[m] * aw.sign[m]);
            }
            let u = h + disp_g;
            let un = u.norm();
            let bu = if un < DEGENERATE_NORM {
                Vec3::zeros()
            } else {
                let gh = u / un;
                let kappa = canonical_sign(&gh);
                (Mat3::identity() - gh * gh.transpose()) * b * (kappa / un)
            };
            let mut dy = a;
            for (vx, _, dw) in &st {
                if let Some(c) = vx {
                    let mut s = 0.0;
                    for m in 0..d {
                        if aw.w[m] == 0.0 {
                            continue;
                        }
                        s += aw.w[m] * (a.dot(&read3(&dp, *c, 3 * m)) + aw.sign[m] * bu.dot(&read3(&dg, *c, 3 * m)));
                    }
                    dy += dw * s;
                }
            }
            let coeffs: Vec<f64> = (0..d).map(|m| a.dot(&tp[m]) + aw.sign[m] * bu.dot(&tg[m])).collect();
            let dh = bu + aw.contract(&coeffs);
            for (vx, w, _) in &st {
                if let Some(c) = vx {
                    if *w == 0.0 {
                        continue;
                    }
                    for m in 0..d {
                        let f = aw.w[m] * w;
                        if f == 0.0 {
                            continue;
                        }
                        add3(&mut d_dp, *c, 3 * m, &(a * f));
                        add3(&mut d_dg, *c, 3 * m, &(bu * (f * aw.sign[m])));
                    }
                }
            }
            add3(&mut d_in, vox, 6 * j, &dy);
            add3(&mut d_in, vox, 6 * j + 3, &dh);
        }
    }
    for vox in 0..phi.nrows() {
        for (j, gj) in dirs.iter().enumerate() {
            let g = read3(phi, vox, 6 * j + 3);
            add3(&mut d_in, vox, 6 * j, &read3(&d_dp, vox, 3 * j));
            add3(&mut d_in, vox, 6 * j + 3, &(read3(&d_dg, vox, 3 * j) * lift_sign(&g, gj)));
        }
    }
    d_in
}

/// Jacobian of `w ↦ cos‖w‖ g + sin‖w‖ w/‖w‖` (smooth at `w = 0`).
fn sphere_exp_jacobian(g: &Vec3, w: &Vec3) -> Mat3 {
    let t2 = w.norm_squared();
    let t = t2.sqrt();
    let (a, c) = if t < 1e-4 {
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, -1.0 / 3.0 + t2 / 30.0)
    } else {
        let a = t.sin() / t;
        (a, (t.cos() - a) / t2)
    };
    Mat3::identity() * a - g * w.transpose() * a + w * w.transpose() * c
}

/// Gradient w.r.t. the velocity given the gradient w.r.t. the final map.
pub fn scaling_squaring_backward(v: &Velocity6Field, tape: &SquaringTape, d_phi: &Array2<f64>) -> Array2<f64> {
    let mut d = d_phi.clone();
    for state in tape.states.iter().rev() {
        d = compose_step_backward(state, v.shape, &v.dirs, tape.sigma, &d);
    }
    let scale = 0.5f64.powi(tape.n_steps as i32);
    let mut dv = Array2::zeros(v.data.raw_dim());
    for vox in 0..v.n_voxels() {
        for (j, gj) in v.dirs.iter().enumerate() {
            let t = v.get(vox, j);
            let w = t.vs * scale;
            let raw = crate::geometry::sphere_exp(gj, &w);
            let un = raw.norm();
            let gh = raw / un;
            let kappa = canonical_sign(&gh);
            // off-tangent components of w leave the sphere; renormalization
            let proj = (Mat3::identity() - gh * gh.transpose()) * read3(&d, vox, 6 * j + 3) / un;
            let dg = sphere_exp_jacobian(gj, &w).transpose() * proj * (kappa * scale);
            write3(&mut dv, vox, 6 * j, &(read3(&d, vox, 6 * j) * scale));
            write3(&mut dv, vox, 6 * j + 3, &dg);
        }
    }
    dv
}
