//! Spatial transformer: `E_w(x, g) = E(Φ(x, g))`.

use ndarray::{Array2, Zip};

use super::interp::{angular_weights, trilinear_stencil};
use super::{add3, DeformationField};
use crate::error::{Error, Result};

fn check(e: &Array2<f64>, phi: &DeformationField) -> Result<()> {
    if e.nrows() != phi.n_voxels() || e.ncols() != phi.dirs.len() {
        return Err(Error::DimensionMismatch {
            expected: phi.n_voxels() * phi.dirs.len(),
            got: e.len(),
        });
    }
    Ok(())
}

/// Resamples shell data `e` (`(X·Y·Z) × D`) at every node's image.
pub fn warp(e: &Array2<f64>, phi: &DeformationField, sigma: f64) -> Result<Array2<f64>> {
    check(e, phi)?;
    let d = phi.dirs.len();
    let mut out = Array2::zeros(e.raw_dim());
    Zip::indexed(out.rows_mut()).par_for_each(|vox, mut row| {
        for j in 0..d {
            let st = trilinear_stencil(phi.shape, &phi.position(vox, j));
            let aw = angular_weights(&phi.dirs, &phi.orientation(vox, j), sigma);
            let mut acc = 0.0;
            for (c, w, _) in &st {
                if let Some(c) = c {
                    if *w == 0.0 {
                        continue;
                    }
                    let mut s = 0.0;
                    for m in 0..d {
                        s += aw.w[m] * e[[*c, m]];
                    }
                    acc += w * s;
                }
            }
            row[j] = acc;
        }
    });
    Ok(out)
}

/// Gradient w.r.t. the map, given the gradient w.r.t. the warped data.
pub fn warp_backward(e: &Array2<f64>, phi: &DeformationField, sigma: f64, d_out: &Array2<f64>) -> Result<Array2<f64>> {
    check(e, phi)?;
    let d = phi.dirs.len();
    let mut d_phi = Array2::zeros(phi.data.raw_dim());
    for vox in 0..phi.n_voxels() {
        for j in 0..d {
            let go = d_out[[vox, j]];
            if go == 0.0 {
                continue;
            }
            let st = trilinear_stencil(phi.shape, &phi.position(vox, j));
            let aw = angular_weights(&phi.dirs, &phi.orientation(vox, j), sigma);
            let mut dy = crate::geometry::Vec3::zeros();
            let mut t = vec![0.0; d];
            for (c, w, dw) in &st {
                if let Some(c) = c {
                    let mut s = 0.0;
                    for m in 0..d {
                        s += aw.w[m] * e[[*c, m]];
                        t[m] += w * e[[*c, m]];
                    }
                    dy += dw * s;
                }
            }
            add3(&mut d_phi, vox, 6 * j, &(dy * go));
            add3(&mut d_phi, vox, 6 * j + 3, &(aw.contract(&t) * go));
        }
    }
    Ok(d_phi)
}
