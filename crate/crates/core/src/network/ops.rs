//! Pointwise and pooling operations on feature fields, with backward passes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steerable::{channel_layout, ChannelType, FeatureField};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// `x·sigmoid(s)` for a vector block.
pub fn gated(x: &[f64], s: f64) -> Vec<f64> {
    let g = sigmoid(s);
    x.iter().map(|v| v * g).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Nonlinearity {
    #[default]
    Swish,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Swish => swish(x),
            Nonlinearity::Tanh => x.tanh(),
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Swish => swish_grad(x),
            Nonlinearity::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

/// Gate layer: input types `[S scalars, V gates, V vectors]`, output
/// `[S scalars, V vectors]`.
pub fn gate_forward(f: &FeatureField, n_s: usize, n_v: usize, nl: Nonlinearity) -> Result<FeatureField> {
    if f.types != gate_input_types(n_s, n_v) {
        return Err(Error::ChannelMismatch("gate layer input layout".into()));
    }
    let cin = f.channels();
    let cout = n_s + 5 * n_v;
    let mut out = FeatureField::zeros(f.shape, f.n_dirs, channel_layout(n_s, n_v));
    out.spacing = f.spacing;
    for r in 0..f.n_voxels() {
        for d in 0..f.n_dirs {
            let a = d * cin;
            let b = d * cout;
            for c in 0..n_s {
                out.data[[r, b + c]] = nl.apply(f.data[[r, a + c]]);
            }
            for k in 0..n_v {
                let g = sigmoid(f.data[[r, a + n_s + k]]);
                for c in 0..5 {
                    out.data[[r, b + n_s + 5 * k + c]] = f.data[[r, a + n_s + n_v + 5 * k + c]] * g;
                }
            }
        }
    }
    Ok(out)
}

pub fn gate_input_types(n_s: usize, n_v: usize) -> Vec<ChannelType> {
    channel_layout(n_s + n_v, n_v)
}

pub fn gate_backward(input: &FeatureField, n_s: usize, n_v: usize, nl: Nonlinearity, d_out: &Array2<f64>) -> Array2<f64> {
    let cin = input.channels();
    let cout = n_s + 5 * n_v;
    let mut dx = Array2::zeros(input.data.raw_dim());
    for r in 0..input.n_voxels() {
        for d in 0..input.n_dirs {
            let a = d * cin;
            let b = d * cout;
            for c in 0..n_s {
                dx[[r, a + c]] = d_out[[r, b + c]] * nl.grad(input.data[[r, a + c]]);
            }
            for k in 0..n_v {
                let gpre = input.data[[r, a + n_s + k]];
                let g = sigmoid(gpre);
                let mut dg = 0.0;
                for c in 0..5 {
                    let dy = d_out[[r, b + n_s + 5 * k + c]];
                    let x = input.data[[r, a + n_s + n_v + 5 * k + c]];
                    dx[[r, a + n_s + n_v + 5 * k + c]] = dy * g;
                    dg += dy * x;
                }
                dx[[r, a + n_s + k]] = dg * g * (1.0 - g);
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Running mean squared block norm per vector channel.
    pub vec_ms: Vec<f64>,
}

impl BnStats {
    pub fn new(types: &[ChannelType]) -> Self {
        let ns = types.iter().filter(|t| **t == ChannelType::Scalar).count();
        let nv = types.len() - ns;
        Self {
            mean: vec![0.0; ns],
            var: vec![1.0; ns],
            vec_ms: vec![1.0; nv],
        }
    }
}

/// Statistics used for one forward (batch stats in train mode).
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: BnMode,
    mean: Vec<f64>,
    var: Vec<f64>,
    vec_ms: Vec<f64>,
    input: Array2<f64>,
}

impl BnCache {
    /// Batch statistics as running-average targets.
    pub fn batch_stats(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.mean, &self.var, &self.vec_ms)
    }
}

/// Scalars: `(x − μ)/√(σ² + ε)` over (p, directions); vectors: divided by
/// `√(mean‖x‖² + ε)` without centering.
pub fn batch_norm_forward(f: &FeatureField, stats: &BnStats, mode: BnMode, eps: f64) -> (FeatureField, BnCache) {
    let c = f.channels();
    let offs = f.offsets();
    let n = (f.n_voxels() * f.n_dirs) as f64;
    let (mut mean, mut var, mut vec_ms) = (Vec::new(), Vec::new(), Vec::new());
    let (mut si, mut vi) = (0, 0);
    for (ch, ty) in f.types.iter().enumerate() {
        let o = offs[ch];
        match ty {
            ChannelType::Scalar => {
                let (m, v) = if mode == BnMode::Train {
                    let mut s = 0.0;
                    for d in 0..f.n_dirs {
                        s += f.data.column(d * c + o).sum();
                    }
                    let m = s / n;
                    let mut s2 = 0.0;
                    for d in 0..f.n_dirs {
                        s2 += f.data.column(d * c + o).iter().map(|x| (x - m).powi(2)).sum::<f64>();
                    }
                    (m, s2 / n)
                } else {
                    (stats.mean[si], stats.var[si])
                };
                mean.push(m);
                var.push(v);
                si += 1;
            }
            ChannelType::Vector => {
                let ms = if mode == BnMode::Train {
                    let mut s = 0.0;
                    for d in 0..f.n_dirs {
                        for k in 0..5 {
                            s += f.data.column(d * c + o + k).iter().map(|x| x * x).sum::<f64>();
                        }
                    }
                    s / n
                } else {
                    stats.vec_ms[vi]
                };
                vec_ms.push(ms);
                vi += 1;
            }
        }
    }
    let mut out = f.clone();
    let (mut si, mut vi) = (0, 0);
    for (ch, ty) in f.types.iter().enumerate() {
        let o = offs[ch];
        match ty {
            ChannelType::Scalar => {
                let inv = 1.0 / (var[si] + eps).sqrt();
                for d in 0..f.n_dirs {
                    out.data.column_mut(d * c + o).mapv_inplace(|x| (x - mean[si]) * inv);
                }
                si += 1;
            }
            ChannelType::Vector => {
                let inv = 1.0 / (vec_ms[vi] + eps).sqrt();
                for d in 0..f.n_dirs {
                    for k in 0..5 {
                        out.data.column_mut(d * c + o + k).mapv_inplace(|x| x * inv);
                    }
                }
                vi += 1;
            }
        }
    }
    let cache = BnCache {
        mode,
        mean,
        var,
        vec_ms,
        input: f.data.clone(),
    };
    (out, cache)
}

pub fn batch_norm_backward(f_types: &[ChannelType], n_dirs: usize, cache: &BnCache, eps: f64, d_out: &Array2<f64>) -> Array2<f64> {
    let c: usize = f_types.iter().map(|t| t.dim()).sum();
    let mut offs = Vec::new();
    let mut acc = 0;
    for t in f_types {
        offs.push(acc);
        acc += t.dim();
    }
    let x = &cache.input;
    let n = (x.nrows() * n_dirs) as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    let (mut si, mut vi) = (0, 0);
    for (ch, ty) in f_types.iter().enumerate() {
        let o = offs[ch];
        match ty {
            ChannelType::Scalar => {
                let inv = 1.0 / (cache.var[si] + eps).sqrt();
                let m = cache.mean[si];
                if cache.mode == BnMode::Eval {
                    for d in 0..n_dirs {
                        let col = d * c + o;
                        dx.column_mut(col).assign(&(&d_out.column(col) * inv));
                    }
                } else {
                    let (mut sdy, mut sdyx) = (0.0, 0.0);
                    for d in 0..n_dirs {
                        let col = d * c + o;
                        for r in 0..x.nrows() {
                            let xh = (x[[r, col]] - m) * inv;
                            sdy += d_out[[r, col]];
                            sdyx += d_out[[r, col]] * xh;
                        }
                    }
                    for d in 0..n_dirs {
                        let col = d * c + o;
                        for r in 0..x.nrows() {
                            let xh = (x[[r, col]] - m) * inv;
                            dx[[r, col]] = inv * (d_out[[r, col]] - sdy / n - xh * sdyx / n);
                        }
                    }
                }
                si += 1;
            }
            ChannelType::Vector => {
                let rr = (cache.vec_ms[vi] + eps).sqrt();
                let mut sdyx = 0.0;
                if cache.mode == BnMode::Train {
                    for d in 0..n_dirs {
                        for k in 0..5 {
                            let col = d * c + o + k;
                            for r in 0..x.nrows() {
                                sdyx += d_out[[r, col]] * x[[r, col]];
                            }
                        }
                    }
                }
                let coef = sdyx / (rr * rr * rr * n);
                for d in 0..n_dirs {
                    for k in 0..5 {
                        let col = d * c + o + k;
                        for r in 0..x.nrows() {
                            dx[[r, col]] = d_out[[r, col]] / rr - coef * x[[r, col]];
                        }
                    }
                }
                vi += 1;
            }
        }
    }
    dx
}

/// Running update with momentum `m`: `running ← (1−m)·running + m·batch`.
pub fn update_running(stats: &mut BnStats, cache: &BnCache, momentum: f64) {
    let (mean, var, ms) = cache.batch_stats();
    for (r, b) in stats.mean.iter_mut().zip(mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, b) in stats.var.iter_mut().zip(var) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, b) in stats.vec_ms.iter_mut().zip(ms) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// 2×2×2 average pooling in p.
pub fn avg_pool(f: &FeatureField) -> Result<FeatureField> {
    if f.shape.iter().any(|n| n % 2 != 0) {
        return Err(Error::GridNotDivisible {
            grid: f.shape,
            factor: 2,
        });
    }
    let [nx, ny, nz] = f.shape;
    let shape = [nx / 2, ny / 2, nz / 2];
    let mut out = FeatureField::zeros(shape, f.n_dirs, f.types.clone());
    out.spacing = f.spacing.map(|s| 2.0 * s);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let src = (x * ny + y) * nz + z;
                let dst = ((x / 2) * shape[1] + y / 2) * shape[2] + z / 2;
                let row = f.data.row(src).to_owned();
                let mut o = out.data.row_mut(dst);
                o.scaled_add(0.125, &row);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(fine_shape: [usize; 3], d_out: &Array2<f64>) -> Array2<f64> {
    let [nx, ny, nz] = fine_shape;
    let cs = [nx / 2, ny / 2, nz / 2];
    let mut dx = Array2::zeros((nx * ny * nz, d_out.ncols()));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let dst = (x * ny + y) * nz + z;
                let src = ((x / 2) * cs[1] + y / 2) * cs[2] + z / 2;
                dx.row_mut(dst).assign(&(&d_out.row(src) * 0.125));
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling in p.
pub fn upsample(f: &FeatureField) -> FeatureField {
    let [cx, cy, cz] = f.shape;
    let shape = [2 * cx, 2 * cy, 2 * cz];
    let mut out = FeatureField::zeros(shape, f.n_dirs, f.types.clone());
    out.spacing = f.spacing.map(|s| s / 2.0);
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let dst = (x * shape[1] + y) * shape[2] + z;
                let src = ((x / 2) * cy + y / 2) * cz + z / 2;
                out.data.row_mut(dst).assign(&f.data.row(src));
            }
        }
    }
    out
}

pub fn upsample_backward(coarse_shape: [usize; 3], d_out: &Array2<f64>) -> Array2<f64> {
    let [cx, cy, cz] = coarse_shape;
    let shape = [2 * cx, 2 * cy, 2 * cz];
    let mut dx = Array2::zeros((cx * cy * cz, d_out.ncols()));
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let src = (x * shape[1] + y) * shape[2] + z;
                let dst = ((x / 2) * cy + y / 2) * cz + z / 2;
                let row = d_out.row(src).to_owned();
                dx.row_mut(dst).scaled_add(1.0, &row);
            }
        }
    }
    dx
}
