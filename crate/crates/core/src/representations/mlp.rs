//! SO(5)-equivariant MLP that parameterizes steerable filters.
//!
//! Input is a 5-vector `v` (as `[‖v‖², v]`), output is a matrix `K(v)` with
//! `K(tv) = ρ_out(t) K(v) ρ_in(t)ᵀ`. Every linear map is a combination of
//! [`EquivBasis`] elements. Evaluation is batched; backward is hand written.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{cached_basis, EquivBasis, Rep};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenSpec {
    pub scalars: usize,
    pub vectors: usize,
    /// Order-2 tensor channels.
    #[serde(default)]
    pub tensors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<HiddenSpec>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        let h = HiddenSpec {
            scalars: 8,
            vectors: 4,
            tensors: 0,
        };
        Self { hidden: vec![h, h] }
    }
}

fn offsets(reps: &[Rep]) -> (Vec<usize>, usize) {
    let mut off = Vec::with_capacity(reps.len());
    let mut acc = 0;
    for r in reps {
        off.push(acc);
        acc += r.dim();
    }
    (off, acc)
}

#[derive(Debug, Clone)]
struct Term {
    o: usize,
    i: usize,
    basis: Arc<EquivBasis>,
    offset: usize,
}

#[derive(Debug, Clone)]
struct BiasTerm {
    o: usize,
    basis: Arc<EquivBasis>,
    offset: usize,
}

/// Equivariant linear map between lists of channel representations.
#[derive(Debug, Clone)]
pub struct EquivLinear {
    in_reps: Vec<Rep>,
    out_reps: Vec<Rep>,
    in_off: Vec<usize>,
    out_off: Vec<usize>,
    in_dim: usize,
    out_dim: usize,
    terms: Vec<Term>,
    bias_terms: Vec<BiasTerm>,
    n_params: usize,
}

impl EquivLinear {
    pub fn new(in_reps: Vec<Rep>, out_reps: Vec<Rep>) -> Result<Self> {
        let (in_off, in_dim) = offsets(&in_reps);
        let (out_off, out_dim) = offsets(&out_reps);
        let mut terms = Vec::new();
        let mut bias_terms = Vec::new();
        let mut n = 0;
        for (o, ro) in out_reps.iter().enumerate() {
            for (i, ri) in in_reps.iter().enumerate() {
                let basis = cached_basis(ri, ro)?;
                if basis.dim() > 0 {
                    terms.push(Term {
                        o,
                        i,
                        basis: basis.clone(),
                        offset: n,
                    });
                    n += basis.dim();
                }
            }
            let basis = cached_basis(&Rep::trivial(ro.group()), ro)?;
            if !basis.biases.is_empty() {
                bias_terms.push(BiasTerm {
                    o,
                    basis: basis.clone(),
                    offset: n,
                });
                n += basis.biases.len();
            }
        }
        Ok(Self {
            in_reps,
            out_reps,
            in_off,
            out_off,
            in_dim,
            out_dim,
            terms,
            bias_terms,
            n_params: n,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_reps(&self) -> &[Rep] {
        &self.in_reps
    }

    pub fn out_reps(&self) -> &[Rep] {
        &self.out_reps
    }

    /// Dense weight (`out_dim × in_dim`) and bias from coefficients.
    pub fn assemble(&self, params: &[f64]) -> (Array2<f64>, Array1<f64>) {
        let mut w = Array2::zeros((self.out_dim, self.in_dim));
        for t in &self.terms {
            let (o0, i0) = (self.out_off[t.o], self.in_off[t.i]);
            for (k, bk) in t.basis.weights.iter().enumerate() {
                let c = params[t.offset + k];
                if c == 0.0 {
                    continue;
                }
                for r in 0..bk.nrows() {
                    for col in 0..bk.ncols() {
                        w[[o0 + r, i0 + col]] += c * bk[(r, col)];
                    }
                }
            }
        }
        let mut b = Array1::zeros(self.out_dim);
        for t in &self.bias_terms {
            let o0 = self.out_off[t.o];
            for (k, bk) in t.basis.biases.iter().enumerate() {
                let c = params[t.offset + k];
                for r in 0..bk.len() {
                    b[o0 + r] += c * bk[r];
                }
            }
        }
        (w, b)
    }

    /// Pulls dense weight/bias gradients back to coefficient gradients.
    pub fn accumulate_grad(&self, dw: &Array2<f64>, db: &Array1<f64>, grad: &mut [f64]) {
        for t in &self.terms {
            let (o0, i0) = (self.out_off[t.o], self.in_off[t.i]);
            for (k, bk) in t.basis.weights.iter().enumerate() {
                let mut acc = 0.0;
                for r in 0..bk.nrows() {
                    for col in 0..bk.ncols() {
                        acc += dw[[o0 + r, i0 + col]] * bk[(r, col)];
                    }
                }
                grad[t.offset + k] += acc;
            }
        }
        for t in &self.bias_terms {
            let o0 = self.out_off[t.o];
            for (k, bk) in t.basis.biases.iter().enumerate() {
                let mut acc = 0.0;
                for r in 0..bk.len() {
                    acc += db[o0 + r] * bk[r];
                }
                grad[t.offset + k] += acc;
            }
        }
    }

    /// Random coefficients giving roughly unit-gain maps, times `gain`.
    /// Biases get `bias_std·gain`.
    pub fn init(&self, rng: &mut impl Rng, gain: f64, bias_std: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let mut fan = vec![0usize; self.out_reps.len()];
        for t in &self.terms {
            fan[t.o] += t.basis.dim();
        }
        for t in &self.terms {
            for (k, bk) in t.basis.weights.iter().enumerate() {
                let maxe = bk.abs().max();
                let r = 1.0 / (maxe * maxe);
                let std = gain * (r / fan[t.o] as f64).sqrt();
                p[t.offset + k] = Normal::new(0.0, std).expect("finite std").sample(rng);
            }
        }
        if bias_std > 0.0 {
            let normal = Normal::new(0.0, bias_std * gain).expect("finite std");
            for t in &self.bias_terms {
                for k in 0..t.basis.biases.len() {
                    p[t.offset + k] = normal.sample(rng);
                }
            }
        }
        p
    }

    /// Matrix of each coefficient's contribution; used by tests to check the
    /// span invariant.
    pub fn basis_of_term(&self, o: usize, i: usize) -> Option<&EquivBasis> {
        self.terms.iter().find(|t| t.o == o && t.i == i).map(|t| t.basis.as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediate values kept for [`EquivMlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each linear layer.
    xs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    ys: Vec<Array2<f64>>,
    /// Gated output of each hidden layer (before norm augmentation).
    zs: Vec<Array2<f64>>,
}

/// Filter-producing MLP for a conv layer with the given channel reps.
#[derive(Debug, Clone)]
pub struct EquivMlp {
    specs: Vec<HiddenSpec>,
    layers: Vec<EquivLinear>,
    offsets: Vec<usize>,
    filter_in: Vec<Rep>,
    filter_out: Vec<Rep>,
    /// `(row0, col0, rows, cols, output offset)` of each `K` block.
    blocks: Vec<(usize, usize, usize, usize, usize)>,
    k_rows: usize,
    k_cols: usize,
    n_params: usize,
}

fn nonscalar_reps(spec: &HiddenSpec) -> Vec<Rep> {
    let mut v = vec![Rep::standard(5); spec.vectors];
    v.extend(std::iter::repeat(Rep::power(5, 2)).take(spec.tensors));
    v
}

impl EquivMlp {
    pub fn new(filter_in: &[Rep], filter_out: &[Rep], cfg: &MlpConfig) -> Result<Self> {
        for r in filter_in.iter().chain(filter_out) {
            if r.group() != 5 || r.tensor_order().map_or(true, |k| k > 1) {
                return Err(Error::ChannelMismatch(format!(
                    "filter channels must be SO(5) scalars or 5-vectors, got dim {}",
                    r.dim()
                )));
            }
        }
        let mut in_reps = vec![Rep::trivial(5), Rep::standard(5)];
        let mut layers = Vec::new();
        for spec in &cfg.hidden {
            let ns = spec.vectors + spec.tensors;
            let mut out = vec![Rep::trivial(5); spec.scalars + ns];
            out.extend(nonscalar_reps(spec));
            layers.push(EquivLinear::new(in_reps, out)?);
            in_reps = vec![Rep::trivial(5); spec.scalars + ns];
            in_reps.extend(nonscalar_reps(spec));
        }
        let (row_off, k_rows) = offsets(filter_out);
        let (col_off, k_cols) = offsets(filter_in);
        let mut out_reps = Vec::new();
        let mut blocks = Vec::new();
        let mut acc = 0;
        for (o, ro) in filter_out.iter().enumerate() {
            for (i, ri) in filter_in.iter().enumerate() {
                let rep = ro.tensor_simplified(ri)?;
                blocks.push((row_off[o], col_off[i], ro.dim(), ri.dim(), acc));
                acc += rep.dim();
                out_reps.push(rep);
            }
        }
        layers.push(EquivLinear::new(in_reps, out_reps)?);
        let mut offs = Vec::new();
        let mut n = 0;
        for l in &layers {
            offs.push(n);
            n += l.n_params();
        }
        Ok(Self {
            specs: cfg.hidden.clone(),
            layers,
            offsets: offs,
            filter_in: filter_in.to_vec(),
            filter_out: filter_out.to_vec(),
            blocks,
            k_rows,
            k_cols,
            n_params: n,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn k_shape(&self) -> (usize, usize) {
        (self.k_rows, self.k_cols)
    }

    pub fn out_dim(&self) -> usize {
        self.k_rows * self.k_cols
    }

    pub fn filter_in(&self) -> &[Rep] {
        &self.filter_in
    }

    pub fn filter_out(&self) -> &[Rep] {
        &self.filter_out
    }

    pub fn layers(&self) -> &[EquivLinear] {
        &self.layers
    }

    /// Parameter range of layer `l` inside the flat vector.
    pub fn layer_params<'a>(&self, params: &'a [f64], l: usize) -> &'a [f64] {
        &params[self.offsets[l]..self.offsets[l] + self.layers[l].n_params()]
    }

    /// Final layer scaled by `out_gain` (typically `1/√(fan_in·samples)`).
    pub fn init(&self, rng: &mut impl Rng, out_gain: f64) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if l == last {
                p.extend(layer.init(rng, out_gain, 1.0));
            } else {
                p.extend(layer.init(rng, 1.0, 0.5));
            }
        }
        p
    }

    /// Batched forward: `v` is `M × 5`, output is `M × (k_rows·k_cols)` in
    /// block layout (see [`EquivMlp::unpack`]).
    pub fn forward(&self, params: &[f64], v: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if v.ncols() != 5 {
            return Err(Error::DimensionMismatch {
                expected: 5,
                got: v.ncols(),
            });
        }
        let m = v.nrows();
        let mut x = Array2::zeros((m, 6));
        for r in 0..m {
            let row = v.row(r);
            x[[r, 0]] = row.dot(&row);
            x.slice_mut(s![r, 1..]).assign(&row);
        }
        let mut cache = MlpCache {
            xs: Vec::new(),
            ys: Vec::new(),
            zs: Vec::new(),
        };
        for (l, spec) in self.specs.iter().enumerate() {
            let layer = &self.layers[l];
            let (w, b) = layer.assemble(self.layer_params(params, l));
            let y = x.dot(&w.t()) + &b;
            let (z, xn) = gate_forward(spec, &y);
            cache.xs.push(x);
            cache.ys.push(y);
            cache.zs.push(z);
            x = xn;
        }
        let last = self.layers.len() - 1;
        let (w, b) = self.layers[last].assemble(self.layer_params(params, last));
        let out = x.dot(&w.t()) + &b;
        cache.xs.push(x);
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grad` given `d_out` (`M × out_dim`).
    pub fn backward(&self, params: &[f64], cache: &MlpCache, d_out: &Array2<f64>, grad: &mut [f64]) {
        let last = self.layers.len() - 1;
        let mut dy = d_out.clone();
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let (w, _) = layer.assemble(self.layer_params(params, l));
            let dw = dy.t().dot(&cache.xs[l]);
            let db = dy.sum_axis(Axis(0));
            let off = self.offsets[l];
            layer.accumulate_grad(&dw, &db, &mut grad[off..off + layer.n_params()]);
            if l == 0 {
                break;
            }
            let dx = dy.dot(&w);
            dy = gate_backward(&self.specs[l - 1], &cache.ys[l - 1], &cache.zs[l - 1], &dx);
        }
    }

    /// Single-sample evaluation returning `K(v)` as a `k_rows × k_cols` matrix.
    pub fn kernel(&self, params: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
        if v.len() != 5 {
            return Err(Error::DimensionMismatch {
                expected: 5,
                got: v.len(),
            });
        }
        let input = Array2::from_shape_vec((1, 5), v.to_vec()).expect("shape");
        let (out, _) = self.forward(params, input.view())?;
        Ok(self.unpack(out.row(0).as_slice().expect("contiguous")))
    }

    /// Reshapes one output row into `K`; each block is stored row-major with
    /// rows indexed by the output factor.
    pub fn unpack(&self, row: &[f64]) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.k_rows, self.k_cols);
        for &(r0, c0, nr, nc, off) in &self.blocks {
            for a in 0..nr {
                for b in 0..nc {
                    k[(r0 + a, c0 + b)] = row[off + a * nc + b];
                }
            }
        }
        k
    }

    /// Index into an output row of entry `(row, col)` of `K`.
    pub fn entry_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.k_rows * self.k_cols];
        for &(r0, c0, nr, nc, off) in &self.blocks {
            for a in 0..nr {
                for b in 0..nc {
                    idx[(r0 + a) * self.k_cols + c0 + b] = off + a * nc + b;
                }
            }
        }
        idx
    }
}

/// Splits a hidden pre-activation into scalars, gates and non-scalars,
/// applies swish / sigmoid gating, and appends channel norms² as scalars.
fn gate_forward(spec: &HiddenSpec, y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let m = y.nrows();
    let ns = spec.vectors + spec.tensors;
    let sdim = spec.scalars;
    let z_dim = y.ncols() - ns;
    let mut z = Array2::zeros((m, z_dim));
    let mut xn = Array2::zeros((m, z_dim + ns));
    for r in 0..m {
        for c in 0..sdim {
            let v = y[[r, c]];
            z[[r, c]] = v * sigmoid(v);
        }
        let mut col = sdim;
        let mut ycol = sdim + ns;
        for k in 0..ns {
            let d = if k < spec.vectors { 5 } else { 25 };
            let gate = sigmoid(y[[r, sdim + k]]);
            let mut n2 = 0.0;
            for c in 0..d {
                let val = y[[r, ycol + c]] * gate;
                z[[r, col + c]] = val;
                n2 += val * val;
            }
            xn[[r, sdim + k]] = n2;
            col += d;
            ycol += d;
        }
    }
    xn.slice_mut(s![.., ..sdim]).assign(&z.slice(s![.., ..sdim]));
    xn.slice_mut(s![.., sdim + ns..]).assign(&z.slice(s![.., sdim..]));
    (z, xn)
}

fn gate_backward(spec: &HiddenSpec, y: &Array2<f64>, z: &Array2<f64>, dxn: &Array2<f64>) -> Array2<f64> {
    let m = y.nrows();
    let ns = spec.vectors + spec.tensors;
    let sdim = spec.scalars;
    let mut dy = Array2::zeros(y.raw_dim());
    for r in 0..m {
        for c in 0..sdim {
            let v = y[[r, c]];
            let sg = sigmoid(v);
            dy[[r, c]] = dxn[[r, c]] * (sg + v * sg * (1.0 - sg));
        }
        let mut zcol = sdim;
        for k in 0..ns {
            let d = if k < spec.vectors { 5 } else { 25 };
            let ycol = sdim + ns + (zcol - sdim);
            let xcol = sdim + ns + (zcol - sdim);
            let gpre = y[[r, sdim + k]];
            let gate = sigmoid(gpre);
            let dn = dxn[[r, sdim + k]];
            let mut dgate = 0.0;
            for c in 0..d {
                let dz = dxn[[r, xcol + c]] + 2.0 * z[[r, zcol + c]] * dn;
                dy[[r, ycol + c]] = dz * gate;
                dgate += dz * y[[r, ycol + c]];
            }
            dy[[r, sdim + k]] = dgate * gate * (1.0 - gate);
            zcol += d;
        }
    }
    dy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representations::{generators, matrix_exp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(5, 5);
        for g in generators(5).unwrap() {
            a += g * rng.gen_range(-2.0..2.0);
        }
        matrix_exp(&a)
    }

    fn mixed_mlp() -> EquivMlp {
        let fin = vec![Rep::trivial(5), Rep::standard(5), Rep::standard(5)];
        let fout = vec![Rep::standard(5), Rep::trivial(5)];
        EquivMlp::new(&fin, &fout, &MlpConfig::default()).unwrap()
    }

    fn block_rep(reps: &[Rep], t: &DMatrix<f64>) -> DMatrix<f64> {
        let dim: usize = reps.iter().map(|r| r.dim()).sum();
        let mut m = DMatrix::zeros(dim, dim);
        let mut o = 0;
        for r in reps {
            let d = r.dim();
            m.view_mut((o, o), (d, d)).copy_from(&r.matrix(t).unwrap());
            o += d;
        }
        m
    }

    #[test]
    fn steerability_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = mixed_mlp();
        let params = mlp.init(&mut rng, 1.0);
        for _ in 0..100 {
            let t = random_rotation(&mut rng);
            let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let vv = nalgebra::DVector::from_vec(v.clone());
            let tinv_v = t.transpose() * &vv;
            let lhs = mlp.kernel(&params, tinv_v.as_slice()).unwrap();
            let k = mlp.kernel(&params, &v).unwrap();
            let rhs = block_rep(mlp.filter_out(), &t.transpose()) * &k * block_rep(mlp.filter_in(), &t);
            assert!((lhs - &rhs).norm() / k.norm() < 1e-10);
        }
    }

    #[test]
    fn zero_weights_give_zero_kernel() {
        let mlp = mixed_mlp();
        let params = vec![0.0; mlp.n_params()];
        let k = mlp.kernel(&params, &[0.3, -0.2, 0.1, 0.5, 0.0]).unwrap();
        assert_eq!(k, DMatrix::zeros(6, 11));
        assert!(mlp.kernel(&params, &[0.0; 3]).is_err());
    }

    #[test]
    fn kernel_at_origin_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mlp = mixed_mlp();
        let params = mlp.init(&mut rng, 1.0);
        let k0 = mlp.kernel(&params, &[0.0; 5]).unwrap();
        // Allowed: vector→vector multiples of I and scalar→scalar; all else 0.
        for r in 0..6 {
            for c in 0..11 {
                let allowed = (r < 5 && c >= 1 && (c - 1) % 5 == r) || (r == 5 && c == 0);
                if !allowed {
                    assert!(k0[(r, c)].abs() < 1e-12);
                }
            }
        }
        assert!((k0[(0, 1)] - k0[(4, 5)]).abs() < 1e-12);
    }

    #[test]
    fn linear_in_final_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mlp = mixed_mlp();
        let p1 = mlp.init(&mut rng, 1.0);
        let mut p2 = p1.clone();
        let last = mlp.layers().len() - 1;
        let off = mlp.n_params() - mlp.layers()[last].n_params();
        for x in &mut p2[off..] {
            *x = rng.gen_range(-1.0..1.0);
        }
        let mut mix = p1.clone();
        for k in off..mix.len() {
            mix[k] = 2.0 * p1[k] - 0.5 * p2[k];
        }
        let v = [0.2, 0.1, -0.4, 0.3, 0.9];
        let k1 = mlp.kernel(&p1, &v).unwrap();
        let k2 = mlp.kernel(&p2, &v).unwrap();
        let km = mlp.kernel(&mix, &v).unwrap();
        assert!((km - (k1 * 2.0 - k2 * 0.5)).abs().max() < 1e-12);
    }

    #[test]
    fn gate_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spec = HiddenSpec {
            scalars: 1,
            vectors: 1,
            tensors: 1,
        };
        let y: Vec<f64> = (0..1 + 2 + 5 + 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = random_rotation(&mut rng);
        let mut ry = y.clone();
        let v = t.clone() * nalgebra::DVector::from_column_slice(&y[3..8]);
        ry[3..8].copy_from_slice(v.as_slice());
        let tt = Rep::power(5, 2).matrix(&t).unwrap() * nalgebra::DVector::from_column_slice(&y[8..]);
        ry[8..].copy_from_slice(tt.as_slice());
        let (z, xn) = gate_forward(&spec, &Array2::from_shape_vec((1, 33), y).unwrap());
        let (rz, rxn) = gate_forward(&spec, &Array2::from_shape_vec((1, 33), ry).unwrap());
        let zv = t.clone() * nalgebra::DVector::from_iterator(5, z.slice(s![0, 1..6]).iter().copied());
        for c in 0..5 {
            assert!((rz[[0, 1 + c]] - zv[c]).abs() < 1e-12);
        }
        for c in 0..3 {
            assert!((rxn[[0, c]] - xn[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = MlpConfig {
            hidden: vec![
                HiddenSpec {
                    scalars: 3,
                    vectors: 2,
                    tensors: 1,
                },
                HiddenSpec {
                    scalars: 2,
                    vectors: 1,
                    tensors: 0,
                },
            ],
        };
        let mlp = EquivMlp::new(&[Rep::standard(5), Rep::trivial(5)], &[Rep::standard(5)], &cfg).unwrap();
        let params = mlp.init(&mut rng, 1.0);
        let v = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let wout = Array2::from_shape_fn((4, mlp.out_dim()), |_| rng.gen_range(-1.0..1.0));
        let f = |p: &[f64]| -> f64 {
            let (o, _) = mlp.forward(p, v.view()).unwrap();
            (&o * &wout).sum()
        };
        let (_, cache) = mlp.forward(&params, v.view()).unwrap();
        let mut grad = vec![0.0; mlp.n_params()];
        mlp.backward(&params, &cache, &wout, &mut grad);
        let h = 1e-6;
        for k in 0..params.len() {
            let mut pp = params.clone();
            pp[k] += h;
            let mut pm = params.clone();
            pm[k] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }
}
