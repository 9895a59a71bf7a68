//! Steerable convolution on the p-grid × direction samples.
//!
//! `f_out(p, g) = Σ_{Δp, j} K(v(g, Δp, g_j)) ρ_in(T_{g←g_j}) f_in(p + Δp, g_j)`
//! over a 3×3×3 stencil and all sampled directions. For each offset the
//! filters are assembled into one `(D·C_in) × (D·C_out)` matrix and applied
//! with a GEMM over all voxels.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand::Rng;

use super::field::{types_dim, ChannelType, FeatureField};
use super::frames::{GaugeFrames, Mat5};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::representations::{EquivMlp, MlpCache, MlpConfig, Rep};

pub const STENCIL: usize = 27;

pub fn stencil_offset(o: usize) -> [i64; 3] {
    [(o / 9) as i64 - 1, ((o / 3) % 3) as i64 - 1, (o % 3) as i64 - 1]
}

#[derive(Debug, Clone)]
struct Sample {
    offset: usize,
    g: usize,
    j: usize,
    weight: f64,
    sigma: f64,
    transport: Mat5,
}

/// Filter arguments and transporters for every (Δp, g, g_j, lift).
#[derive(Debug, Clone)]
pub struct SampleBank {
    pub frames: GaugeFrames,
    samples: Vec<Sample>,
    args: Array2<f64>,
}

impl SampleBank {
    pub fn new(dirs: &[Vec3]) -> Self {
        let frames = GaugeFrames::new(dirs);
        let d = dirs.len();
        let mut samples = Vec::new();
        let mut args = Vec::new();
        for o in 0..STENCIL {
            let off = stencil_offset(o);
            let dp = Vec3::new(off[0] as f64, off[1] as f64, off[2] as f64);
            for g in 0..d {
                for j in 0..d {
                    for (sigma, weight) in frames.lifts(g, j) {
                        args.extend_from_slice(&frames.filter_arg_lift(g, &dp, j, sigma));
                        samples.push(Sample {
                            offset: o,
                            g,
                            j,
                            weight,
                            sigma,
                            transport: frames.transporter_lift(g, j, sigma),
                        });
                    }
                }
            }
        }
        let m = samples.len();
        Self {
            frames,
            samples,
            args: Array2::from_shape_vec((m, 5), args).expect("5 args per sample"),
        }
    }

    pub fn n_dirs(&self) -> usize {
        self.frames.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn args(&self) -> &Array2<f64> {
        &self.args
    }
}

/// Values needed by [`ConvLayer::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    mlp: MlpCache,
    mlp_out: Array2<f64>,
    big: Vec<Array2<f64>>,
    input: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_types: Vec<ChannelType>,
    pub out_types: Vec<ChannelType>,
    mlp: EquivMlp,
    bank: Arc<SampleBank>,
    entry_index: Vec<usize>,
    /// Start column of the enclosing vector channel, per input column.
    in_block: Vec<Option<usize>>,
    /// Negates the sphere-tangent transport block on antipodal lifts, i.e.
    /// drops the lift sign. Negative control only. (Negating the block on
    /// every sample would commute with all gauge changes and stay
    /// equivariant.)
    pub fault_negate_r2: bool,
    pub padding: Padding,
}

/// Boundary handling of the p-convolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    #[default]
    Zero,
    /// Wraps around; makes integer translations exact symmetries.
    Periodic,
}

/// `out[p] = a[p + δ]`, zero outside the grid.
pub fn shift_rows(a: &Array2<f64>, shape: [usize; 3], delta: [i64; 3]) -> Array2<f64> {
    shift_rows_padded(a, shape, delta, Padding::Zero)
}

pub fn shift_rows_padded(a: &Array2<f64>, shape: [usize; 3], delta: [i64; 3], padding: Padding) -> Array2<f64> {
    if delta == [0, 0, 0] {
        return a.clone();
    }
    let mut out = Array2::zeros(a.raw_dim());
    let [nx, ny, nz] = shape.map(|n| n as i64);
    let wrap = |v: i64, n: i64| match padding {
        Padding::Zero => v,
        Padding::Periodic => v.rem_euclid(n),
    };
    for x in 0..nx {
        let sx = wrap(x + delta[0], nx);
        if sx < 0 || sx >= nx {
            continue;
        }
        for y in 0..ny {
            let sy = wrap(y + delta[1], ny);
            if sy < 0 || sy >= ny {
                continue;
            }
            for z in 0..nz {
                let sz = wrap(z + delta[2], nz);
                if sz < 0 || sz >= nz {
                    continue;
                }
                let dst = ((x * ny + y) * nz + z) as usize;
                let src = ((sx * ny + sy) * nz + sz) as usize;
                out.row_mut(dst).assign(&a.row(src));
            }
        }
    }
    out
}

fn reps(types: &[ChannelType]) -> Vec<Rep> {
    types.iter().map(|t| t.rep()).collect()
}

impl ConvLayer {
    pub fn new(
        in_types: Vec<ChannelType>,
        out_types: Vec<ChannelType>,
        mlp_cfg: &MlpConfig,
        bank: Arc<SampleBank>,
    ) -> Result<Self> {
        if in_types.is_empty() || out_types.is_empty() {
            return Err(Error::ChannelMismatch("conv layer needs at least one channel".into()));
        }
        let mlp = EquivMlp::new(&reps(&in_types), &reps(&out_types), mlp_cfg)?;
        let entry_index = mlp.entry_index();
        let in_off = offsets(&in_types);
        let in_block = in_types
            .iter()
            .zip(&in_off)
            .flat_map(|(ty, &c0)| (0..ty.dim()).map(move |_| (*ty == ChannelType::Vector).then_some(c0)))
            .collect();
        Ok(Self {
            in_block,
            in_types,
            out_types,
            mlp,
            bank,
            entry_index,
            fault_negate_r2: false,
            padding: Padding::Zero,
        })
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    pub fn mlp(&self) -> &EquivMlp {
        &self.mlp
    }

    pub fn bank(&self) -> &SampleBank {
        &self.bank
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.init_params_with_gain(rng, 1.0)
    }

    /// Filter values scale linearly with `gain`; 0 gives a zero layer.
    pub fn init_params_with_gain(&self, rng: &mut impl Rng, gain: f64) -> Vec<f64> {
        let fan = self.in_types.len() as f64;
        let samples = (STENCIL * self.bank.n_dirs()) as f64;
        self.mlp.init(rng, gain / (fan * samples).sqrt())
    }

    fn transport_for(&self, s: &Sample) -> Mat5 {
        let mut t = s.transport;
        if self.fault_negate_r2 && s.sigma < 0.0 {
            for r in 3..5 {
                for c in 3..5 {
                    t[(r, c)] = -t[(r, c)];
                }
            }
        }
        t
    }

    /// Per-offset `(D·C_in) × (D·C_out)` matrices from the filter value
    /// of every sample (`k_of(s, buf)` writes `K` for sample `s` row-major
    /// into `buf`).
    fn assemble_with(&self, k_of: impl Fn(usize, &mut [f64])) -> Vec<Array2<f64>> {
        let d = self.bank.n_dirs();
        let cin = types_dim(&self.in_types);
        let cout = types_dim(&self.out_types);
        let mut big = vec![Array2::zeros((d * cin, d * cout)); STENCIL];
        let mut k = vec![0.0; cout * cin];
        for (si, s) in self.bank.samples.iter().enumerate() {
            k_of(si, &mut k);
            let t = self.transport_for(s);
            self.transport_rows(&mut k, cin, |m, c| t[(m, c)]);
            let b = &mut big[s.offset];
            for ci in 0..cin {
                let mut row = b.row_mut(s.j * cin + ci);
                for co in 0..cout {
                    row[s.g * cout + co] += s.weight * k[co * cin + ci];
                }
            }
        }
        big
    }

    /// Right-multiplies every vector block of each row of `k` by the 5×5
    /// matrix `t`.
    fn transport_rows(&self, k: &mut [f64], cin: usize, t: impl Fn(usize, usize) -> f64) {
        let mut tmp = [0.0; 5];
        for row in k.chunks_mut(cin) {
            let mut c0 = 0;
            while c0 < cin {
                if self.in_block[c0].is_some() {
                    for (c, v) in tmp.iter_mut().enumerate() {
                        *v = (0..5).map(|m| row[c0 + m] * t(m, c)).sum();
                    }
                    row[c0..c0 + 5].copy_from_slice(&tmp);
                    c0 += 5;
                } else {
                    c0 += 1;
                }
            }
        }
    }

    fn unpack(&self, mlp_out: &Array2<f64>, si: usize, buf: &mut [f64]) {
        let row = mlp_out.row(si);
        for (b, &e) in buf.iter_mut().zip(&self.entry_index) {
            *b = row[e];
        }
    }

    /// Filter matrices from an arbitrary kernel function of the 5-vector
    /// argument (bypasses the MLP).
    pub fn assemble_from_kernel(&self, kernel: impl Fn(&[f64]) -> DMatrix<f64>) -> Vec<Array2<f64>> {
        let ks: Vec<DMatrix<f64>> = self.bank.args.rows().into_iter().map(|r| kernel(r.as_slice().expect("contiguous"))).collect();
        let cin = types_dim(&self.in_types);
        self.assemble_with(|si, buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = ks[si][(i / cin, i % cin)];
            }
        })
    }

    /// Filter matrices from the MLP parameters.
    pub fn assemble(&self, params: &[f64]) -> Result<Vec<Array2<f64>>> {
        let (out, _) = self.mlp.forward(params, self.bank.args.view())?;
        Ok(self.assemble_with(|si, buf| self.unpack(&out, si, buf)))
    }

    /// MLP output rows for every sample (`K` in block layout).
    pub fn filter_values(&self, params: &[f64]) -> Result<Array2<f64>> {
        Ok(self.mlp.forward(params, self.bank.args.view())?.0)
    }

    fn check_input(&self, f: &FeatureField) -> Result<()> {
        if f.types != self.in_types {
            return Err(Error::ChannelMismatch(format!(
                "layer expects {:?}, field has {:?}",
                self.in_types, f.types
            )));
        }
        if f.n_dirs != self.bank.n_dirs() {
            return Err(Error::SamplingMismatch(format!(
                "layer has {} directions, field has {}",
                self.bank.n_dirs(),
                f.n_dirs
            )));
        }
        Ok(())
    }

    /// Applies precomputed filter matrices.
    pub fn apply(&self, big: &[Array2<f64>], f_in: &FeatureField) -> Result<FeatureField> {
        self.check_input(f_in)?;
        let mut out = FeatureField::zeros(f_in.shape, f_in.n_dirs, self.out_types.clone());
        out.spacing = f_in.spacing;
        for (o, w) in big.iter().enumerate() {
            let xs = shift_rows_padded(&f_in.data, f_in.shape, stencil_offset(o), self.padding);
            general_mat_mul(1.0, &xs, w, 1.0, &mut out.data);
        }
        Ok(out)
    }

    pub fn forward(&self, params: &[f64], f_in: &FeatureField) -> Result<(FeatureField, ConvCache)> {
        self.check_input(f_in)?;
        let (mlp_out, mlp_cache) = self.mlp.forward(params, self.bank.args.view())?;
        let big = self.assemble_with(|si, buf| self.unpack(&mlp_out, si, buf));
        let out = self.apply(&big, f_in)?;
        Ok((
            out,
            ConvCache {
                mlp: mlp_cache,
                mlp_out,
                big,
                input: f_in.data.clone(),
            },
        ))
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        shape: [usize; 3],
        d_out: &Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let mut d_in = Array2::zeros(cache.input.raw_dim());
        let mut d_big = Vec::with_capacity(STENCIL);
        for (o, w) in cache.big.iter().enumerate() {
            let delta = stencil_offset(o);
            let xs = shift_rows_padded(&cache.input, shape, delta, self.padding);
            d_big.push(xs.t().dot(d_out));
            let g = d_out.dot(&w.t());
            d_in += &shift_rows_padded(&g, shape, delta.map(|v| -v), self.padding);
        }
        let cin = types_dim(&self.in_types);
        let cout = types_dim(&self.out_types);
        let mut d_mlp = Array2::zeros(cache.mlp_out.raw_dim());
        let mut dk = vec![0.0; cout * cin];
        for (si, s) in self.bank.samples.iter().enumerate() {
            let b = &d_big[s.offset];
            for ci in 0..cin {
                let row = b.row(s.j * cin + ci);
                for co in 0..cout {
                    dk[co * cin + ci] = s.weight * row[s.g * cout + co];
                }
            }
            // W = K·T on vector blocks, so dK = dW·Tᵀ
            let t = self.transport_for(s);
            self.transport_rows(&mut dk, cin, |m, c| t[(c, m)]);
            let mut out = d_mlp.row_mut(si);
            for (v, &e) in dk.iter().zip(&self.entry_index) {
                out[e] += v;
            }
        }
        self.mlp.backward(params, &cache.mlp, &d_mlp, grad);
        d_in
    }
}

fn offsets(types: &[ChannelType]) -> Vec<usize> {
    let mut acc = 0;
    types
        .iter()
        .map(|t| {
            let o = acc;
            acc += t.dim();
            o
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sphere_directions;
    use crate::steerable::field::channel_layout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> MlpConfig {
        MlpConfig {
            hidden: vec![crate::representations::HiddenSpec {
                scalars: 4,
                vectors: 2,
                tensors: 0,
            }],
        }
    }

    fn random_field(shape: [usize; 3], types: Vec<ChannelType>, rng: &mut impl Rng) -> FeatureField {
        let mut f = FeatureField::zeros(shape, 13, types);
        f.data.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        f
    }

    #[test]
    fn sample_bank_size() {
        let bank = SampleBank::new(&sphere_directions());
        // 169 direction pairs plus 48 orthogonal pairs with two lifts
        assert_eq!(bank.n_samples(), 27 * (169 + 48));
    }

    #[test]
    fn zero_field_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = Arc::new(SampleBank::new(&sphere_directions()));
        let layer = ConvLayer::new(channel_layout(1, 1), channel_layout(2, 1), &small_cfg(), bank).unwrap();
        let p = layer.init_params(&mut rng);
        let f = FeatureField::zeros([3, 3, 3], 13, channel_layout(1, 1));
        let (out, _) = layer.forward(&p, &f).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert_eq!(out.types, channel_layout(2, 1));
    }

    #[test]
    fn delta_filter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = Arc::new(SampleBank::new(&sphere_directions()));
        let layer = ConvLayer::new(channel_layout(1, 0), channel_layout(1, 0), &small_cfg(), bank).unwrap();
        let big = layer.assemble_from_kernel(|v| {
            let one = if v.iter().all(|&x| x == 0.0) { 1.0 } else { 0.0 };
            DMatrix::from_element(1, 1, one)
        });
        let f = random_field([4, 3, 2], channel_layout(1, 0), &mut rng);
        let out = layer.apply(&big, &f).unwrap();
        assert_eq!(out.data, f.data);
    }

    #[test]
    fn filter_bank_matches_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = Arc::new(SampleBank::new(&sphere_directions()));
        let layer = ConvLayer::new(channel_layout(1, 1), channel_layout(1, 1), &small_cfg(), bank.clone()).unwrap();
        let p = layer.init_params(&mut rng);
        let vals = layer.filter_values(&p).unwrap();
        for si in (0..bank.n_samples()).step_by(97) {
            let k = layer.mlp().kernel(&p, bank.args().row(si).as_slice().unwrap()).unwrap();
            let mut cached = vec![0.0; k.len()];
            layer.unpack(&vals, si, &mut cached);
            let cached = nalgebra::DMatrix::from_row_slice(k.nrows(), k.ncols(), &cached);
            assert!((k - cached).abs().max() < 1e-12);
        }
    }

    #[test]
    fn linear_and_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = Arc::new(SampleBank::new(&sphere_directions()));
        let types = channel_layout(1, 1);
        let layer = ConvLayer::new(types.clone(), channel_layout(1, 1), &small_cfg(), bank).unwrap();
        let p = layer.init_params(&mut rng);
        let a = random_field([5, 5, 5], types.clone(), &mut rng);
        let b = random_field([5, 5, 5], types.clone(), &mut rng);
        let mut ab = a.clone();
        ab.data = &a.data * 2.0 - &b.data * 3.0;
        let fa = layer.forward(&p, &a).unwrap().0;
        let fb = layer.forward(&p, &b).unwrap().0;
        let fab = layer.forward(&p, &ab).unwrap().0;
        let expected = &fa.data * 2.0 - &fb.data * 3.0;
        assert!((&fab.data - &expected).iter().all(|v| v.abs() < 1e-12));

        // perturbing one voxel changes only its 3×3×3 neighbourhood
        let mut c = a.clone();
        let vi = c.voxel_index([0, 0, 0]);
        c.data.row_mut(vi).mapv_inplace(|v| v + 1.0);
        let fc = layer.forward(&p, &c).unwrap().0;
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..5 {
                    let r = fa.voxel_index([x, y, z]);
                    let changed = fa.data.row(r) != fc.data.row(r);
                    if x > 1 || y > 1 || z > 1 {
                        assert!(!changed);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_types() {
        let bank = Arc::new(SampleBank::new(&sphere_directions()));
        let layer = ConvLayer::new(channel_layout(1, 0), channel_layout(1, 0), &small_cfg(), bank).unwrap();
        let p = vec![0.0; layer.n_params()];
        let f = FeatureField::zeros([2, 2, 2], 13, channel_layout(0, 1));
        assert!(layer.forward(&p, &f).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = Arc::new(SampleBank::new(&sphere_directions()));
        let layer = ConvLayer::new(channel_layout(1, 1), channel_layout(1, 1), &small_cfg(), bank).unwrap();
        let p = layer.init_params(&mut rng);
        let f = random_field([2, 2, 2], channel_layout(1, 1), &mut rng);
        let (out, cache) = layer.forward(&p, &f).unwrap();
        let wout = Array2::from_shape_fn(out.data.raw_dim(), |_| rng.gen_range(-1.0..1.0));
        let loss = |p: &[f64], x: &FeatureField| (&layer.forward(p, x).unwrap().0.data * &wout).sum();
        let mut grad = vec![0.0; p.len()];
        let d_in = layer.backward(&p, &cache, f.shape, &wout, &mut grad);
        let h = 1e-6;
        for k in (0..p.len()).step_by(7) {
            let mut pp = p.clone();
            pp[k] += h;
            let mut pm = p.clone();
            pm[k] -= h;
            let fd = (loss(&pp, &f) - loss(&pm, &f)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
        for idx in [(0usize, 0usize), (3, 17), (7, 70)] {
            let mut fp = f.clone();
            fp.data[idx] += h;
            let mut fm = f.clone();
            fm.data[idx] -= h;
            let fd = (loss(&p, &fp) - loss(&p, &fm)) / (2.0 * h);
            assert!((fd - d_in[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
