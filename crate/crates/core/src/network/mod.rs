//! Equivariant UNet producing one 5-vector channel (the velocity) from two
//! scalar channels (fixed and moving attenuations).

pub mod ops;

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ops::{sigmoid, swish, BnMode, BnStats, Nonlinearity};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::representations::MlpConfig;
use crate::steerable::{channel_layout, ChannelType, ConvCache, ConvLayer, FeatureField, Padding, SampleBank};
use ops::{
    avg_pool, avg_pool_backward, batch_norm_backward, batch_norm_forward, gate_backward, gate_forward,
    gate_input_types, update_running, upsample, upsample_backward, BnCache,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    /// `(scalars, vectors)` per level.
    pub widths: Vec<(usize, usize)>,
    pub pool_factor: usize,
    pub nonlinearity: Nonlinearity,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub mlp: MlpConfig,
    #[serde(default)]
    pub padding: Padding,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            widths: vec![(8, 4), (16, 8), (32, 16)],
            pool_factor: 2,
            nonlinearity: Nonlinearity::Swish,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            mlp: MlpConfig::default(),
            padding: Padding::Zero,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.widths.len() != self.depth {
            return Err(Error::InvalidInput(format!(
                "depth {} needs {} level widths, got {}",
                self.depth, self.depth, self.widths.len()
            )));
        }
        if self.widths.iter().any(|&(s, v)| s == 0 || v == 0) {
            return Err(Error::InvalidInput("every level needs >= 1 scalar and >= 1 vector channel".into()));
        }
        if self.pool_factor != 2 {
            return Err(Error::InvalidInput("only pooling factor 2 is supported".into()));
        }
        Ok(())
    }

    /// Required divisor of every grid dimension.
    pub fn grid_factor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Trainable coefficients plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub weights: Vec<f64>,
    pub bn: Vec<BnStats>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    /// Encoder convs, then decoder convs (deepest first), then the output conv.
    layers: Vec<ConvLayer>,
    offsets: Vec<usize>,
    n_params: usize,
    bank: Arc<SampleBank>,
}

struct Block {
    conv: ConvCache,
    conv_out: FeatureField,
    bn: BnCache,
    gated_types: Vec<ChannelType>,
}

/// Forward intermediates for [`UNet::backward`].
pub struct UNetCache {
    enc: Vec<Block>,
    dec: Vec<Block>,
    out_conv: ConvCache,
    shapes: Vec<[usize; 3]>,
    /// Channel counts `(upsampled, skip)` of each decoder concat.
    concat_dims: Vec<(usize, usize)>,
}

impl UNetCache {
    pub fn bn_caches(&self) -> impl Iterator<Item = &BnCache> {
        self.enc.iter().chain(self.dec.iter()).map(|b| &b.bn)
    }
}

impl UNet {
    pub fn new(config: UNetConfig, dirs: &[Vec3]) -> Result<Self> {
        config.validate()?;
        let bank = Arc::new(SampleBank::new(dirs));
        let l = config.depth;
        let mut layers = Vec::new();
        let mut in_types = channel_layout(2, 0);
        for &(s, v) in &config.widths {
            layers.push(ConvLayer::new(in_types.clone(), gate_input_types(s, v), &config.mlp, bank.clone())?);
            in_types = channel_layout(s, v);
        }
        let mut h_types = in_types;
        for lev in (0..l - 1).rev() {
            let (s, v) = config.widths[lev];
            let mut cat = h_types.clone();
            cat.extend(channel_layout(s, v));
            layers.push(ConvLayer::new(cat, gate_input_types(s, v), &config.mlp, bank.clone())?);
            h_types = channel_layout(s, v);
        }
        layers.push(ConvLayer::new(h_types, channel_layout(0, 1), &config.mlp, bank.clone())?);
        for layer in &mut layers {
            layer.padding = config.padding;
        }
        let mut offsets = Vec::new();
        let mut n = 0;
        for layer in &layers {
            offsets.push(n);
            n += layer.n_params();
        }
        Ok(Self {
            config,
            layers,
            offsets,
            n_params: n,
            bank,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn bank(&self) -> &SampleBank {
        &self.bank
    }

    pub fn layer_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k] + self.layers[k].n_params()
    }

    fn bn_types(&self) -> Vec<Vec<ChannelType>> {
        let l = self.config.depth;
        let mut v: Vec<_> = self.config.widths.iter().map(|&(s, n)| channel_layout(s, n)).collect();
        for lev in (0..l - 1).rev() {
            let (s, n) = self.config.widths[lev];
            v.push(channel_layout(s, n));
        }
        v
    }

    /// Random weights; the output conv is zeroed when `zero_output` is set.
    /// `output_gain` scales the velocity layer; 0 starts at the identity map.
    pub fn init_params(&self, rng: &mut impl Rng, output_gain: f64) -> NetParams {
        let mut w = Vec::with_capacity(self.n_params);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            w.extend(layer.init_params_with_gain(rng, if k == last { output_gain } else { 1.0 }));
        }
        NetParams {
            weights: w,
            bn: self.bn_types().iter().map(|t| BnStats::new(t)).collect(),
        }
    }

    pub fn check_grid(&self, shape: [usize; 3]) -> Result<()> {
        let f = self.config.grid_factor();
        if shape.iter().any(|n| n % f != 0) {
            return Err(Error::GridNotDivisible { grid: shape, factor: f });
        }
        Ok(())
    }

    fn block_forward(
        &self,
        k: usize,
        bn_index: usize,
        params: &NetParams,
        x: &FeatureField,
        level: usize,
        mode: BnMode,
    ) -> Result<(FeatureField, Block)> {
        let (s, v) = self.config.widths[level];
        let (c, conv) = self.layers[k].forward(&params.weights[self.layer_range(k)], x)?;
        let g = gate_forward(&c, s, v, self.config.nonlinearity)?;
        let gated_types = g.types.clone();
        let (b, bn) = batch_norm_forward(&g, &params.bn[bn_index], mode, self.config.bn_eps);
        Ok((
            b,
            Block {
                conv,
                conv_out: c,
                bn,
                gated_types,
            },
        ))
    }

    pub fn forward(&self, params: &NetParams, input: &FeatureField, mode: BnMode) -> Result<(FeatureField, UNetCache)> {
        if input.types != channel_layout(2, 0) {
            return Err(Error::ChannelMismatch("UNet input must be two scalar channels".into()));
        }
        if params.weights.len() != self.n_params {
            return Err(Error::DimensionMismatch {
                expected: self.n_params,
                got: params.weights.len(),
            });
        }
        self.check_grid(input.shape)?;
        let l = self.config.depth;
        let mut enc = Vec::new();
        let mut skips = Vec::new();
        let mut shapes = Vec::new();
        let mut cur = input.clone();
        for lev in 0..l {
            if lev > 0 {
                cur = avg_pool(&cur)?;
            }
            shapes.push(cur.shape);
            let (out, block) = self.block_forward(lev, lev, params, &cur, lev, mode)?;
            enc.push(block);
            skips.push(out.clone());
            cur = out;
        }
        let mut dec = Vec::new();
        let mut concat_dims = Vec::new();
        for (i, lev) in (0..l - 1).rev().enumerate() {
            let up = upsample(&cur);
            concat_dims.push((up.channels(), skips[lev].channels()));
            let cat = FeatureField::concat(&up, &skips[lev])?;
            let (out, block) = self.block_forward(l + i, l + i, params, &cat, lev, mode)?;
            dec.push(block);
            cur = out;
        }
        let k = self.layers.len() - 1;
        let (out, out_conv) = self.layers[k].forward(&params.weights[self.layer_range(k)], &cur)?;
        Ok((
            out,
            UNetCache {
                enc,
                dec,
                out_conv,
                shapes,
                concat_dims,
            },
        ))
    }

    /// Applies batch statistics of a train-mode forward to running stats.
    pub fn update_running_stats(&self, params: &mut NetParams, cache: &UNetCache) {
        for (stats, bn) in params.bn.iter_mut().zip(cache.bn_caches()) {
            update_running(stats, bn, self.config.bn_momentum);
        }
    }

    fn block_backward(&self, k: usize, level: usize, params: &NetParams, block: &Block, shape: [usize; 3], d: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let (s, v) = self.config.widths[level];
        let d_g = batch_norm_backward(&block.gated_types, self.bank.n_dirs(), &block.bn, self.config.bn_eps, d);
        let d_c = gate_backward(&block.conv_out, s, v, self.config.nonlinearity, &d_g);
        let r = self.layer_range(k);
        self.layers[k].backward(&params.weights[r.clone()], &block.conv, shape, &d_c, &mut grad[r])
    }

    /// Gradient of a scalar loss w.r.t. all weights (`d_out` is the loss
    /// gradient w.r.t. the output field data). Also returns the input gradient.
    pub fn backward(&self, params: &NetParams, cache: &UNetCache, d_out: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grad = vec![0.0; self.n_params];
        let l = self.config.depth;
        let nd = self.bank.n_dirs();
        let k = self.layers.len() - 1;
        let r = self.layer_range(k);
        let mut d = self.layers[k].backward(&params.weights[r.clone()], &cache.out_conv, cache.shapes[0], d_out, &mut grad[r]);
        // skip gradients, one per encoder level
        let mut d_skip: Vec<Option<Array2<f64>>> = vec![None; l];
        for (i, lev) in (0..l - 1).rev().enumerate().rev() {
            let d_cat = self.block_backward(l + i, lev, params, &cache.dec[i], cache.shapes[lev], &d, &mut grad);
            let (cu, cs) = cache.concat_dims[i];
            let (d_up, d_sk) = FeatureField::split_cols(&d_cat, nd, cu, cs);
            d_skip[lev] = Some(d_sk);
            d = upsample_backward(cache.shapes[lev + 1], &d_up);
        }
        for lev in (0..l).rev() {
            if let Some(ds) = d_skip[lev].take() {
                if lev < l - 1 {
                    d += &ds;
                }
            }
            d = self.block_backward(lev, lev, params, &cache.enc[lev], cache.shapes[lev], &d, &mut grad);
            if lev > 0 {
                d = avg_pool_backward(cache.shapes[lev - 1], &d);
            }
        }
        (grad, d)
    }
}
