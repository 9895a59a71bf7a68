//! Training, registration, evaluation and the equivariance audit.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{
    scaling_squaring, scaling_squaring_backward, scaling_squaring_taped, warp, warp_backward, DeformationField,
    Velocity6Field,
};
use crate::error::{Error, Result};
use crate::geometry::octahedral::rotations;
use crate::geometry::{antipodal_angle, find_direction, sphere_directions, QVector, Vec3};
use crate::io::EpochMetrics;
use crate::loss::{mmd_loss, mmd_loss_grad, LossConfig, LossReport};
use crate::network::{BnMode, NetParams, UNet, UNetCache, UNetConfig};
use crate::pipeline::{affine_resample, preprocess, Attenuation, Descriptor, RawDwi};
use crate::steerable::{channel_layout, ConvLayer, FeatureField, GaugeFrames, Padding, SampleBank};
use crate::symmetry::OctahedralAction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate halves every this many epochs.
    pub halve_every: usize,
    pub momentum: f64,
    pub lambda: f64,
    /// Spectral width; the median ‖q‖ of the data when absent.
    pub sigma_q: Option<f64>,
    pub sigma_angular: f64,
    pub squaring_steps: usize,
    pub seed: u64,
    pub lmax: usize,
    pub sigma_spatial: f64,
    /// Init scale of the velocity layer; 0 starts at the identity map.
    pub output_gain: f64,
    /// Global gradient norm cap per step; unclipped when absent.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    pub unet: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            halve_every: 100,
            momentum: 0.9,
            lambda: 0.01,
            sigma_q: None,
            sigma_angular: crate::deform::SIGMA_ANGULAR,
            squaring_steps: 4,
            seed: 0,
            lmax: 5,
            sigma_spatial: 1.0,
            output_gain: 1.0,
            max_grad_norm: Some(1.0),
            unet: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || self.halve_every == 0 {
            return Err(Error::InvalidInput("need epochs >= 1, lr > 0, halve_every >= 1".into()));
        }
        if self.max_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidInput("max_grad_norm must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.sigma_angular > 0.0) || !(self.output_gain >= 0.0) {
            return Err(Error::InvalidInput("need momentum in [0, 1), sigma_angular > 0, output_gain >= 0".into()));
        }
        self.unet.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

/// A fixed/moving pair of preprocessed single-shell attenuations with
/// columns in the order of the octahedral direction set.
#[derive(Debug, Clone)]
pub struct Pair {
    pub shape: [usize; 3],
    pub fixed: Array2<f64>,
    pub moving: Array2<f64>,
    pub q_norms: Vec<f64>,
}

/// Reorders shell columns to the octahedral direction order.
pub fn octahedral_columns(e: &Attenuation) -> Result<Array2<f64>> {
    let dirs = sphere_directions();
    if e.dirs.len() != dirs.len() {
        return Err(Error::SamplingMismatch(format!("network needs the 13 octahedral directions, shell has {}", e.dirs.len())));
    }
    let mut out = Array2::zeros((e.data.nrows(), dirs.len()));
    for (c, g) in e.dirs.iter().enumerate() {
        let j = find_direction(&dirs, g, 1e-6)
            .ok_or_else(|| Error::SamplingMismatch(format!("shell direction {g:?} is not octahedral")))?;
        out.column_mut(j).assign(&e.data.column(c));
    }
    Ok(out)
}

impl Pair {
    pub fn from_attenuations(fixed: &Attenuation, moving: &Attenuation) -> Result<Self> {
        if fixed.shape != moving.shape || (fixed.b - moving.b).abs() > 1e-9 * fixed.b.max(1.0) {
            return Err(Error::DescriptorMismatch("fixed and moving shells differ".into()));
        }
        Ok(Self {
            shape: fixed.shape,
            fixed: octahedral_columns(fixed)?,
            moving: octahedral_columns(moving)?,
            q_norms: vec![fixed.b.sqrt(); 13],
        })
    }

    /// Preprocesses raw volumes already on a common grid.
    pub fn from_raw(fixed: &RawDwi, moving: &RawDwi, cfg: &TrainConfig) -> Result<Self> {
        check_descriptor(&fixed.descriptor(), &moving.descriptor())?;
        let f = preprocess(fixed, cfg.lmax, cfg.sigma_spatial)?;
        let m = preprocess(moving, cfg.lmax, cfg.sigma_spatial)?;
        Self::from_attenuations(&f, &m)
    }

    fn input(&self) -> FeatureField {
        let mut data = Array2::zeros((self.fixed.nrows(), 26));
        for j in 0..13 {
            data.column_mut(2 * j).assign(&self.fixed.column(j));
            data.column_mut(2 * j + 1).assign(&self.moving.column(j));
        }
        FeatureField {
            shape: self.shape,
            n_dirs: 13,
            types: channel_layout(2, 0),
            spacing: [1.0; 3],
            data,
        }
    }
}

pub fn check_descriptor(a: &Descriptor, b: &Descriptor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::DescriptorMismatch(format!("grid {:?} vs {:?}", a.shape, b.shape)));
    }
    if a.qvecs.len() != b.qvecs.len() || a.qvecs.iter().zip(&b.qvecs).any(|(x, y)| (x.q - y.q).norm() > 1e-6 * x.q.norm().max(1.0) || (x.b - y.b).abs() > 1e-6 * x.b.max(1.0)) {
        return Err(Error::DescriptorMismatch("q-vectors differ".into()));
    }
    Ok(())
}

/// Forward products of one registration step.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub velocity: Velocity6Field,
    pub deformation: DeformationField,
    pub warped: Array2<f64>,
}

/// UNet → velocity → scaling-and-squaring → warp → loss.
pub struct Model {
    pub net: UNet,
    pub frames: GaugeFrames,
    pub cfg: TrainConfig,
}

impl Model {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dirs = sphere_directions();
        Ok(Self {
            net: UNet::new(cfg.unet.clone(), &dirs)?,
            frames: GaugeFrames::new(&dirs),
            cfg,
        })
    }

    pub fn init_params(&self) -> NetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.net.init_params(&mut rng, self.cfg.output_gain)
    }

    fn forward_cached(&self, params: &NetParams, pair: &Pair, mode: BnMode) -> Result<(Prediction, UNetCache, crate::deform::SquaringTape)> {
        let (out, cache) = self.net.forward(params, &pair.input(), mode)?;
        let velocity = Velocity6Field::from_feature(&self.frames, &out)?;
        let (deformation, tape) = scaling_squaring_taped(&velocity, self.cfg.squaring_steps, self.cfg.sigma_angular);
        let warped = warp(&pair.moving, &deformation, self.cfg.sigma_angular)?;
        Ok((
            Prediction {
                velocity,
                deformation,
                warped,
            },
            cache,
            tape,
        ))
    }

    pub fn predict(&self, params: &NetParams, pair: &Pair, mode: BnMode) -> Result<Prediction> {
        Ok(self.forward_cached(params, pair, mode)?.0)
    }

    pub fn loss(&self, params: &NetParams, pair: &Pair, loss_cfg: &LossConfig, mode: BnMode) -> Result<LossReport> {
        let p = self.predict(params, pair, mode)?;
        mmd_loss(&pair.fixed, &p.warped, &pair.q_norms, &p.velocity.data, loss_cfg)
    }

    /// Loss of a given velocity field and its gradient w.r.t. the field.
    pub fn velocity_loss_and_grad(&self, v: &Velocity6Field, pair: &Pair, loss_cfg: &LossConfig) -> Result<(LossReport, Array2<f64>)> {
        let (phi, tape) = scaling_squaring_taped(v, self.cfg.squaring_steps, self.cfg.sigma_angular);
        let warped = warp(&pair.moving, &phi, self.cfg.sigma_angular)?;
        let lg = mmd_loss_grad(&pair.fixed, &warped, &pair.q_norms, &v.data, loss_cfg)?;
        let d_phi = warp_backward(&pair.moving, &phi, self.cfg.sigma_angular, &lg.d_warped)?;
        Ok((lg.report, scaling_squaring_backward(v, &tape, &d_phi) + &lg.d_velocity))
    }

    /// Loss of a given velocity field.
    pub fn velocity_loss(&self, v: &Velocity6Field, pair: &Pair, loss_cfg: &LossConfig) -> Result<LossReport> {
        let phi = scaling_squaring(v, self.cfg.squaring_steps, self.cfg.sigma_angular);
        let warped = warp(&pair.moving, &phi, self.cfg.sigma_angular)?;
        mmd_loss(&pair.fixed, &warped, &pair.q_norms, &v.data, loss_cfg)
    }

    /// Loss and its gradient w.r.t. all network weights.
    pub fn loss_and_grad(&self, params: &NetParams, pair: &Pair, loss_cfg: &LossConfig, mode: BnMode) -> Result<(LossReport, Vec<f64>, UNetCache)> {
        let (out, cache) = self.net.forward(params, &pair.input(), mode)?;
        let velocity = Velocity6Field::from_feature(&self.frames, &out)?;
        let (report, d_v) = self.velocity_loss_and_grad(&velocity, pair, loss_cfg)?;
        let d_out = Velocity6Field::feature_grad(&self.frames, &d_v);
        let (grad, _) = self.net.backward(params, &cache, &d_out);
        Ok((report, grad, cache))
    }

    pub fn loss_config(&self, qvecs: &[QVector]) -> Result<LossConfig> {
        match self.cfg.sigma_q {
            Some(s) => LossConfig::new(s, self.cfg.lambda),
            None => LossConfig::from_qvecs(&qvecs.iter().filter(|q| q.b > 0.0).copied().collect::<Vec<_>>(), self.cfg.lambda),
        }
    }
}

/// SGD with Nesterov momentum: `u ← μu + g`, `θ ← θ − lr (g + μu)`.
pub struct Nesterov {
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Nesterov {
    pub fn new(n: usize, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, u), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *u = self.momentum * *u + g;
            *p -= lr * (g + self.momentum * *u);
        }
    }
}

/// Rescales `g` onto the ball of radius `cap`.
pub fn clip_norm(g: &mut [f64], cap: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > cap {
        let s = cap / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// Serialized model: configuration, weights and the acquisition it was
/// trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: NetParams,
    pub shape: [usize; 3],
    /// `[b, g_x, g_y, g_z]` per volume.
    pub qvecs: Vec<[f64; 4]>,
    pub sigma_q: f64,
}

impl Checkpoint {
    pub fn descriptor(&self) -> Result<Descriptor> {
        Ok(Descriptor {
            shape: self.shape,
            spacing: [1.0; 3],
            qvecs: self.qvecs.iter().map(|q| QVector::from_b(q[0], &Vec3::new(q[1], q[2], q[3]))).collect::<Result<_>>()?,
        })
    }
}

fn encode_qvecs(q: &[QVector]) -> Vec<[f64; 4]> {
    q.iter()
        .map(|q| {
            let d = if q.b == 0.0 { Vec3::z() } else { q.direction() };
            [q.b, d.x, d.y, d.z]
        })
        .collect()
}

/// Trains on raw pairs `(moving, fixed)` sharing one descriptor. Calls
/// `on_epoch` after every epoch.
pub fn train(pairs: &[(RawDwi, RawDwi)], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let first = pairs.first().ok_or_else(|| Error::InvalidInput("training needs at least one pair".into()))?;
    let desc = first.1.descriptor();
    for (m, f) in pairs {
        check_descriptor(&desc, &f.descriptor())?;
        check_descriptor(&desc, &m.descriptor())?;
    }
    let prepared: Vec<Pair> = pairs.iter().map(|(m, f)| Pair::from_raw(f, m, cfg)).collect::<Result<_>>()?;
    train_prepared(&prepared, &desc, cfg, &mut on_epoch)
}

pub fn train_prepared(pairs: &[Pair], desc: &Descriptor, cfg: &TrainConfig, on_epoch: &mut impl FnMut(&EpochMetrics)) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let model = Model::new(cfg.clone())?;
    for p in pairs {
        model.net.check_grid(p.shape)?;
    }
    let loss_cfg = model.loss_config(&desc.qvecs)?;
    let mut params = model.init_params();
    let mut opt = Nesterov::new(params.weights.len(), cfg.momentum);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, order_rng.gen_range(0..=i));
        }
        let (mut data, mut reg, mut total) = (0.0, 0.0, 0.0);
        for &i in &order {
            let (report, mut grad, cache) = model.loss_and_grad(&params, &pairs[i], &loss_cfg, BnMode::Train)?;
            if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!("pair {i}: data {} reg {}", report.data, report.regularizer),
                });
            }
            model.net.update_running_stats(&mut params, &cache);
            if let Some(cap) = cfg.max_grad_norm {
                clip_norm(&mut grad, cap);
            }
            opt.step(&mut params.weights, &grad, lr);
            data += report.data;
            reg += report.regularizer;
            total += report.total;
        }
        let n = pairs.len() as f64;
        let row = EpochMetrics {
            epoch,
            lr,
            data: data / n,
            reg: reg / n,
            total: total / n,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok((
        Checkpoint {
            config: cfg.clone(),
            params,
            shape: pairs[0].shape,
            qvecs: encode_qvecs(&desc.qvecs),
            sigma_q: loss_cfg.sigma_q,
        },
        log,
    ))
}

/// Output of [`register`]: warped attenuation (as a container with a unit
/// b0 volume) and the deformation.
pub struct Registered {
    pub warped: RawDwi,
    pub deformation: DeformationField,
    pub prediction: Prediction,
}

/// Affine resampling of the moving image onto the fixed descriptor,
/// preprocessing, one forward pass and the warp.
pub fn register(ckpt: &Checkpoint, moving: &RawDwi, fixed: &RawDwi, affine: &nalgebra::Matrix4<f64>) -> Result<Registered> {
    let desc = ckpt.descriptor()?;
    check_descriptor(&desc, &fixed.descriptor())?;
    let aligned = affine_resample(moving, affine, &fixed.descriptor())?;
    let cfg = &ckpt.config;
    let pair = Pair::from_raw(fixed, &aligned, cfg)?;
    let model = Model::new(cfg.clone())?;
    let pred = model.predict(&ckpt.params, &pair, BnMode::Eval)?;
    let f = preprocess(fixed, cfg.lmax, cfg.sigma_spatial)?;
    Ok(Registered {
        warped: attenuation_container(f.shape, f.spacing, f.b, &sphere_directions(), &pred.warped)?,
        deformation: pred.deformation.clone(),
        prediction: pred,
    })
}

/// Wraps shell values (columns ordered as `dirs`) as a container: one b0
/// volume of ones followed by the shell.
pub fn attenuation_container(shape: [usize; 3], spacing: [f64; 3], b: f64, dirs: &[Vec3], values: &Array2<f64>) -> Result<RawDwi> {
    let mut qvecs = vec![QVector::from_b(0.0, &Vec3::z())?];
    for g in dirs {
        qvecs.push(QVector::from_b(b, g)?);
    }
    let mut data = Array2::ones((values.nrows(), dirs.len() + 1));
    data.slice_mut(ndarray::s![.., 1..]).assign(values);
    RawDwi::new(shape, spacing, qvecs, data)
}

/// Per-voxel std of `E` over directions.
pub fn anisotropy(e: &Array2<f64>) -> Vec<f64> {
    e.rows()
        .into_iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.sum() / n;
            (r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Otsu threshold: maximizes the between-class variance over all cuts of
/// the sorted values; the mask is `x > t`.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n < 2 {
        return v.first().copied().unwrap_or(0.0);
    }
    let total: f64 = v.iter().sum();
    let mut left = 0.0;
    let mut best = (f64::NEG_INFINITY, v[0]);
    for i in 0..n - 1 {
        left += v[i];
        if v[i] == v[i + 1] {
            continue;
        }
        let w0 = (i + 1) as f64;
        let w1 = (n - i - 1) as f64;
        let m0 = left / w0;
        let m1 = (total - left) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, 0.5 * (v[i] + v[i + 1]));
        }
    }
    best.1
}

pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn anisotropy_mask(e: &Array2<f64>) -> Vec<bool> {
    let a = anisotropy(e);
    let t = otsu_threshold(&a);
    a.iter().map(|x| *x > t).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub data_term: f64,
    pub mse: f64,
    pub dice: f64,
    /// Mean p-endpoint error over labelled voxels, and over all voxels.
    pub endpoint_error: Option<f64>,
    pub endpoint_error_all: Option<f64>,
    pub orientation_error: Option<f64>,
}

/// Endpoint errors `(labelled mean, overall mean, orientation mean)`.
pub fn deformation_errors(pred: &DeformationField, truth: &DeformationField, labels: &[u8]) -> Result<(f64, f64, f64)> {
    if pred.shape != truth.shape || pred.dirs.len() != truth.dirs.len() || labels.len() != pred.n_voxels() {
        return Err(Error::DescriptorMismatch("deformation grids differ".into()));
    }
    let d = pred.dirs.len();
    let (mut roi, mut n_roi, mut all, mut ang) = (0.0, 0usize, 0.0, 0.0);
    for vox in 0..pred.n_voxels() {
        for j in 0..d {
            let e = (pred.position(vox, j) - truth.position(vox, j)).norm();
            all += e;
            ang += antipodal_angle(&pred.orientation(vox, j), &truth.orientation(vox, j));
            if labels[vox] != 0 {
                roi += e;
                n_roi += 1;
            }
        }
    }
    let n = (pred.n_voxels() * d) as f64;
    Ok((if n_roi > 0 { roi / n_roi as f64 } else { all / n }, all / n, ang / n))
}

/// Compares a warped attenuation against the fixed one. Columns of both
/// must be in octahedral order.
pub fn evaluate(
    warped: &Array2<f64>,
    fixed: &Array2<f64>,
    q_norms: &[f64],
    sigma_q: f64,
    labels: Option<&[u8]>,
    deformations: Option<(&DeformationField, &DeformationField)>,
) -> Result<EvalReport> {
    let labels = labels.ok_or(Error::MissingMask)?;
    if labels.len() != fixed.nrows() {
        return Err(Error::DescriptorMismatch("mask grid differs from image grid".into()));
    }
    let cfg = LossConfig::new(sigma_q, 0.0)?;
    let report = mmd_loss(fixed, warped, q_norms, &Array2::zeros((0, 0)), &cfg)?;
    let mse = (fixed - warped).iter().map(|x| x * x).sum::<f64>() / fixed.len() as f64;
    let dice_v = dice(&anisotropy_mask(warped), &anisotropy_mask(fixed));
    let (ep, ep_all, ang) = match deformations {
        Some((p, t)) => {
            let (a, b, c) = deformation_errors(p, t, labels)?;
            (Some(a), Some(b), Some(c))
        }
        None => (None, None, None),
    };
    Ok(EvalReport {
        data_term: report.data,
        mse,
        dice: dice_v,
        endpoint_error: ep,
        endpoint_error_all: ep_all,
        orientation_error: ang,
    })
}

/// Max relative residual per stage of the octahedral audit.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub threshold: f64,
    pub stages: Vec<(String, f64)>,
    /// Largest residual seen for the identity element (must be exactly 0).
    pub identity_residual: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.stages.iter().all(|(_, r)| *r < self.threshold)
    }
}

pub const AUDIT_THRESHOLD: f64 = 1e-8;

fn rel_residual(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let den = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    num / den.max(1e-300)
}

/// Random data supported on the box `[margin, n − 1 − margin]³`.
fn boxed(n: usize, cols: usize, margin: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((n * n * n, cols), |(v, _)| {
        let idx = [v / (n * n), (v / n) % n, v % n];
        if idx.iter().all(|&k| k >= margin && k + margin < n) {
            rng.gen_range(lo..hi)
        } else {
            0.0
        }
    })
}

/// Map residual: positions and orientations (up to sign), only at voxels
/// hit by the action.
fn map_residual(act: &OctahedralAction, lhs: &Array2<f64>, rhs: &Array2<f64>, n: usize) -> f64 {
    let d = lhs.ncols() / 6;
    let mut worst = 0.0f64;
    let mut scale = 1.0f64;
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let Some(m) = act.map_voxel([x, y, z]) else { continue };
                let v = (m[0] * n + m[1]) * n + m[2];
                for j in 0..d {
                    for k in 0..3 {
                        worst = worst.max((lhs[[v, 6 * j + k]] - rhs[[v, 6 * j + k]]).abs());
                        scale = scale.max(rhs[[v, 6 * j + k]].abs());
                    }
                    let a = Vec3::new(lhs[[v, 6 * j + 3]], lhs[[v, 6 * j + 4]], lhs[[v, 6 * j + 5]]);
                    let b = Vec3::new(rhs[[v, 6 * j + 3]], rhs[[v, 6 * j + 4]], rhs[[v, 6 * j + 5]]);
                    worst = worst.max((a - b).norm().min((a + b).norm()));
                }
            }
        }
    }
    worst / scale
}

/// Audit settings. `net` defaults to a fresh random network.
pub struct AuditConfig {
    pub grid: usize,
    pub shifts: Vec<[i64; 3]>,
    pub seed: u64,
    pub fault: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            shifts: vec![[0, 0, 0], [1, -1, 0]],
            seed: 0,
            fault: false,
        }
    }
}

/// Octahedral orbit tests for a conv layer, the UNet, scaling-and-squaring,
/// warp and loss. Translations of the UNet use periodic padding and shifts
/// that are multiples of its pooling factor; the other stages use data
/// supported away from the boundary.
pub fn check_equivariance(net: Option<(&UNetConfig, &NetParams)>, cfg: &AuditConfig) -> Result<AuditReport> {
    let n = cfg.grid;
    let dirs = sphere_directions();
    let frames = GaugeFrames::new(&dirs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rots = rotations();
    let margin = 1 + cfg.shifts.iter().flat_map(|s| s.iter()).map(|v| v.unsigned_abs() as usize).max().unwrap_or(0);
    if n < 2 * margin + 2 {
        return Err(Error::InvalidInput(format!("audit grid {n} leaves no interior for shifts up to {}", margin - 1)));
    }
    let mut identity_residual = 0.0f64;
    let mut note_identity = |r: usize, s: &[i64; 3], res: f64| {
        if r == 0 && *s == [0, 0, 0] {
            identity_residual = identity_residual.max(res);
        }
    };
    let mut stages = Vec::new();

    // conv layer
    let bank = std::sync::Arc::new(SampleBank::new(&dirs));
    let mut conv = ConvLayer::new(channel_layout(2, 1), channel_layout(1, 2), &Default::default(), bank)?;
    conv.fault_negate_r2 = cfg.fault;
    let w = conv.init_params(&mut rng);
    let f = FeatureField::from_data([n; 3], 13, channel_layout(2, 1), boxed(n, 13 * 7, margin, &mut rng, -1.0, 1.0))?;
    let out = conv.forward(&w, &f)?.0;
    let mut worst = 0.0f64;
    for (ri, r) in rots.iter().enumerate() {
        for s in &cfg.shifts {
            let act = OctahedralAction::new(*r, n, *s, &frames)?;
            let lhs = conv.forward(&w, &act.act_feature(&f)?)?.0;
            let res = rel_residual(&lhs.data, &act.act_feature(&out)?.data);
            note_identity(ri, s, res);
            worst = worst.max(res);
        }
    }
    stages.push(("conv".to_string(), worst));

    // UNet
    let (ucfg, params, mode) = match net {
        Some((c, p)) => (c.clone(), p.clone(), BnMode::Eval),
        None => {
            let mut c = UNetConfig::default();
            c.widths = vec![(4, 2); c.depth];
            let u = UNet::new(c.clone(), &dirs)?;
            let p = u.init_params(&mut rng, 1.0);
            (c, p, BnMode::Train)
        }
    };
    let mut periodic = ucfg.clone();
    periodic.padding = Padding::Periodic;
    let mut unet = UNet::new(periodic, &dirs)?;
    for l in unet.layers_mut() {
        l.fault_negate_r2 = cfg.fault;
    }
    let gf = ucfg.grid_factor() as i64;
    let mut input = FeatureField::zeros([n; 3], 13, channel_layout(2, 0));
    input.data.mapv_inplace(|_| rng.gen_range(0.0..1.0));
    let out = unet.forward(&params, &input, mode)?.0;
    let mut worst = 0.0f64;
    for (ri, r) in rots.iter().enumerate() {
        for s in &cfg.shifts {
            let s = s.map(|v| v * gf);
            let act = OctahedralAction::new(*r, n, s, &frames)?.periodic();
            let lhs = unet.forward(&params, &act.act_feature(&input)?, mode)?.0;
            let res = rel_residual(&lhs.data, &act.act_feature(&out)?.data);
            note_identity(ri, &s, res);
            worst = worst.max(res);
        }
    }
    stages.push(("unet".to_string(), worst));

    // scaling-and-squaring: fields supported inside the box, so the
    // trajectories never meet the boundary
    let mut v = Velocity6Field::zeros([n; 3], &dirs);
    let raw = boxed(n, 78, margin, &mut rng, -0.4, 0.4);
    for vox in 0..v.n_voxels() {
        for (j, g) in dirs.iter().enumerate() {
            let vp = Vec3::new(raw[[vox, 6 * j]], raw[[vox, 6 * j + 1]], raw[[vox, 6 * j + 2]]);
            let r = Vec3::new(raw[[vox, 6 * j + 3]], raw[[vox, 6 * j + 4]], raw[[vox, 6 * j + 5]]);
            v.set(vox, j, &crate::geometry::Tangent6::new(vp, r - g * g.dot(&r)));
        }
    }
    let steps = 4;
    let phi = scaling_squaring(&v, steps, crate::deform::SIGMA_ANGULAR);
    let mut worst = 0.0f64;
    for (ri, r) in rots.iter().enumerate() {
        for s in &cfg.shifts {
            let act = OctahedralAction::new(*r, n, *s, &frames)?;
            let mut rv = v.clone();
            rv.data = act.act_tangent(&v.data, v.shape)?;
            let lhs = scaling_squaring(&rv, steps, crate::deform::SIGMA_ANGULAR);
            let res = map_residual(&act, &lhs.data, &act.act_map(&phi.data, phi.shape)?, n);
            note_identity(ri, s, res);
            worst = worst.max(res);
        }
    }
    stages.push(("scaling_squaring".to_string(), worst));

    // warp: E_w = E ∘ Φ, so (γ▶E) ∘ (γΦγ⁻¹) = γ▶(E ∘ Φ)
    let e = boxed(n, 13, margin, &mut rng, 0.1, 1.0);
    let ew = warp(&e, &phi, crate::deform::SIGMA_ANGULAR)?;
    let mut worst = 0.0f64;
    for (ri, r) in rots.iter().enumerate() {
        for s in &cfg.shifts {
            let act = OctahedralAction::new(*r, n, *s, &frames)?;
            let mut rphi = phi.clone();
            rphi.data = act.act_map(&phi.data, phi.shape)?;
            // voxels with no preimage keep the identity map
            let id = DeformationField::identity([n; 3], &dirs);
            let hit = hit_mask(&act, n);
            for vox in 0..id.n_voxels() {
                if !hit[vox] {
                    rphi.data.row_mut(vox).assign(&id.data.row(vox));
                }
            }
            let lhs = warp(&act.act_shell(&e, [n; 3])?, &rphi, crate::deform::SIGMA_ANGULAR)?;
            let res = rel_residual(&lhs, &act.act_shell(&ew, [n; 3])?);
            note_identity(ri, s, res);
            worst = worst.max(res);
        }
    }
    stages.push(("warp".to_string(), worst));

    // loss
    let lcfg = LossConfig::new(31.6, 0.01)?;
    let qn = vec![1000f64.sqrt(); 13];
    let base = mmd_loss(&e, &ew, &qn, &v.data, &lcfg)?.total;
    let mut worst = 0.0f64;
    for (ri, r) in rots.iter().enumerate() {
        for s in &cfg.shifts {
            let act = OctahedralAction::new(*r, n, *s, &frames)?;
            let l = mmd_loss(&act.act_shell(&e, [n; 3])?, &act.act_shell(&ew, [n; 3])?, &qn, &act.act_tangent(&v.data, v.shape)?, &lcfg)?.total;
            let res = (l - base).abs() / base.abs().max(1e-300);
            note_identity(ri, s, res);
            worst = worst.max(res);
        }
    }
    stages.push(("loss".to_string(), worst));

    Ok(AuditReport {
        threshold: AUDIT_THRESHOLD,
        stages,
        identity_residual,
    })
}

fn hit_mask(act: &OctahedralAction, n: usize) -> Vec<bool> {
    let mut hit = vec![false; n * n * n];
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if let Some(m) = act.map_voxel([x, y, z]) {
                    hit[(m[0] * n + m[1]) * n + m[2]] = true;
                }
            }
        }
    }
    hit
}
