use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::representations::Rep;

/// Gauge type of one feature channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelType {
    Scalar,
    /// 5-vector: R³ part in `F_g`, sphere-tangent part in `B_g`.
    Vector,
}

impl ChannelType {
    pub fn dim(self) -> usize {
        match self {
            ChannelType::Scalar => 1,
            ChannelType::Vector => 5,
        }
    }

    pub fn rep(self) -> Rep {
        match self {
            ChannelType::Scalar => Rep::trivial(5),
            ChannelType::Vector => Rep::standard(5),
        }
    }
}

pub fn types_dim(types: &[ChannelType]) -> usize {
    types.iter().map(|t| t.dim()).sum()
}

/// `n_s` scalars followed by `n_v` vectors.
pub fn channel_layout(n_s: usize, n_v: usize) -> Vec<ChannelType> {
    let mut v = vec![ChannelType::Scalar; n_s];
    v.extend(std::iter::repeat(ChannelType::Vector).take(n_v));
    v
}

/// Dense feature tensor `[X, Y, Z, D, C]`, stored as a
/// `(X·Y·Z) × (D·C)` matrix (direction-major within a row).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub shape: [usize; 3],
    pub n_dirs: usize,
    pub types: Vec<ChannelType>,
    pub spacing: [f64; 3],
    pub data: Array2<f64>,
}

impl FeatureField {
    pub fn zeros(shape: [usize; 3], n_dirs: usize, types: Vec<ChannelType>) -> Self {
        let c = types_dim(&types);
        Self {
            shape,
            n_dirs,
            types,
            spacing: [1.0; 3],
            data: Array2::zeros((shape[0] * shape[1] * shape[2], n_dirs * c)),
        }
    }

    pub fn from_data(shape: [usize; 3], n_dirs: usize, types: Vec<ChannelType>, data: Array2<f64>) -> Result<Self> {
        let c = types_dim(&types);
        let rows = shape[0] * shape[1] * shape[2];
        if data.nrows() != rows || data.ncols() != n_dirs * c {
            return Err(Error::DimensionMismatch {
                expected: rows * n_dirs * c,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature field contains non-finite values".into()));
        }
        Ok(Self {
            shape,
            n_dirs,
            types,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn channels(&self) -> usize {
        types_dim(&self.types)
    }

    pub fn n_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn voxel_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.shape[1] + idx[1]) * self.shape[2] + idx[2]
    }

    /// Column of channel component `c` at direction `d`.
    pub fn col(&self, d: usize, c: usize) -> usize {
        d * self.channels() + c
    }

    /// Offsets of each channel block within `C`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.types
            .iter()
            .map(|t| {
                let o = acc;
                acc += t.dim();
                o
            })
            .collect()
    }

    /// Concatenates channel lists of fields on the same grid.
    pub fn concat(a: &FeatureField, b: &FeatureField) -> Result<FeatureField> {
        if a.shape != b.shape || a.n_dirs != b.n_dirs {
            return Err(Error::ChannelMismatch("concat of fields on different grids".into()));
        }
        let (ca, cb) = (a.channels(), b.channels());
        let c = ca + cb;
        let mut data = Array2::zeros((a.n_voxels(), a.n_dirs * c));
        for d in 0..a.n_dirs {
            data.slice_mut(ndarray::s![.., d * c..d * c + ca])
                .assign(&a.data.slice(ndarray::s![.., d * ca..(d + 1) * ca]));
            data.slice_mut(ndarray::s![.., d * c + ca..(d + 1) * c])
                .assign(&b.data.slice(ndarray::s![.., d * cb..(d + 1) * cb]));
        }
        let mut types = a.types.clone();
        types.extend(b.types.iter().copied());
        Ok(FeatureField {
            shape: a.shape,
            n_dirs: a.n_dirs,
            types,
            spacing: a.spacing,
            data,
        })
    }

    /// Inverse of [`FeatureField::concat`] for a gradient: splits columns at `ca`.
    pub fn split_cols(data: &Array2<f64>, n_dirs: usize, ca: usize, cb: usize) -> (Array2<f64>, Array2<f64>) {
        let c = ca + cb;
        let n = data.nrows();
        let mut a = Array2::zeros((n, n_dirs * ca));
        let mut b = Array2::zeros((n, n_dirs * cb));
        for d in 0..n_dirs {
            a.slice_mut(ndarray::s![.., d * ca..(d + 1) * ca])
                .assign(&data.slice(ndarray::s![.., d * c..d * c + ca]));
            b.slice_mut(ndarray::s![.., d * cb..(d + 1) * cb])
                .assign(&data.slice(ndarray::s![.., d * c + ca..(d + 1) * c]));
        }
        (a, b)
    }

    /// Max-abs relative difference `max|a−b| / max(max|b|, tiny)`.
    pub fn rel_diff(&self, other: &FeatureField) -> f64 {
        let num = (&self.data - &other.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let den = other.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        num / den.max(1e-300)
    }
}
