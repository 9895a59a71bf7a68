//! Steerable convolutions on Ω: gauge frames, typed feature fields and the
//! convolution layer.

mod conv;
mod field;
mod frames;

pub use conv::{shift_rows, shift_rows_padded, stencil_offset, ConvCache, ConvLayer, Padding, SampleBank, STENCIL};
pub use field::{channel_layout, types_dim, ChannelType, FeatureField};
pub use frames::{frame_for, GaugeFrames, Mat5, TIE_TOL};
