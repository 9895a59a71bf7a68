pub mod deform;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod representations;
pub mod steerable;
pub mod symmetry;

pub use error::{Error, Result};
