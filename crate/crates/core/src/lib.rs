//! Grid-constrained superpixel segmentation.
//!
//! A small encoder-decoder predicts, for every pixel, a distribution over the
//! 9 grid cells around the cell that contains it. From that association map
//! the crate derives superpixel centers, pixel reconstructions, training
//! losses, hard segmentations and superpixel-based down/upsampling.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below name the concrete instantiations used for training and for
//! gradient checking.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod color;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod optim;
pub mod resize;
pub mod sampling;
pub mod scalar;
pub mod segmentation;
pub mod slic;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use grid::{AssociationMap, CenterMap, GridSpec};
pub use scalar::Scalar;
pub use segmentation::LabelMap;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type AssociationMap32 = AssociationMap<f32>;
pub type AssociationMap64 = AssociationMap<f64>;
pub type SpixelNet32 = net::SpixelNet<f32>;
pub type SpixelNet64 = net::SpixelNet<f64>;
