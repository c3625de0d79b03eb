//! Local binary convolution networks: sparse ±1 anchor filters with a fixed
//! support, an elementwise nonlinearity and a learnable 1x1 combination.
//!
//! The crate contains the tensor and convolution kernels, LBP encoding,
//! anchor bank generation, layers and networks, an SGD trainer, and the
//! approximation and filter statistics used to study the layer.

pub mod analysis;
pub mod anchor;
pub mod conv;
pub mod data;
pub mod error;
pub mod layers;
pub mod lbp;
pub mod lstsq;
pub mod net;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod train;

pub use anchor::{generate_bank, SparseBinaryFilterBank};
pub use conv::{ConvGeometry, OpCounter};
pub use data::Dataset;
pub use error::{Error, Result};
pub use layers::{Activation, ConvLayer, LbcLayer};
pub use net::{count_params, Network, NetworkSpec, ParamCount};
pub use tensor::Tensor;
pub use train::{train, RunMetrics, TrainConfig};
