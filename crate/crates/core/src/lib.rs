//! Scale-attention convolution (SCAN).
//!
//! Each convolution filter owns a learnable Gaussian scale `t`: the layer
//! convolves with `t^γ · (g(·; t) ⊛ k) + k_i`, where `g` is a fixed-size
//! sampled Gaussian, `k` the filter kernel and `k_i` a parallel shortcut
//! kernel. Training adds a per-layer response-maximization term; for
//! inference the whole expression folds into one plain 3×3 kernel.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model_io;
pub mod network;
pub mod ops;
pub mod optim;
pub mod sac;
pub mod scale_space;
pub mod tensor;
pub mod train;

pub use error::{Result, ScanError};
pub use tensor::{DenseArray, FloatWidth, Scalar};
