//! Small CNN engine: batched layers with hand-written backward passes, the
//! two-branch classifier, Adam, and the model file format.
//!
//! Image tensors are `N × H × W × C` (channels last); dense activations are
//! `N × D`. Everything is `f64` in memory.

mod io;
mod layers;
mod loss;
mod model;
mod ops;
mod optim;
mod tensor;

use thiserror::Error;

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use layers::{AvgPool, BatchNorm, Conv2d, Dense, Dropout, Layer, Relu, BN_EPSILON, BN_MOMENTUM};
pub use loss::{cross_entropy, l2_penalty, softmax, softmax_batch, softmax_cross_entropy_grad};
pub use model::{count_params, predicted_label, BranchSpec, ConvSpec, InputGeometry, ModelSpec, Network};
pub use ops::{avg_pool, conv2d};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Param, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel {kh}×{kw} larger than input {h}×{w}")]
    KernelLargerThanInput { kh: usize, kw: usize, h: usize, w: usize },
    #[error("pool {ph}×{pw} larger than input {h}×{w}")]
    PoolLargerThanInput { ph: usize, pw: usize, h: usize, w: usize },
    #[error("batch norm needs at least 2 samples in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("model file checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
