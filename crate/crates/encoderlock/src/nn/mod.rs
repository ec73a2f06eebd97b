//! Minimal CPU training engine.
//!
//! Just enough of a neural-network stack to train and lock the small
//! convolutional encoders this crate works with: conv/dense/pool layers
//! with explicit backward passes, a configurable encoder, MLP probing
//! heads with the shared fine-tuning recipe (adaptive-moment optimizer,
//! plateau LR scheduling, early stopping), and a from-scratch trainer for
//! the security baseline.
//!
//! All heavy arithmetic is routed through `ndarray::dot` (im2col for
//! convolutions); batch work is parallelized over fixed-size chunks and
//! reduced in chunk order so results are bit-identical regardless of
//! thread count.

mod classify;
mod encoder;
mod head;
mod layers;
mod optim;

pub use classify::{
    accuracy, fit_classifier, predictions, softmax_cross_entropy, train_from_scratch,
    ScratchTrainReport,
};
pub use encoder::{BatchTapes, ConvEncoder, EncoderArch, ParamGrads};
pub use head::{train_head, HeadSpec, HeadTrainConfig, HeadTrainOutcome, MlpHead};
pub use layers::{Conv2d, Dense, MaxPool2};
pub use optim::Adam;

/// Fixed batch-chunk size for deterministic parallel reduction.
pub(crate) const CHUNK: usize = 8;
