//! The trainable frame-to-patch surrogate: a two-headed fully-convolutional
//! encoder/decoder with its own reverse-mode differentiation, ADAM, cyclic
//! learning rate, and a binary model format.
//!
//! Everything is hand-rolled on [`tensor::Tensor4Of`]; the only outside help
//! is a GEMM kernel. Training runs in f32, with an f64 instantiation kept
//! solely so gradient checks can run at tight tolerances.

pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod preprocess;
pub mod serial;
pub mod tensor;
pub mod train;

pub use layers::Layer;
pub use net::{Network, SurrogateModel, DEFAULT_WIDTH};
pub use preprocess::{attenuate_training_pair, preprocess, preprocess_batch};
pub use serial::{deserialize, serialize};
pub use tensor::{Tensor4, Tensor4Of};
pub use train::{train, validation_split, AdamState, TrainConfig, TrainReport};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurrogateError {
    #[error("tensor data length {got} does not match shape product {expected}")]
    BadTensor { expected: usize, got: usize },
    #[error("{context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize, usize, usize),
        got: (usize, usize, usize, usize),
    },
    #[error("cannot batch zero tensors")]
    EmptyBatch,
    #[error("bad config: {0}")]
    BadConfig(&'static str),
    #[error("scale/attenuation factor {0} is out of range")]
    BadFactor(f64),
    #[error("need at least {need} training pairs, got {got}")]
    TooFewPairs { got: usize, need: usize },
    #[error("loss became non-finite; training diverged")]
    NonFiniteLoss,
    #[error("model file does not start with PTNN")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("model file truncated at byte {at}")]
    Truncated { at: usize },
    #[error("unknown layer kind {0}")]
    BadLayerKind(u8),
    #[error("model file structure invalid: {0}")]
    BadStructure(&'static str),
}
