//! Desk-scale replica of an AI-enabled streaming ptychography workflow.
//!
//! A detector simulator streams synthetic diffraction frames over a binary
//! TCP protocol; an iterative ePIE engine produces ground-truth phase
//! reconstructions and training labels; a small convolutional surrogate is
//! continually trained and hot-swapped into a batching edge-inference
//! service that stitches per-frame inferences into a live image.
//!
//! The crate is organized around that pipeline:
//!
//! - [`field`] / [`metrics`]: complex fields, real images, SSIM/MSE/MAE.
//! - [`simulator`]: synthetic objects, donut probes, spiral scans,
//!   photon-limited diffraction, timed frame streaming.
//! - [`epie`]: iterative phase retrieval and training-pair extraction.
//! - [`surrogate`]: a from-scratch trainable conv net with its own
//!   reverse-mode gradients, ADAM, and cyclic learning rate.
//! - [`wire`]: the length-prefixed frame/model/result protocol.
//! - [`edge`]: the batching live-inference service with model hot swap.
//! - [`orchestrator`]: the continual-learning controller.
//! - [`experiments`]: end-to-end runs reproducing the benchmark figures.

pub mod clock;
pub mod config;
pub mod csvout;
pub mod edge;
pub mod epie;
pub mod experiments;
pub mod fft;
pub mod field;
pub mod geom;
pub mod imageio;
pub mod metrics;
pub mod orchestrator;
pub mod simulator;
pub mod surrogate;
pub mod wire;

pub use field::{ComplexField, OverlapSpec, RealImage};
pub use simulator::{DiffractionFrame, ProbeSpec, ScanPlan, SyntheticObject};
pub use surrogate::{SurrogateModel, Tensor4, TrainConfig};
