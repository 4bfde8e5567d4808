//! Hierarchical video+language encoder: a cross-modal transformer fuses each
//! subtitle sentence with its aligned frames, and a temporal transformer
//! contextualizes the fused frames over the whole clip.
//!
//! The crate carries its own reverse-mode autodiff tape, the pre-training
//! objectives (masked language modeling, masked frame modeling, video-subtitle
//! matching, frame order modeling), downstream heads and evaluation metrics.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod params;
pub mod rng;
pub mod span;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use encoder::{HeroModel, ModelConfig};
pub use error::{HeroError, Result};
pub use params::{ParamId, ParamStore};
pub use span::{Span, TimeSpan};
pub use tensor::Tensor;
