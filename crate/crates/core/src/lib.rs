//! Streaming Transformer-Transducer speech recognition with multitask
//! contrastive pretraining.
//!
//! The crate trains a transducer ASR model in two stages: a multitask
//! pretraining stage that mixes an InfoNCE-style contrastive objective on
//! span-masked latent frames with the exact transducer loss on labeled
//! batches, and a streaming fine-tuning stage that restricts self-attention
//! with chunk-wise masks. Everything runs on a small `f64` reverse-mode
//! autodiff tape, so all gradients are checkable against finite differences.
//!
//! See the crate `examples/` directory for one runnable example per major
//! capability (feature extraction, masking, losses, training, decoding,
//! scoring).

pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod eval;
pub mod frontend;
pub mod masking;
pub mod nn;
pub mod synth;
pub mod trainer;
pub mod transducer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;
