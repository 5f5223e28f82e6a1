//! Multitask frame-level few-shot sound event detection.
//!
//! The pipeline is generic over the scalar type; the aliases at the crate
//! root fix it to `f64`.

pub mod autodiff;
pub mod bench;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod framing;
pub mod ingest;
pub mod model;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type AudioClip = ingest::AudioClip<f64>;
pub type FrameFeatures = dsp::FrameFeatures<f64>;
pub type WindowBatch = framing::WindowBatch<f64>;
pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Model = model::Model<f64>;
pub type Corpus = train::Corpus<f64>;
