//! End-to-end spoken language understanding trained on synthetic speech.
//!
//! The crate covers the whole pipeline: semantic labels, manifests, a
//! multi-speaker synthesis front end, feature extraction, encoder-decoder
//! models with hand-written gradients, training and evaluation loops, and the
//! sweep orchestration used for speaker-count and cross-validation studies.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod frontend;
pub mod model;
pub mod pretrain;
pub mod scalar;
pub mod semantics;
pub mod synth;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SluModelF32 = model::SluModel<f32>;
pub type SluModelF64 = model::SluModel<f64>;
pub type EncoderF32 = model::Encoder<f32>;
pub type EncoderF64 = model::Encoder<f64>;
pub type FeatureStoreF32 = frontend::FeatureStore<f32>;
pub type FeatureStoreF64 = frontend::FeatureStore<f64>;
pub type FeatureSequenceF32 = frontend::FeatureSequence<f32>;
pub type FeatureSequenceF64 = frontend::FeatureSequence<f64>;
