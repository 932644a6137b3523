//! Encoder, decoders and the assembled end-to-end model.

pub mod beam;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod maxpool;
pub mod nn;
pub mod slu;

pub use beam::{beam_search, greedy_decode, BeamConfig, Hypothesis};
pub use checkpoint::{load_encoder, load_model, load_pretrained_encoder, save_encoder, save_model, save_model_with};
pub use decoder::{attend, AttentionDecoderConfig, AttentionMemory, AutoregressiveDecoder, DecoderState, QuerySource};
pub use encoder::{ConvStageConfig, Encoder, EncoderConfig, RnnStageConfig};
pub use maxpool::MaxPoolDecoder;
pub use nn::{Parameterized, SeqBatch};
pub use slu::{teacher_forced_nll, Decoder, DecoderConfig, LossNormalization, ModelConfig, Network, Prediction, SluModel, Target};
