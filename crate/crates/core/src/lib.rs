//! Mask-controlled Transformer language model: one shared encoder trained
//! jointly on bidirectional, left-to-right, right-to-left and
//! sequence-to-sequence cloze objectives, selected per example by the
//! self-attention mask.

pub mod autograd;
pub mod config;
pub mod decode;
pub mod error;
pub mod finetune;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;

pub use autograd::{Graph, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use masks::{AttentionMask, LMObjective, ObjectiveKind};
pub use model::{ModelConfig, ModelParams, PackedInput};
pub use optim::{Adam, OptimizerConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use tokenizer::{TokenId, Vocab};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ModelParams64 = ModelParams<f64>;
pub type ModelParams32 = ModelParams<f32>;
