//! Mixed contrastive representation learning for heterogeneous test
//! questions.
//!
//! The encoder ([`model::TqNet`]) embeds a question made of a token sequence
//! and zero or more images. Training runs in three steps: masked-language-model
//! pretraining of the text stream, instance-level momentum contrastive
//! pretraining of the whole encoder ([`pretrain`]), and supervised contrastive
//! fine-tuning on labelled similar-question pairs ([`finetune`]). The
//! [`evaluate`] module implements top-k similar-question retrieval and the
//! frozen-feature knowledge-point probe.

pub mod augment;
pub mod batch;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod finetune;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod verify;

pub use candle_core::DType;
pub use error::{Result, TqError};
