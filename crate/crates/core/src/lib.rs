//! Residual adapters for a from-scratch encoder-decoder translation model.
//!
//! A base transformer is trained once and frozen; each new domain or
//! language pair then gets its own small bundle of residual adapter layers,
//! injected after every encoder and decoder layer and trained in isolation.

pub mod adapters;
pub mod bleu;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use adapters::{
    adapter_forward, count_adapter_params, create_bundle, AdapterBundle, AdapterConfig,
    AdapterModule,
};
pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use params::{ParameterStore, Partition};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use transformer::{Example, ModelConfig, Seq2Seq};
pub use train::{BaseModel, EvalResult, SharingMode, TrainConfig, TrainReport};
