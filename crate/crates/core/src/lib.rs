//! Report generation via prefix tuning: a trainable transformer mapping
//! network translates fixed vision embeddings into prefix vectors for a
//! frozen decoder-only language model. Includes a reverse-mode autodiff
//! substrate, a synthetic data pipeline, training in prefix-tuning and
//! fine-tuning modes, greedy/beam decoding, and corpus BLEU.

pub mod corpus;
pub mod error;
pub mod generate;
pub mod gradcheck;
pub mod graph;
pub mod lm;
pub mod mapper;
pub mod metrics;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::Error;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, Error>;
