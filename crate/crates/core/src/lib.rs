//! Joint clause-level emotion cause extraction.
//!
//! Given a document split into clauses and the index of its emotion
//! expression clause, the models here predict for every clause whether it
//! states the cause of that emotion. The full model (`RTHN`) runs a
//! word-level Bi-LSTM encoder with additive attention under a stacked
//! clause-level Transformer that consumes relative-position embeddings and
//! feeds each layer's hard predictions back into the next layer as a
//! global-prediction embedding. Ablations (`NoGPE`, `NoRPE`, `APE`) and
//! encoder swaps (`RRHN`, `TTHN`) share the same contract for side-by-side
//! comparison.
//!
//! Everything runs on a from-scratch f64 tape ([`tensor::Tape`]) so
//! gradients stay exactly verifiable against central finite differences.

pub mod clause_encoder;
pub mod data;
pub mod embeddings;
pub mod gradcheck;
pub mod lstm;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train_eval;
pub mod word_encoder;

pub use model::{Model, ModelConfig, Variant};
pub use params::ParameterStore;
pub use train_eval::derived_seed;
pub use tensor::{Tape, TensorId};
