//! Selective prompt tuning on a miniature frozen causal language model.
//!
//! A bank of trainable soft prompts is routed by a dense retriever: for each
//! dialogue context the retriever scores every prompt, training aligns those
//! scores with how well each prompt actually predicts the response, and
//! inference prepends the best-scoring prompt before decoding. The backbone
//! language model stays frozen throughout; only the prompts and the two
//! retriever projections receive gradients.

pub mod backbone;
pub mod bank;
pub mod container;
pub mod error;
pub mod optim;
pub mod retriever;
pub mod synth;
pub mod tensor;
pub mod metrics;
pub mod objectives;
pub mod text;
pub mod trainer;

pub use error::{Result, SptError};
