//! Meta-transfer learning for code-switched sequence models.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`params`]: dense tensors, a reverse-mode tape
//!   that supports differentiating through gradients, optimizers and the
//!   checkpoint format.
//! * [`models`]: an encoder-decoder transducer and an LSTM language model,
//!   both exposing `(params, batch) -> scalar loss`.
//! * [`data`]: synthetic monolingual and code-switched corpora, task pools
//!   and code-mixing statistics.
//! * [`train`]: meta-transfer learning (first- and second-order), joint
//!   training and fine-tuning schedules.
//! * [`decode`]: beam search and language-model rescoring.
//! * [`metrics`]: error rates, perplexity and curve logging.
//! * [`harness`]: experiment configuration, orchestration and reporting.

pub mod autodiff;
pub mod data;
pub mod decode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use params::{GradMap, ParamSet, VarMap};
pub use tensor::Tensor;
