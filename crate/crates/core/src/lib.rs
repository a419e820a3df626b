//! Locate-then-stamp bias editing for small causal transformer language models.
//!
//! The crate is organized around the editing pipeline:
//!
//! - [`model`]: a decoder-only transformer with hidden-state capture, state
//!   patching, analytic gradients, training and checkpoints.
//! - [`data`]: knowledge triplets, bias pairs, the dataset bundle and its JSONL
//!   format, plus a synthetic world generator with known associations.
//! - [`tracing`]: contrastive causal tracing and decisive-layer selection.
//! - [`stamp`]: the residual FFN adapter and the stamped model wrapper.
//! - [`edit`]: the efficacy and retention objectives and the Adam edit loop.
//! - [`metrics`]: SS, PS, RS, LMS and ICAT over a dataset bundle.

pub mod data;
pub mod edit;
mod error;
pub mod io;
pub mod metrics;
pub mod model;
mod optim;
pub mod stamp;
pub mod tensor;
pub mod tracing;

pub use error::{DivergenceInfo, Error, Result};
pub use model::{Model, ModelConfig, TokenSeq};
pub use stamp::{FairnessStamp, StampedModel};
