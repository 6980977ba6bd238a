//! Knowledge washing for a tiny decoder-only language model.
//!
//! The crate trains a small transformer on a synthetic world of facts,
//! comparison-chain puzzles and filler text, then removes a chosen set of
//! facts by rewriting the output projection of a few MLP layers. The washer
//! maximizes how far the washed keys move while bounding the disturbance on
//! every other key:
//!
//! ```text
//! max_Δ ‖Δ K_w‖²   subject to   ‖Δ K‖² / ‖K‖² ≤ β
//! ```
//!
//! where `K_w` are the MLP keys of the facts to forget and `K Kᵀ` is
//! approximated by a scaled second-moment estimate `λ C₀`.
//!
//! Module map:
//!
//! * [`numerics`]: dense matrices, least squares, generalized eigenpairs.
//! * [`corpus`]: the synthetic world and its on-disk format.
//! * [`model`]: the transformer, its checkpoint container and backprop.
//! * [`trainer`]: pretraining and the fine-tuning baselines.
//! * [`kv_memory`]: key statistics for the key-value view of `W_out`.
//! * [`editor`]: closed-form batch editing spread over layers.
//! * [`washer`]: the constrained washing optimizer.
//! * [`eval`]: accuracy, QA-F1, reasoning and fluency metrics.
//! * [`experiment`]: end-to-end pipelines with manifests.

pub mod corpus;
pub mod editor;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fsutil;
pub mod kv_memory;
pub mod model;
pub mod numerics;
pub mod tensorfile;
pub mod trainer;
pub mod washer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/key_value_memory.md")]
    mod key_value_memory {}
    #[doc = include_str!("../../../book/src/closed_form_edits.md")]
    mod closed_form_edits {}
    #[doc = include_str!("../../../book/src/washing.md")]
    mod washing {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
