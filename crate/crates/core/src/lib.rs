//! Entailment tuning for dense retrievers.
//!
//! The crate implements the full training-and-evaluation loop for a dense
//! passage retriever whose intermediate training stage teaches the encoder
//! to predict the claim a passage entails:
//!
//! 1. [`data`] — JSON-lines ingestion of QA-retrieval and NLI datasets.
//! 2. [`claim`] — rule-based transformation of questions into existence claims.
//! 3. [`prompt`] — placement of premise/hypothesis pairs into the unified
//!    `"<premise> entails that <hypothesis>"` prompt (or a `[SEP]` concat
//!    baseline).
//! 4. [`masking`] — aggressive masking of the hypothesis span.
//! 5. [`encoder`] — a small trainable transformer encoder with an MLM head
//!    and a CLS-pooled embedding output.
//! 6. [`trainer`] — the masked-hypothesis-prediction training loop.
//! 7. [`contrastive`] — dual-tower contrastive fine-tuning with in-batch
//!    negatives.
//! 8. [`retrieval`] — exact inner-product top-k search plus hits@k / MRR@N
//!    evaluation.
//! 9. [`analysis`] — entailment-probability and retriever-score separation
//!    studies.
//! 10. [`pipeline`] — config-driven orchestration of all stages with a run
//!     manifest.
//!
//! All numeric code is generic over a [`Scalar`] (`f32` or `f64`); concrete
//! aliases for the common instantiations live at the crate root.

pub mod analysis;
pub mod claim;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod math;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod scalar;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type the CLI and pipeline run at.
pub type DefaultScalar = f32;

/// Single-precision encoder, the default for training and inference.
pub type EncoderF32 = encoder::EncoderModel<f32>;
/// Double-precision encoder, used where extra precision matters
/// (e.g. finite-difference gradient verification).
pub type EncoderF64 = encoder::EncoderModel<f64>;

/// Single-precision dual-tower retriever.
pub type RetrieverF32 = contrastive::DualTowerRetriever<f32>;

/// Derive a stage- or instance-level seed from a global seed and a label.
///
/// Splits one user-facing seed into decorrelated streams so that every
/// stage (and every worker within a stage) is deterministic on its own.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_label() {
        let a = derive_seed(42, "tune");
        let b = derive_seed(42, "finetune");
        let c = derive_seed(43, "tune");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, "tune"));
    }
}
