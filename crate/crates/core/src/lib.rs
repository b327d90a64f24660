//! Claim-specific multimodal summarization for fact-checking.
//!
//! A claim, a set of documents and a set of images are encoded, fused and
//! summarized by a small seq2seq policy; the policy is then fine-tuned with
//! PPO against a reward built from an entailment classifier, a summary
//! quality critic and a KL penalty toward the supervised reference policy.

pub mod claimgen;
pub mod encoding;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod labels;
pub mod model;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod reward;
pub mod rng;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use labels::Label;
