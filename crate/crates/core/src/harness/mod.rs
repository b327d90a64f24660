//! Configuration, evaluation metrics, reporting and the training pipeline.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use metrics::{bleu, rouge_l, rouge_n, verify_claims, Averaging, OverlapReport, VerificationReport};
