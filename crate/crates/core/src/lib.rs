//! GRPO training for multi-hop retrieval agents on a synthetic QA
//! environment, with grounded retrieval rewards, few-shot expert warm-start
//! and grounded expansion of near-miss groups.

pub mod error;
pub mod expansion;
pub mod grpo;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod rollout;
pub mod seed;
pub mod synthenv;
pub mod warmstart;

pub use error::{Error, Result};
