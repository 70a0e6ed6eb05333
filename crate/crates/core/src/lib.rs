//! Inference-aware prompt optimization.
//!
//! Prompts and inference scales are treated jointly as arms of a contextual,
//! fixed-budget best-arm identification problem. The crate provides
//!
//! * [`aggregate`]: Best-of-N, majority-vote and inference-agnostic utilities
//!   with exact expectation oracles,
//! * [`env`]: categorical environments, synthetic generators and the JSON
//!   environment format,
//! * [`learner`]: sequential trimming (PSST) with structure-aware allocation,
//!   nested block reuse and Top-K screening, plus the comparison baselines,
//! * [`harness`]: ACR evaluation and seeded multi-run experiments,
//! * [`stats`]: paired nonparametric tests and multiplicity correction.

pub mod aggregate;
pub mod env;
pub mod error;
pub mod harness;
pub mod learner;
pub mod rng;
pub mod stats;

pub use aggregate::{Arm, CompletionOutcome, Context, OutcomeValue};
pub use env::{AggregatorKind, EnvironmentModel, PullRecord, Side, SplitView};
pub use error::{Error, Result};
pub use rng::Stream;
