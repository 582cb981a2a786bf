//! PRISM: verifier-guided population refinement for LLM reasoning.
//!
//! A population of candidate solutions is scored step by step by a process
//! reward model, reweighted, resampled with a cap on clones when diversity
//! collapses, and rejuvenated with proposals that are accepted or rejected by
//! an energy-based rule. The final population is reduced to one answer by a
//! vote.

pub mod aggregate;
pub mod backends;
pub mod baselines;
pub mod domain;
pub mod engine;
pub mod metrics;
pub mod error;
pub mod harness;
pub mod rng;
pub mod template;
pub mod verify;

pub use aggregate::{AggregateResult, AggregationMethod};
pub use baselines::{Strategy, StrategyName};
pub use domain::{Answer, Problem, RunConfig, Trace};
pub use engine::{Particle, Population};
pub use error::{Error, Result};
