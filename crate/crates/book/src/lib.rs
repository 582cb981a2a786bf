//! Compiles and runs every code listing in `book/` as a doctest.
//!
//! One module per chapter so a failing doctest points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/scoring.md")]
pub mod scoring {}
#[doc = include_str!("../../../book/src/resampling.md")]
pub mod resampling {}
#[doc = include_str!("../../../book/src/acceptance.md")]
pub mod acceptance {}
#[doc = include_str!("../../../book/src/arbitration.md")]
pub mod arbitration {}
#[doc = include_str!("../../../book/src/refinement.md")]
pub mod refinement {}
#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
