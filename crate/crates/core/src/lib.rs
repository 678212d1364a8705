//! Orchestration engine for resolving repository issues with scaled
//! test-time compute.
//!
//! The pipeline has three stages. [`context`] scans every source file for
//! relevance, ranks the relevant ones, and packs a capped context window.
//! [`machines`] runs many independent testing/editing state machines per
//! instance, each revising a (test, edit) pair against execution feedback.
//! [`selection`] picks one candidate with test voting, top-k filtering and a
//! selection state machine. [`analytics`] computes coverage, score and the
//! serial-by-parallel scaling sweep from the recorded runs, and [`llm`]
//! prices everything.

pub mod analytics;
pub mod context;
pub mod llm;
pub mod machines;
pub mod pool;
pub mod prompts;
pub mod sandbox;
pub mod selection;
pub mod tokens;
pub mod types;

pub use types::*;
