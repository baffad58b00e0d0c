//! Personalization steering engine.
//!
//! The pipeline selects representative history for a user, has a language
//! model generate personalized and neutral answers to the same queries,
//! fits personalized and neutral directions from the contrasting hidden
//! states, and edits activations at inference time to strengthen the first
//! and suppress the second.

pub mod datagen;
pub mod directions;
pub mod editing;
pub mod eval;
pub mod group;
pub mod history;
pub mod json;
pub mod linalg;
pub mod llm;
pub mod task;

pub use task::Task;
