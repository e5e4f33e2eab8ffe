//! Narrative learning: classifiers whose model is a natural-language rule
//! set, refined round by round by an overseer LLM and executed row by row by
//! an underling LLM, plus the tooling needed to evaluate them honestly.

pub mod baselines;
pub mod data;
pub mod ensemble;
pub mod gateway;
pub mod lexicon;
pub mod metrics;
pub mod obfuscate;
pub mod report;
pub mod stats;
pub mod store;
pub mod synth;
pub mod trainer;
