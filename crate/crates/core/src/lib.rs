//! Reproducible fairness benchmarking of hosted language models.
//!
//! A run loads a pinned dataset and prompt template, queries a
//! chat-completions endpoint, parses every answer, computes group fairness,
//! stereotype and accuracy metrics, and commits all of it to a hash-chained
//! ledger from which the report can be recomputed.

pub mod client;
pub mod config;
pub mod dataset;
pub mod digest;
pub mod exec;
pub mod ledger;
pub mod metrics;
pub mod parser;
pub mod prompt;
pub mod render;
pub mod replay;
pub mod runner;
pub mod simulator;
