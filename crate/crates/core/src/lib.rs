//! Repair-pattern mining and pattern-guided vulnerability repair.
//!
//! The pipeline turns historical vulnerability fixes into
//! (CWE, action, key element) repair patterns, matches patterns to new
//! vulnerable functions, injects them into generation prompts and scores the
//! generated patches with normalized exact match.

pub mod config;
pub mod corpus;
pub mod diff;
pub mod evaluation;
pub mod extraction;
pub mod gateway;
pub mod generator;
pub mod lexer;
pub mod matcher;
pub mod pipeline;
pub mod store;
