//! Positional index plans for extending the context of rotary-position
//! language models, plus a small CPU transformer lab to test them.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod intervals;
pub mod model;
pub mod plan;
pub mod report;
pub mod rope;
pub mod smoothness;
