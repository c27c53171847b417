//! Cross-library API matching and differential fuzzing.
//!
//! The pipeline runs in two phases. [`matcher::build_groups`] pairs APIs
//! across documentation corpora into groups of equivalent functions;
//! [`fuzz::run_campaign`] then drives every group with generated inputs and
//! reports crashes, NaN results and inconsistent outputs.

pub mod align;
pub mod backend;
pub mod corpus;
pub mod fuzz;
pub mod gen;
pub mod matcher;
pub mod report;
pub mod similarity;
pub mod value;
