//! Counterfactual face-dataset pipeline engine.

pub mod attrdetect;
pub mod backends;
pub mod cli;
pub mod distortion;
pub mod domain;
pub mod evalstats;
pub mod exec;
pub mod filter;
pub mod genplan;
pub mod manifest;
pub mod specmatrix;
pub mod store;
pub mod surveys;
