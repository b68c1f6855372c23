//! Knowledge-exploited masked protein modeling at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! triplet data handling ([`data`], [`masking`]), the encoder/decoder model
//! ([`model`]), the optimisation loop ([`train`]), downstream metrics and
//! probes ([`eval`]) and the `keap` command line ([`cli`]).

pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod tensor;
pub mod seed;
pub mod train;
