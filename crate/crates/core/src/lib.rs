//! Desk-scale model of a sparse DNN training accelerator.
//!
//! The crate has two halves that meet at the weight masks:
//!
//! * a software trainer ([`refnet`] + [`sparsetrain`]) that runs Dropback-style
//!   sparse-from-scratch training on a toy task, selecting tracked weights with a
//!   streaming quantile threshold ([`quantile`]) instead of a global sort, and
//!   recomputing untracked weights from a stateless xorshift generator;
//! * an analytical accelerator model ([`costmodel`] + [`balance`]) that consumes
//!   the resulting block-sparse masks ([`csb`]) and estimates per-phase cycles,
//!   energy, and on-chip traffic for several PE-array dataflows.
//!
//! All heavy inner loops are data-parallel over independent output slices and
//! run on rayon when the `parallel` feature (default) is enabled; disabling it
//! yields a bit-identical sequential build.

pub mod balance;
pub mod costmodel;
pub mod csb;
pub mod error;
pub mod quantile;
pub mod refnet;
pub mod rng;
pub mod sparsetrain;
pub mod tensor;
pub mod workload;

pub use error::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
