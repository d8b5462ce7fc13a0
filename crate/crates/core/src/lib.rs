//! Per-point manipulation affordance learning over procedurally generated
//! articulated objects, with instance-specific adaptation from a handful of
//! strategically proposed test-time interactions.
//!
//! Layering, bottom up:
//!
//! - [`sim`]: quasi-static articulated scenes with hidden dynamics.
//! - [`cloud`]: depth-style point cloud rendering and samplers.
//! - [`nn`]: f64 tensors, reverse-mode differentiation, Adam, checkpoints.
//! - [`prior`]: static per-point affordance model and action proposals.
//! - [`aap`]: interaction encoding, latent aggregation, adaptive critic
//!   and affordance heads.
//! - [`aip`]: interaction proposal scoring and the stopping rule.
//! - [`pipeline`]: episode collection, training loops, test-time adaptation.
//! - [`eval`]: metrics, baseline methods, and report generation.

pub mod aap;
pub mod aip;
pub mod cloud;
pub mod config;
pub mod error;
pub mod eval;
pub mod export;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod sim;

pub use error::{Error, Result};

/// Mixes a base seed with a salt into a new stream seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut x = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
