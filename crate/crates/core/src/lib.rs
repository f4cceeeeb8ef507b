//! Rotation-equivariant offline reinforcement learning on a CPU.
//!
//! The crate is layered bottom-up: [`group`] holds the cyclic rotation group and
//! its representations, [`nn`] a small reverse-mode autodiff engine, and
//! [`equivariant`] the steerable layers and actor/critic/value networks built on
//! it. [`losses`] implements the CQL and IQL objectives, [`env`] and [`dataset`]
//! a synthetic rotation-invariant grasping task and its offline data, and
//! [`trainer`] ties everything into training runs. [`analysis`] and [`tabular`]
//! hold the rotated-Q probe and the exact finite-MDP bound checks.

pub mod analysis;
pub mod checkpoint;
pub mod dataset;
pub mod env;
pub mod error;
pub mod equivariant;
pub mod group;
pub mod losses;
pub mod nn;
pub mod policy;
pub mod scalar;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
