//! Boosted distributional reinforcement learning over categorical return
//! distributions on a shared atom grid, with a convex post-update projection
//! toward high-performing group references and a synthetic heterogeneous
//! treatment-planning cohort for end-to-end evaluation.

pub mod bellman;
pub mod cohort;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod experiment;
pub mod grouping;
pub mod projection;
pub mod rng;
pub mod table;
pub mod training;

pub use error::{BdrlError, Result};
