//! History-augmented collaborative filtering.
//!
//! Dynamic user and item embeddings are built from static embeddings and the
//! recent interaction histories of each entity, trained with a symmetric
//! pairwise ranking objective, and evaluated with user-side, item-side and
//! symmetrized mean average precision over daily queries. Static benchmark
//! recommenders, a synthetic drifting-preference generator and the window
//! and sliding-retrain studies live alongside.

pub mod baselines;
pub mod error;
pub mod events;
pub mod harness;
pub mod hcf;
pub mod history;
pub mod metrics;
pub mod params;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
