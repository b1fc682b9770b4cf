//! Experiment harness: configuration, the training-window sweep, the
//! sliding-retrain study, random search, gradient checks and file outputs.

pub mod cli;
pub mod config;
pub mod export;
pub mod gradcheck;
pub mod models;
pub mod search;
pub mod slide;
pub mod sweep;

pub use config::{ExperimentConfig, ModelKind};
pub use models::{train_model, Schedule, Trained, TrainedModel};
pub use search::{run_random_search, SearchResult};
pub use slide::{run_sliding_study, SlideMode, SlideResult};
pub use sweep::{run_window_sweep, SweepResult};
