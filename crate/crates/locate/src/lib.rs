//! Files, datasets and the command line around `locate-core`.
//!
//! * [`config`]: TOML configuration with flag overrides
//! * [`dataset`]: indexing the on-disk layout, exocentric sampling, batches
//! * [`fixture`]: a tiny synthetic dataset for tests and demos
//! * [`checkpoint`]: versioned binary checkpoints
//! * [`pipeline`]: train / evaluate / predict / inspect drivers
//! * [`report`], [`npy`], [`overlay`]: output formats

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fixture;
pub mod npy;
pub mod overlay;
pub mod pipeline;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::Config;
pub use error::{LocateError, Result};
