//! Synthetic data, training, evaluation and benchmarking around
//! [`vmra_core`], as used by the `vmra` command line.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod optim;
pub mod synth;
pub mod train;

pub use config::{Config, EvalConfig, SyntheticConfig, TrainConfig};
pub use error::{Error, Result};
