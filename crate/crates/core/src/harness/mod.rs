//! Synthetic experiments: configuration, scene generation, image I/O and
//! the end-to-end runner used by the command line.

pub mod config;
pub mod experiment;
pub mod ppm;
pub mod synth;

pub use config::{ExperimentConfig, ManagerKind};
pub use experiment::{execute, run_experiment, ExperimentRun, MetricsReport};
pub use ppm::{read_image, write_image};
