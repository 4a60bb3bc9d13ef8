//! Experiment plumbing: configuration, training, evaluation, sweeps,
//! checkpoints and PGM output.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod pgm;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use eval::{evaluate, evaluate_on, render_heatmaps, Report};
pub use gradcheck::pipeline_grad_check;
pub use model::{Encoded, Experiment};
pub use pgm::{dump_dataset, read_pgm, render_pgm};
pub use sweep::{sweep, SweepOutcome, SweepParam};
pub use train::{train, train_on, AdamState};
