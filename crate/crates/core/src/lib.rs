//! Few-shot anomaly detection with kernel-aware hierarchical graph prompts.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: a small `f64` tensor type and a reverse-mode
//!   tape with the operations the model needs.
//! * [`kahg`]: multi-kernel node embedding and gated cross-layer message
//!   passing with ConvGRU node updates.
//! * [`scoring`]: text-alignment and memory-bank anomaly maps, their fusion,
//!   and the top-k image score.
//! * [`losses`] and [`metrics`]: the training objective and the evaluation
//!   metrics (AUROC, AUPR, PRO).
//! * [`synth`]: deterministic toy images, pasted-patch anomalies and a frozen
//!   feature encoder.
//! * [`harness`]: configuration, training, evaluation, sweeps and
//!   persistence.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod kahg;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tensor;

pub use autodiff::{grad_check, grad_check_sampled, GradCheckReport, Gradients, Tape, Var};
pub use error::{CheckpointError, ConfigError, Error, Result};
pub use harness::{Checkpoint, RunConfig};
pub use kahg::{Dims, GraphState, KahgParams};
pub use scoring::{AnomalyResult, MemoryBank, TextFeatures};
pub use synth::{SyntheticSample, ToyEncoder};
pub use tensor::Tensor;
