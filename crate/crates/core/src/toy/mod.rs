//! Small encoder-decoder trained end to end on synthetic symbolic mixtures.
//!
//! Every symbol has a fixed random feature vector. Speakers' symbol sequences
//! are rendered to frames, shifted and summed, and the model learns to emit
//! the staggered stream for the mixture. Everything is `f64` with hand-written
//! gradients so the whole objective can be checked against finite
//! differences.

use thiserror::Error;

use crate::codec::CodecError;
use crate::ctc::CtcError;
use crate::scoring::ScoringError;

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
mod linalg;
pub mod loss;
pub mod model;
pub mod task;
pub mod train;

pub use ablation::{run_ablation, AblationConfig, AblationKnob, AblationRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{CtcInfeasible, EvalConfig, Optimizer, ToyConfig, TrainConfig};
pub use eval::{evaluate, ConditionReport, EvalReport, ModeScore};
pub use loss::{loss, LossOutput};
pub use model::{decode_greedy, Decoded, ModelDims, ToyModelParams};
pub use task::{render_features, SyntheticTask, ToyItem};
pub use train::{train, TrainLogEntry, TrainOutcome};

pub type Result<T> = std::result::Result<T, ToyError>;

#[derive(Error, Debug)]
pub enum ToyError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{count} speakers exceed the task maximum of {max}")]
    TooManySpeakers { count: usize, max: usize },
    #[error("symbol {symbol} outside vocabulary of {vocab}")]
    BadSymbol { symbol: usize, vocab: usize },
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Lexical token for symbol `i`.
pub fn symbol_token(i: usize) -> String {
    format!("w{i}")
}
