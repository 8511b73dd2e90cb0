//! Splitting, optimization and the train/evaluate drivers.

mod config;
mod data;
mod optim;
mod run;
mod split;

use thiserror::Error;

pub use config::TrainConfig;
pub use data::{label_frame, select, session_keys, Batch, WindowRef, WindowSet};
pub use optim::{AdamConfig, AdamW, PlateauScheduler, SchedulerConfig};
pub use run::{
    evaluate, train, EvalResult, MetricsRow, TrainOutcome, BEST_CHECKPOINT, CONFIG_ECHO,
    LAST_CHECKPOINT, METRICS_FILE, SPLIT_FILE, SUMMARY_FILE,
};
pub use split::{
    largest_remainder, split_loso, split_random_session, split_sessions, SessionKey, SplitManifest,
    SplitMode, SplitSpec,
};

use crate::csi::CsiError;
use crate::model::ModelError;
use crate::objectives::ObjectiveError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("split: {0}")]
    Split(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("session {session}: {msg}")]
    Data { session: String, msg: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
