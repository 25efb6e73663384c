//! Dataset assembly with disjoint-day splits, training, evaluation and run
//! manifests.

mod dataset;
mod manifest;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use dataset::{
    build_dataset, build_dataset_from_file, build_dataset_from_streams, BuildConfig, Dataset, DatasetBuilder, Sample,
    Split,
};
pub use manifest::RunManifest;
pub use train::{evaluate, train, Confusion, DayMetrics, EpochStats, Evaluation, SampleOutput, TrainConfig, TrainReport};

use crate::csi::CsiError;
use crate::nn::NnError;
use crate::preprocess::{PipelineVariant, PreprocessError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Read { path: PathBuf, source: CsiError },
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error("no valid windows ({rejected} rejected)")]
    NoValidWindows { rejected: usize },
    #[error("stream for day {0:?} has no label")]
    MissingLabel(String),
    #[error("training split has a single class ({empty} human-free, {motion} motion)")]
    SingleClassTrainingSet { empty: usize, motion: usize },
    #[error("day {0:?} is in both the training and the test split")]
    DayOverlap(String),
    #[error("day {0:?} not present in the dataset")]
    UnknownDay(String),
    #[error("variant mismatch: expected {expected}, got {got}")]
    VariantMismatch { expected: PipelineVariant, got: PipelineVariant },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Nn(#[from] NnError),
}
