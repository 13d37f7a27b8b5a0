use thiserror::Error;

use crate::checkpoint::CheckpointBundle;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("group `{0}` is empty")]
    EmptyGroup(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("sample `{0}` has no ground-truth mask")]
    MissingMask(String),

    #[error("undefined_auc: scores must contain both classes")]
    UndefinedAuc,

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("distillation weight is {0} but no teacher model was supplied")]
    TeacherRequired(f64),

    #[error("teacher has {teacher} output classes, student has {student}")]
    TeacherArity { teacher: usize, student: usize },

    #[error("stage 3 only accepts pneumonia samples, got NORMAL sample `{0}`")]
    NormalInStage3(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_finite: Box<CheckpointBundle>,
    },

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
