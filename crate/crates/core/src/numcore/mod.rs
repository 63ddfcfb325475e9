//! Dense tensors with a reverse-mode gradient tape, the layers built on top of
//! them, finite-difference checking, AdamW and checkpoint files.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, manifest_path, save_checkpoint, validate_against, CheckpointError, CheckpointManifest,
    ManifestEntry, CHECKPOINT_FORMAT,
};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use optim::{accumulate, clip_grad_norm, grad_norm, scale_grads, AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamGrads, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: reduction over an empty axis")]
    EmptyAxis(&'static str),
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("parameter {0} already exists")]
    DuplicateParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
}
