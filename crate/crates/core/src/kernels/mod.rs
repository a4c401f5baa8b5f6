//! Desk-scale reference of a dual-query grounding decoder.
//!
//! Each query pair has an image-content vector and a text-content vector
//! that share their positional parts: one anchor box (refined every layer in
//! inverse-sigmoid space) and one binary text mask (gating which text tokens
//! the text query may attend to). The first layer starts from all-ones masks.
//!
//! The losses ([`loss`]) come with analytic gradients checked against
//! central finite differences ([`gradcheck`]).

pub mod attention;
pub mod config;
pub mod encoding;
pub mod gradcheck;
pub mod loss;
pub mod model;

use thiserror::Error;

use crate::assignment::AssignmentError;

pub use attention::{masked_softmax, softmax};
pub use config::KernelConfig;
pub use encoding::sine_encode_anchor;
pub use gradcheck::{central_difference, fd_check_gradient, FdReport};
pub use loss::{
    loss_box, loss_phrase_contrastive, match_queries, total_loss, LossBreakdown, PhraseTarget,
    QueryOutputs,
};
pub use model::{DecoderModel, DualQueryState, LayerTrace, Memory, ModelOutput, Params};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in layer {layer} at {stage}")]
    NonFinite { layer: usize, stage: &'static str },
    #[error("mask has no set entries")]
    EmptyMask,
    #[error("anchor coordinate {0} outside (0, 1)")]
    CoordinateOutOfRange(f64),
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("empty phrase target set")]
    EmptyTargetSet,
    #[error("target index {index} outside {len} logits")]
    TargetOutOfRange { index: usize, len: usize },
    #[error("non-finite function value at coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
