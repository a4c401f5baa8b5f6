//! Phrase extraction and grounding (PEG) toolkit.
//!
//! The crate has two halves:
//!
//! * evaluation: the PEG data model and JSONL formats ([`data`]), box and
//!   phrase geometry including dual IOU ([`geometry`]), and the CMAP and
//!   Recall@k metrics ([`metrics`]);
//! * reference kernels: a small dual-query decoder with text-mask-guided
//!   attention ([`kernels`]), DETR-style bipartite matching
//!   ([`assignment`]), and a synthetic dataset / finite-difference training
//!   harness ([`synth`]).
//!
//! [`oracle`] and [`selftest`] hold brute-force reference implementations
//! used to cross-check the fast paths.

pub mod assignment;
pub mod data;
pub mod geometry;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod selftest;
pub mod synth;

pub use data::{
    BoxXYXY, GroundingPair, PegPrediction, PegPredictionSet, PegSampleGT, PhraseSpans,
    TokenizedCaption,
};
pub use geometry::BoxCXCYWH;
