//! Annotation error detection for instruction-tuning datasets.
//!
//! The pipeline: inject controlled errors into a dataset ([`perturb`]),
//! record per-token training dynamics ([`toytrain`] or an external trainer
//! writing the [`dynamics`] format), turn the traces into error scores
//! ([`scoring`]), optionally summarize them per task ([`aggregation`]), and
//! measure how well the scores rank known errors above known-clean instances
//! ([`evaluation`]). [`mining`] builds labeled benchmarks from corpus
//! versions and BM25 pairs.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar type for the common cases.

pub mod aggregation;
pub mod cli;
pub mod corpus;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod jsonl;
pub mod mining;
pub mod perturb;
pub mod scalar;
pub mod scoring;
pub mod toytrain;

pub use corpus::{Dataset, ErrorCategory, Instance, SplitLabel};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use scoring::{EpochMode, Method};

pub type TraceRecord64 = dynamics::TraceRecord<f64>;
pub type TraceRecord32 = dynamics::TraceRecord<f32>;
pub type TraceSet64 = dynamics::TraceSet<f64>;
pub type TraceSet32 = dynamics::TraceSet<f32>;
pub type ScoreTable64 = scoring::ScoreTable<f64>;
pub type ScoreTable32 = scoring::ScoreTable<f32>;
pub type TaskScoreTable64 = aggregation::TaskScoreTable<f64>;
pub type TaskScoreTable32 = aggregation::TaskScoreTable<f32>;
pub type ToyModel64 = toytrain::ToyModel<f64>;
pub type ToyModel32 = toytrain::ToyModel<f32>;
pub type Bm25Index64 = mining::Bm25Index<f64>;
