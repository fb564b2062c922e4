//! Online signature verification from digitizer stroke data.
//!
//! The crate covers the full path from raw tablet files to verdicts:
//!
//! * [`ink`] parses SVC2004-format corpora into a typed stroke model.
//! * [`preprocess`] normalizes geometry/time and resamples sequences.
//! * [`psf`] computes second-order path-signature features per segment
//!   (original, temporal-enhanced, and stacked) and rasterizes them into
//!   multi-channel tensors.
//! * [`nn`] is a small dense-tensor core with reverse-mode
//!   differentiation, the layers the classifiers need, and Adam.
//! * [`models`] assembles the three classifiers: a width-fixed CNN, an
//!   LSTM over resampled points, and a CNN-LSTM hybrid for flexible
//!   widths.
//! * [`pipeline`] splits corpora, runs the learning-rate range test,
//!   trains, and scores.
//! * [`synth`] generates synthetic corpora for tests and benchmarks.

pub mod ink;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod psf;
pub mod synth;

pub use ink::{Corpus, Label, SignatureInstance, Stroke, StrokePoint};
pub use models::{Model, ModelConfig, ModelKind};
pub use nn::{Scalar, Tensor};
pub use pipeline::{Metrics, TrainConfig};
pub use psf::{FeatureTensor, SegmentFeature, Variant};
