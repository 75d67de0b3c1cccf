//! Modular spoofing-robust speaker verification (SASV) back-end.
//!
//! The crate takes speaker-verification (ASV) and spoofing-countermeasure
//! (CM) scores or embeddings and turns them into a single accept/reject
//! decision:
//!
//! - [`types`]: trial labels, the six-parameter cost model, embedding stores.
//! - [`decision`]: affine calibration to log-likelihood ratios, linear and
//!   nonlinear fusion, and the Bayes-optimal accept rule.
//! - [`metrics`]: error counting, a-DCF (minimum and actual), EER and DET.
//! - [`nn`]: small trainable scoring heads with hand-written backward passes.
//! - [`loss`]: BCE, the sigmoid-relaxed a-DCF and the two combined objectives.
//! - [`train`]: SGD/Adam and the joint training loop with checkpoint selection.
//! - [`sim`]: synthetic score and embedding generators, decision-boundary grids.
//! - [`io`]: protocol, score, embedding, checkpoint and report file formats.

pub mod decision;
pub mod error;
pub mod io;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod sim;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{CostModel, EmbeddingStore, LabelBits, ScoredTrial, TrialLabel, TrialRecord};
