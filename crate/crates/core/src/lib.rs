//! Open-world reliability assessment.
//!
//! Detects when an image-classification pipeline operating in the open world
//! becomes unreliable because the fraction of out-of-distribution inputs has
//! increased, using only the stream of per-sample recognition scores.
//!
//! The crate is organized as:
//!
//! - [`score_stream`]: the score-record data model, batching, and file formats;
//! - [`dist_stats`]: Gaussian fitting (raw and upper-truncated moment match),
//!   KL divergences, and correlation;
//! - [`evm`]: a self-contained Extreme Value Machine (Weibull tail fitting,
//!   greedy model reduction, open-set classification);
//! - [`policy`]: the five stateful batch reliability policies behind a single
//!   contract, plus calibration;
//! - [`testbed`]: the evaluation harness (synthetic score pools, test-sequence
//!   generation, detection metrics, threshold sweeps and selection).

pub mod dist_stats;
pub mod error;
pub mod evm;
pub mod policy;
pub mod score_stream;
pub mod testbed;

pub use error::{Error, Result};
