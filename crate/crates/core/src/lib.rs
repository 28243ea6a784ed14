//! Two-stage hand-object action recognition.
//!
//! Stage one is a set-prediction keypoint estimator: a transformer
//! encoder-decoder whose fixed query set is matched to the two hands and the
//! object by optimal assignment. Stage two is a temporal transformer that
//! reads one pose token per sampled frame plus a learnable action token and
//! classifies the action. Everything runs on synthetic scenes with exact
//! ground truth.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod criterion;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod gradcheck;
pub mod graph;
pub mod hungarian;
pub mod jsonfmt;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod recognizer;
pub mod render;
pub mod sampling;
pub mod scene;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
