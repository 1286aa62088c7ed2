//! Gaze-grounded intention detection for chest X-ray reading sessions.
//!
//! The pipeline turns a reading session (fixations plus a timed transcript)
//! into a fixation heatmap video, condenses the transcript into labelled
//! intention spans, predicts spans with simple baselines, extracts the gazed
//! region for each span and scores predictions with BLEU, CIDEr and the median
//! time delay error.

pub mod error;
pub mod eval;
pub mod grammar;
pub mod heatmap;
pub mod ingest;
pub mod intent;
pub mod labeler;
pub mod predict;
pub mod region;
pub mod stats;
pub mod text;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use intent::{IntentionSequence, IntentionSpan, Label, Verdict};
