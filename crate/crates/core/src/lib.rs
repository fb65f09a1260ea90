//! Cognitive-load estimation from EEG.
//!
//! The pipeline runs raw multi-channel recordings through band-pass/notch
//! filtering, resampling to 200 Hz, a 90-second centre crop and sixteen-second
//! half-overlapping windows; embeds every channel-second with a pluggable
//! encoder; pools electrodes into nine scalp regions and windows over time;
//! and regresses a continuous load score. Evaluation uses nested
//! cross-subject validation, and attributions are Owen values over the
//! region→electrode hierarchy.

pub mod data;
pub mod estimators;
pub mod explain;
pub mod features;
pub mod harness;
pub mod preprocess;
