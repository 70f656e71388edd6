//! Gender-bias diagnosis and mitigation for binary spoof detectors.
//!
//! Scores follow a bonafide-high convention: a trial is predicted spoof when
//! its score falls below the threshold.

pub mod data;
pub mod diagnosis;
pub mod metrics;
pub mod postproc;
pub mod report;
pub mod synth;
pub mod trainer;
