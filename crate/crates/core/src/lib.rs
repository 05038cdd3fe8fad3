//! Speech as a trimodal source for longitudinal, multi-task mental-health
//! prediction: transcripts, acoustic landmarks and vocal biomarkers feed a
//! tiny language model with LoRA and prompt tuning, a biomarker transformer,
//! decision-level fusion and an optional GRU carried across visits.

pub mod audio;
pub mod biomarkers;
pub mod cohort;
pub mod dsp;
pub mod evalkit;
pub mod fusion;
pub mod landmarks;
pub mod lm;
pub mod nn;
