//! Deterministic ETL and evaluation pipeline for MIMIC-IV-shaped ICU data.
//!
//! The crate turns raw CSV tables into two artifacts per ICU stay: numeric
//! feature vectors (a per-window concatenation or a window-averaged variant)
//! and a template-based text document. On top of those it provides dataset
//! splitting/serialization, native AU-ROC / AU-PRC metrics with a logistic
//! regression baseline, and a zero-shot yes/no prompt harness against any
//! chat-completion endpoint. A seeded synthetic-table generator makes the
//! whole pipeline testable without credentialed data.

pub mod cli;
pub mod config;
pub mod ehr_model;
pub mod emit;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod ingest;
pub mod synth;
pub mod textualize;
pub mod zeroshot;

pub use error::{Error, Result};
