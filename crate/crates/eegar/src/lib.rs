//! EEG signal tokenization and autoregressive sequence modeling.
//!
//! The pipeline turns raw multi-channel EEG into discrete token maps over a
//! nested channel hierarchy, trains an autoregressive transformer on those
//! maps, and fine-tunes it to answer multiple-choice questions about the
//! signal. Everything is deterministic for a fixed seed: same inputs, same
//! bytes out.

pub mod armask;
pub mod bar;
pub mod bth;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod instruct;
pub mod nn;
pub mod report;
pub mod signalio;
pub mod tokenizer;
pub mod vq;
