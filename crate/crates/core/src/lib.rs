//! Decoder-only transformer inference driven by an explicit step schedule.
//!
//! A contiguous block range can be re-applied several times in one forward
//! pass ("middle looping"); after each repeated pass the state can be pulled
//! back toward earlier loop-boundary states by a [`regularize::Strategy`].
//! Around the engine sit a multiple-choice scorer, layer-range sweeps and PCA
//! tools for looking at how hidden states move through depth.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod regularize;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
