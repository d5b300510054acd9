//! Stroke-based generative models of handwritten characters.
//!
//! The crate covers the whole pipeline: spline preprocessing of pen
//! trajectories, a symbolic canvas renderer, mixture-density output heads,
//! three generative architectures (a canvas-reading neuro-symbolic model, a
//! hierarchical LSTM and a flat sequence LSTM), maximum-likelihood training
//! and likelihood / sample evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod mdn;
pub mod models;
pub mod render;
pub mod splines;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
