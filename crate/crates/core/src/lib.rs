//! Desk-scale image joint-embedding predictive pretraining: multi-block
//! masking, a masked ViT context encoder, an EMA target encoder, a narrow
//! positional predictor, and the training and evaluation machinery around
//! them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod masking;
pub mod nn;
pub mod objective;
pub mod patch;
pub mod predictor;
pub mod run;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
