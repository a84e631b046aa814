//! Speaker verification with an attentive multi-scale convolutional recurrent
//! network (AMCRN).
//!
//! The crate covers the whole pipeline:
//!
//! - [`dsp`]: WAV input, log-mel spectrum (LMS) extraction, sliding-window
//!   mean/variance normalization and synthetic data augmentation.
//! - [`autodiff`]: a small tape-based reverse-mode differentiation engine with
//!   the operators the network needs.
//! - [`model`]: the speaker embedding network (multi-scale convolutional
//!   blocks with temporal attention, residual BLSTM, attentive statistics
//!   pooling) and the additive angular margin output layer.
//! - [`train`]: Adam, learning-rate schedule, the training loop and a
//!   synthetic multi-speaker corpus.
//! - [`scoring`]: cosine and PLDA back-ends, EER/minDCF, trial evaluation.
//! - [`profiler`]: analytic parameter and multiply-accumulate counts.
//! - [`store`], [`runconfig`], [`cli`]: the command-line application.

pub mod autodiff;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod fsutil;
pub mod model;
pub mod profiler;
pub mod runconfig;
pub mod scoring;
pub mod store;
pub mod train;

pub use error::{Error, Result};
