//! Desk-scale training and fine-tuning toolkit for convolutional
//! encoder-decoder segmentation networks.
//!
//! The crate is organized around a small dense tensor engine with
//! reverse-mode differentiation ([`tensor`]), low-rank adaptation of
//! convolution layers ([`lora`]), network planning and construction
//! ([`net`]), a volume preprocessing/sampling pipeline ([`data`]), the
//! training loop with freeze schedules ([`train`]), scoring utilities
//! ([`metrics`]) and a synthetic phantom generator ([`phantom`]).

pub mod data;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
