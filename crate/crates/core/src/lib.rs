//! Ranked list truncation: learn where to cut each retrieved list so as to
//! maximize a user metric (F1@k or signed DCG@k), optionally subject to a
//! minimal recall.
//!
//! The model encodes per-document features with a two-layer Bi-LSTM,
//! refines them with one multi-head self-attention block and emits a
//! softmax over cut positions. It is trained against the softmax of the
//! per-position metric values (reward augmented maximum likelihood).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ingest;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod truncation;

pub use error::{Error, Result};
