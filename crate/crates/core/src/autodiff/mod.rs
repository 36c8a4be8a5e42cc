//! Minimal dense tensor engine with tape-based reverse-mode
//! differentiation, Adam, and a binary checkpoint container.
//!
//! Everything is `f64` and 2-D. A [`Tape`] borrows parameter values from a
//! [`ParamStore`]; after `backward`, [`Tape::param_grads`] hands back
//! per-parameter gradients that the caller folds into the store before an
//! optimizer step. Independent tapes can therefore run side by side
//! against the same store.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
