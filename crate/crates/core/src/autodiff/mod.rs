//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records primitive ops in execution order. Calling
//! [`Graph::backward`] on a scalar walks the record once in reverse and adds
//! gradients into every trainable leaf. Gradients accumulate until the caller
//! resets them; nothing is zeroed implicitly.
//!
//! [`Graph::stop_gradient`] returns its input unchanged in the forward pass and
//! blocks gradient flow in the reverse pass. The dynamic fine-tuning loss uses
//! it to weight each token by its own probability without differentiating
//! through the weight.

mod graph;
pub mod kernels;

pub use graph::{Graph, OpRecord, Var};
