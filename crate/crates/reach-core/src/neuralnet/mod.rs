//! Minimal feed-forward network stack: batched MLP forward/backward with
//! ReLU hiddens and three output heads, He initialization, Adam, soft target
//! updates, and a finite-difference gradient checker. Everything is f64 so
//! numerical checks are exact enough to pin in tests.

mod adam;
mod gradcheck;
mod mlp;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{gradient_check, GradCheckCase, GradCheckReport};
pub use mlp::{soft_update, DenseLayer, ForwardCache, Gradients, Mlp, OutputHead};
