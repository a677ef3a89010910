//! Dense matrices with reverse-mode differentiation.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod params;

pub use functional::{
    cross_entropy, embedding_lookup, gelu, kl_divergence, kl_divergence_eps, layer_norm, softmax,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{AttentionLayout, Gradients, Graph, Matrix, Var};
pub use params::{ParamId, ParamStore};
