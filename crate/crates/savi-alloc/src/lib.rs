//! Semi-amortized variational inference over DAG-structured latents and
//! lambda-domain bit allocation on differentiable codec surrogates.

pub mod alloc;
pub mod graph;
pub mod model;
pub mod oracle;
pub mod savi;
