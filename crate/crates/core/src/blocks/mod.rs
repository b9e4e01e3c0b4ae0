//! Transformer sub-blocks and the layer-update rules (residual baseline,
//! midpoint, midpoint-(a), leapfrog, Hamiltonian), each reversible rule paired
//! with its exact inverse.

mod config;
pub mod layers;
mod params;
mod steps;

pub use config::{default_a_schedule, retrofit_a_schedule, BlockKind, ModelConfig};
pub use layers::{attn_block, baseline_step, layer_fn, mlp_block};
pub use params::{BlockParams, EmbeddingParams, GradientBundle, Model, Params};
pub use steps::{
    embed, force, hamiltonian_inverse, hamiltonian_step, inverse, leapfrog_inverse, leapfrog_step,
    midpoint_a_inverse, midpoint_a_step, midpoint_inverse, midpoint_step, project_logits, step,
    two_step_recover, two_step_update, StateCarrier, TwoStepCoeffs,
};

#[cfg(test)]
mod tests;
