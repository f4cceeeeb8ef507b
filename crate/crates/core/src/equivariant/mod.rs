//! Steerable layers and the actor, critic and value networks.
//!
//! Equivariant layers tie their weights so that rotating the input by any
//! element of C_n transforms the output by the corresponding representation.
//! Conventional counterparts share the layer and stride schedule and are sized
//! to a similar parameter count by [`build_matched_baseline`].

pub mod basis;
pub mod certify;
pub mod layers;
pub mod nets;

pub use certify::{certify_equivariance, Certificate, NetRef, Subgroup};
pub use layers::{group_pool, group_pool_vector, Layer, LayerKind, LayerSpec};
pub use nets::{
    action_repr, build_matched_baseline, stack_states, Actor, ActorVariant, ArchConfig, Critic,
    NetRole, NetSpec, PolicyHead, StateParts, ValueNet, ACTION_DIM,
};
