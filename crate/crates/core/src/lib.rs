//! Emulation of stable continuous LTI systems by discrete-time systems driven
//! by ternary-quantized input channels.
//!
//! The crate provides the reference and quantized dynamics ([`lti`]), the
//! direction alphabet with channel dropout and the nearest-direction mapping
//! rule ([`quantization`]), an integer MPC ([`mpc`]), a small dense network
//! with explicit backpropagation ([`nn`]), supervised learning from MPC data
//! ([`supervised`]), a DQN trained on the max of the target-network and
//! Bellman-residual losses ([`dqn`]), and similarity-transform policy
//! transfer ([`transfer`]).

pub mod dqn;
pub mod emulation;
pub mod error;
pub mod lti;
pub mod mpc;
pub mod nn;
pub mod quantization;
pub mod supervised;
pub mod transfer;

pub use error::{Error, Result};
pub use lti::{ContinuousLti, DiscretizedSystem, Matrix, Trajectory, TrajectoryKind, Vector};
pub use quantization::{
    apply_dropout, enumerate_patterns, nearest_direction, ActivationPattern, DirectionAlphabet,
    DropoutMask, KdTree, MappingRule, MaskedAlphabet, NearestBackend,
};
