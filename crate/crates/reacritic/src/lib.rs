//! Reasoning-transformer critic scaling for actor-critic deep RL.
//!
//! The crate bundles everything needed to study critic-side inference-time
//! scaling at desk scale:
//!
//! - [`tensor`] — dense `f64` tensors on a reverse-mode gradient tape, plus
//!   Adam.
//! - [`critic`] — the reasoning critic: a state–action embedding expanded
//!   into `H` parallel tokens, refined by `V` pre-norm transformer blocks,
//!   aggregated by attention into a scalar Q-value.
//! - [`hetnet`] — a deterministic, seedable multi-user heterogeneous
//!   wireless network simulator (mobility, Rician fading, SINR, Shannon
//!   rates, energy efficiency, latency, constrained resource allocation).
//! - [`toy`] — a point-mass continuous-control task for validating trainers.
//! - [`drl`] — replay buffer, squashed-Gaussian/deterministic actors, SAC
//!   and DDPG trainers with target networks and polyak updates.
//! - [`harness`] — config-file driven experiment runner, (H, V) grid sweeps,
//!   CSV metrics, and the verification suites behind `harness verify`.
//!
//! See the crate `examples/` directory for one runnable example per
//! capability, and the `harness` binary for the command-line surface.

pub mod critic;
pub mod env;
pub mod gradcheck;
pub mod hetnet;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod toy;
