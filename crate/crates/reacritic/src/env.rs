//! Environment contract shared by the wireless simulator and the toy task.
//!
//! Trainers see a flat observation vector and emit actions in the unit box
//! `[0,1]^action_dim`; each environment maps that box onto its native
//! controls (the wireless simulator projects onto its resource constraints,
//! the point-mass rescales to force space).

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("episode already terminal; call reset first")]
    EpisodeTerminated,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("action length {got}, expected {expected}")]
    ActionLength { got: usize, expected: usize },
}

/// One transition's worth of outputs.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub per_user_rewards: Vec<f64>,
    pub done: bool,
    pub info: BTreeMap<String, f64>,
}

impl StepOutcome {
    pub fn initial(observation: Vec<f64>, users: usize) -> Self {
        StepOutcome {
            observation,
            reward: 0.0,
            per_user_rewards: vec![0.0; users],
            done: false,
            info: BTreeMap::new(),
        }
    }
}

pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Starts a new episode, drawing fresh scenario randomness from the
    /// environment's own seeded stream.
    fn reset(&mut self) -> StepOutcome;
    /// Advances one step with an action in `[0,1]^action_dim`.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError>;
}
