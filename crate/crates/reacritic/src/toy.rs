//! Point-mass reaching task for validating trainers independently of the
//! wireless physics.
//!
//! A unit mass on a 2-D arena `[-1,1]²` is pushed by a force action in
//! `[-1,1]²` under Euler integration with linear friction. Reward is the
//! negative distance to a per-episode target minus a small action cost, so
//! returns are bounded above by zero. Episodes end after 200 steps or once
//! the mass is within 0.05 of the target. A uniformly random policy scores
//! around −100; a competent one lands above −30.

use rand::Rng;

use crate::env::{EnvError, Environment, StepOutcome};
use crate::rng::{stream, Stream};

pub const DT: f64 = 0.05;
pub const FRICTION: f64 = 0.1;
pub const MASS: f64 = 1.0;
pub const MAX_STEPS: usize = 200;
pub const GOAL_RADIUS: f64 = 0.05;
const SPAWN_HALF_WIDTH: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct PointMassState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub target: [f64; 2],
    pub step_idx: usize,
}

pub struct PointMassEnv {
    rng: Stream,
    state: PointMassState,
    terminal: bool,
    started: bool,
}

impl PointMassEnv {
    pub fn new(seed: u64) -> Self {
        PointMassEnv {
            rng: stream(seed, "pointmass"),
            state: PointMassState {
                position: [0.0; 2],
                velocity: [0.0; 2],
                target: [0.0; 2],
                step_idx: 0,
            },
            terminal: false,
            started: false,
        }
    }

    pub fn state(&self) -> &PointMassState {
        &self.state
    }

    fn distance(&self) -> f64 {
        let dx = self.state.position[0] - self.state.target[0];
        let dy = self.state.position[1] - self.state.target[1];
        (dx * dx + dy * dy).sqrt()
    }

    fn observation(&self) -> Vec<f64> {
        vec![
            self.state.position[0],
            self.state.position[1],
            self.state.velocity[0],
            self.state.velocity[1],
            self.state.target[0],
            self.state.target[1],
        ]
    }

    /// Native step with a force action in `[-1,1]²`. Out-of-box components
    /// are clipped and flagged under the `clipped` info key.
    pub fn step_force(&mut self, action: [f64; 2]) -> Result<StepOutcome, EnvError> {
        if !self.started || self.terminal {
            return Err(EnvError::EpisodeTerminated);
        }
        let mut clipped = 0.0;
        let mut force = action;
        for f in force.iter_mut() {
            if !(-1.0..=1.0).contains(f) {
                *f = f.clamp(-1.0, 1.0);
                clipped = 1.0;
            }
        }
        let s = &mut self.state;
        for i in 0..2 {
            let accel = force[i] / MASS - FRICTION * s.velocity[i];
            s.velocity[i] += accel * DT;
            s.position[i] += s.velocity[i] * DT;
            if s.position[i] > 1.0 {
                s.position[i] = 1.0;
                s.velocity[i] = 0.0;
            } else if s.position[i] < -1.0 {
                s.position[i] = -1.0;
                s.velocity[i] = 0.0;
            }
        }
        s.step_idx += 1;

        let dist = self.distance();
        let action_cost = 0.01 * (force[0] * force[0] + force[1] * force[1]);
        let reward = -dist - action_cost;
        let done = self.state.step_idx >= MAX_STEPS || dist < GOAL_RADIUS;
        self.terminal = done;

        let mut info = std::collections::BTreeMap::new();
        info.insert("distance".to_string(), dist);
        info.insert("clipped".to_string(), clipped);
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            per_user_rewards: vec![reward],
            done,
            info,
        })
    }
}

impl Environment for PointMassEnv {
    fn observation_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn reset(&mut self) -> StepOutcome {
        let r = &mut self.rng;
        self.state = PointMassState {
            position: [
                r.gen_range(-SPAWN_HALF_WIDTH..SPAWN_HALF_WIDTH),
                r.gen_range(-SPAWN_HALF_WIDTH..SPAWN_HALF_WIDTH),
            ],
            velocity: [0.0; 2],
            target: [
                r.gen_range(-SPAWN_HALF_WIDTH..SPAWN_HALF_WIDTH),
                r.gen_range(-SPAWN_HALF_WIDTH..SPAWN_HALF_WIDTH),
            ],
            step_idx: 0,
        };
        self.terminal = false;
        self.started = true;
        StepOutcome::initial(self.observation(), 1)
    }

    /// Unit-box adapter: maps `[0,1]²` onto the native force box `[-1,1]²`.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if action.len() != 2 {
            return Err(EnvError::ActionLength {
                got: action.len(),
                expected: 2,
            });
        }
        self.step_force([2.0 * action[0] - 1.0, 2.0 * action[1] - 1.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_from_rest_keeps_position() {
        let mut env = PointMassEnv::new(1);
        env.reset();
        let p0 = env.state().position;
        let out = env.step_force([0.0, 0.0]).unwrap();
        assert_eq!(env.state().position, p0);
        assert_eq!(env.state().velocity, [0.0, 0.0]);
        assert!(out.reward <= 0.0);
    }

    #[test]
    fn at_target_reward_is_action_cost() {
        let mut env = PointMassEnv::new(2);
        env.reset();
        env.state.position = env.state.target;
        let a = [0.3, -0.4];
        let out = env.step_force(a).unwrap();
        let expected_cost = 0.01 * (a[0] * a[0] + a[1] * a[1]);
        // small drift from the applied force over one step
        assert!((out.reward + expected_cost).abs() < 0.01, "reward {}", out.reward);
        assert!(out.done, "within goal radius terminates");
    }

    #[test]
    fn constant_push_toward_target_closes_distance() {
        let mut env = PointMassEnv::new(3);
        env.reset();
        env.state.position = [-0.5, 0.0];
        env.state.target = [0.5, 0.0];
        let mut prev = env.distance();
        for _ in 0..10 {
            env.step_force([1.0, 0.0]).unwrap();
            let d = env.distance();
            assert!(d < prev, "distance must strictly decrease: {prev} -> {d}");
            prev = d;
        }
    }

    #[test]
    fn out_of_box_action_clipped_and_flagged() {
        let mut env = PointMassEnv::new(4);
        env.reset();
        let out = env.step_force([5.0, 0.0]).unwrap();
        assert_eq!(out.info["clipped"], 1.0);
        let out2 = env.step_force([0.5, -0.5]).unwrap();
        assert_eq!(out2.info["clipped"], 0.0);
    }

    #[test]
    fn deterministic_under_seed_and_bounded() {
        let run = || {
            let mut env = PointMassEnv::new(5);
            let mut trace = Vec::new();
            trace.extend(env.reset().observation);
            for i in 0..50 {
                let a = [(i as f64 * 0.37).sin() * 0.5 + 0.5, 0.25];
                let out = env.step(&a).unwrap();
                trace.push(out.reward);
                trace.extend(out.observation.clone());
                assert!(out.reward <= 0.0);
                for v in &out.observation {
                    assert!(v.is_finite());
                }
                if out.done {
                    break;
                }
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn random_policy_return_scale() {
        use rand::Rng;
        let mut rng = crate::rng::stream(6, "toy-random");
        let mut total = 0.0;
        let episodes = 20;
        for seed in 0..episodes {
            let mut env = PointMassEnv::new(100 + seed);
            env.reset();
            let mut ep = 0.0;
            loop {
                let a = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                let out = env.step(&a).unwrap();
                ep += out.reward;
                if out.done {
                    break;
                }
            }
            total += ep;
        }
        let mean = total / episodes as f64;
        assert!(
            (-160.0..=-40.0).contains(&mean),
            "random policy mean return {mean} outside expected band"
        );
    }
}
