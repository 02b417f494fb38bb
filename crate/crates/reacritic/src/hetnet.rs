//! Multi-user heterogeneous wireless network simulator.
//!
//! One base station serves `users` mobile users. Per step the agent hands in
//! a flat `users × 5` allocation matrix (uplink power, downlink power,
//! uplink bandwidth, downlink bandwidth, compute), which is projected onto
//! the feasible set (entries clipped to `[0,1]`; the shared downlink-power,
//! bandwidth and compute columns rescaled so each sums to at most one; the
//! uplink-power column is only clipped, a per-device limit). The simulator
//! then evaluates SINRs under Rician fading and distance path loss, Shannon
//! rates, energy efficiencies and service latency, pays out a per-user
//! multi-objective reward, advances Gaussian mobility, and resamples fading.
//!
//! # Observation layout
//!
//! The observation is `users × 14` values, user-major. Per user, in order,
//! each scaled by a fixed config-derived reference so entries are O(1):
//!
//! | idx | field                | scale reference               |
//! |-----|----------------------|-------------------------------|
//! | 0   | task demand (cycles) | `demand_range` upper bound    |
//! | 1   | last latency (s)     | `latency_cap`                 |
//! | 2   | position             | already in `[0,1]`            |
//! | 3   | CPU frequency (Hz)   | `CPU_FREQ_RANGE` upper bound  |
//! | 4   | type index           | `type_count − 1` (or 1)       |
//! | 5   | max uplink power (W) | `max_uplink_power`            |
//! | 6   | uplink fading gain   | unscaled (mean 1)             |
//! | 7   | path-loss gain       | gain at `distance_range` min  |
//! | 8   | uplink noise std     | `uplink_noise.sqrt()`         |
//! | 9   | max downlink power   | `max_downlink_power`          |
//! | 10  | downlink fading gain | unscaled (mean 1)             |
//! | 11  | downlink noise std   | `downlink_noise.sqrt()`       |
//! | 12  | compute capacity     | `compute_capacity`            |
//! | 13  | compute efficiency   | `RHO_RANGE` upper bound       |
//!
//! Per-user preference weights exist but are deliberately *not* observed.
//!
//! # Diagnostic info keys
//!
//! `rate_u_{m}`, `rate_d_{m}` (bits/s), `ee_u_{m}`, `ee_d_{m}` (bits/J),
//! `latency_{m}` (s), and `utility_{m}` for every user index `m`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::env::{EnvError, Environment, StepOutcome};
use crate::rng::{stream, Stream};

/// Local CPU frequency draw range (Hz).
pub const CPU_FREQ_RANGE: (f64, f64) = (5e8, 2e9);
/// Local compute-efficiency draw range.
pub const RHO_RANGE: (f64, f64) = (0.5, 2.0);
/// Observation fields per user.
pub const FIELDS_PER_USER: usize = 14;
/// Allocation factors per user.
pub const FACTORS_PER_USER: usize = 5;

fn default_users() -> usize { 5 }
fn default_mobility_sigma() -> f64 { 0.02 }
fn default_path_loss_exp() -> f64 { 2.5 }
fn default_rician_k() -> f64 { 3.0 }
fn default_max_uplink_power() -> f64 { 0.2 }
fn default_max_downlink_power() -> f64 { 1.0 }
fn default_bandwidth() -> f64 { 1e6 }
fn default_noise() -> f64 { 1e-9 }
fn default_compute_capacity() -> f64 { 1e9 }
fn default_distance_range() -> (f64, f64) { (5.0, 10.0) }
fn default_episode_len() -> usize { 200 }
fn default_latency_threshold_range() -> (f64, f64) { (0.5, 2.0) }
fn default_demand_range() -> (f64, f64) { (5e4, 5e5) }
fn default_type_count() -> usize { 3 }
fn default_latency_cap() -> f64 { 10.0 }

/// Full environment parameterization. Loadable from TOML.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "default_users")]
    pub users: usize,
    /// Std-dev of the per-step Gaussian position perturbation.
    #[serde(default = "default_mobility_sigma")]
    pub mobility_sigma: f64,
    #[serde(default = "default_path_loss_exp")]
    pub path_loss_exp: f64,
    /// Rician K-factor (linear).
    #[serde(default = "default_rician_k")]
    pub rician_k: f64,
    /// Per-user maximum uplink transmit power (W).
    #[serde(default = "default_max_uplink_power")]
    pub max_uplink_power: f64,
    /// Base-station maximum downlink transmit power (W).
    #[serde(default = "default_max_downlink_power")]
    pub max_downlink_power: f64,
    #[serde(default = "default_bandwidth")]
    pub uplink_bandwidth: f64,
    #[serde(default = "default_bandwidth")]
    pub downlink_bandwidth: f64,
    /// Uplink noise power σ² (W).
    #[serde(default = "default_noise")]
    pub uplink_noise: f64,
    #[serde(default = "default_noise")]
    pub downlink_noise: f64,
    /// Total compute capacity (cycles/s).
    #[serde(default = "default_compute_capacity")]
    pub compute_capacity: f64,
    /// Transmission distance draw range (m).
    #[serde(default = "default_distance_range")]
    pub distance_range: (f64, f64),
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    #[serde(default = "default_latency_threshold_range")]
    pub latency_threshold_range: (f64, f64),
    /// Task demand draw range (CPU cycles).
    #[serde(default = "default_demand_range")]
    pub demand_range: (f64, f64),
    #[serde(default = "default_type_count")]
    pub type_count: usize,
    /// Latency reported when rate or compute allocation is zero.
    #[serde(default = "default_latency_cap")]
    pub latency_cap: f64,
    /// Reward normalization reference for uplink rate; 0 means "use
    /// `uplink_bandwidth`" (the rate at SINR 1 with full bandwidth).
    #[serde(default)]
    pub uplink_rate_ref: f64,
    #[serde(default)]
    pub downlink_rate_ref: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("max_uplink_power", self.max_uplink_power),
            ("max_downlink_power", self.max_downlink_power),
            ("uplink_bandwidth", self.uplink_bandwidth),
            ("downlink_bandwidth", self.downlink_bandwidth),
            ("uplink_noise", self.uplink_noise),
            ("downlink_noise", self.downlink_noise),
            ("compute_capacity", self.compute_capacity),
            ("latency_cap", self.latency_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(EnvError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.users < 1 {
            return Err(EnvError::Config("users must be >= 1".into()));
        }
        if self.episode_len < 1 {
            return Err(EnvError::Config("episode_len must be >= 1".into()));
        }
        if self.type_count < 1 {
            return Err(EnvError::Config("type_count must be >= 1".into()));
        }
        if !(self.distance_range.0 > 0.0 && self.distance_range.1 >= self.distance_range.0) {
            return Err(EnvError::Config(format!(
                "distance_range must satisfy 0 < min <= max, got {:?}",
                self.distance_range
            )));
        }
        if self.mobility_sigma < 0.0 || self.rician_k < 0.0 {
            return Err(EnvError::Config(
                "mobility_sigma and rician_k must be >= 0".into(),
            ));
        }
        if !(self.demand_range.0 > 0.0 && self.demand_range.1 >= self.demand_range.0) {
            return Err(EnvError::Config(format!(
                "demand_range must satisfy 0 < min <= max, got {:?}",
                self.demand_range
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, EnvError> {
        let cfg: EnvConfig =
            toml::from_str(text).map_err(|e| EnvError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn uplink_rate_reference(&self) -> f64 {
        if self.uplink_rate_ref > 0.0 {
            self.uplink_rate_ref
        } else {
            self.uplink_bandwidth
        }
    }

    pub fn downlink_rate_reference(&self) -> f64 {
        if self.downlink_rate_ref > 0.0 {
            self.downlink_rate_ref
        } else {
            self.downlink_bandwidth
        }
    }
}

/// Per-type preference weights, hidden from the observation.
#[derive(Debug, Clone)]
pub struct TypeProfile {
    /// Weights on uplink rate, downlink rate, uplink EE, downlink EE, latency.
    pub utility_weights: [f64; 5],
    /// Weights on uplink rate, downlink rate, uplink bandwidth, downlink
    /// bandwidth, uplink power², downlink power², latency violation.
    pub reward_weights: [f64; 7],
}

/// One user's physical state.
#[derive(Debug, Clone)]
pub struct UserState {
    /// Task demand d (CPU cycles).
    pub demand: f64,
    /// Latency from the most recent step (s); 0 before the first step.
    pub latency: f64,
    /// Normalized position in [0, 1].
    pub position: f64,
    /// Local CPU frequency (Hz).
    pub cpu_freq: f64,
    pub user_type: usize,
    /// Per-device uplink power cap (W).
    pub max_uplink_power: f64,
    /// Uplink Rician power gain.
    pub uplink_gain: f64,
    /// Downlink Rician power gain.
    pub downlink_gain: f64,
    /// Large-scale path gain ζ = D^(−γ).
    pub path_gain: f64,
    /// Switched capacitance coefficient κ.
    pub kappa: f64,
    /// Compute efficiency ρ, stored as exactly 1/(κ·f).
    pub compute_efficiency: f64,
    pub latency_threshold: f64,
    /// Transmission distance (m).
    pub distance: f64,
}

/// Projected allocation factors, one `[p_u, p_d, b_u, b_d, c]` row per user.
#[derive(Debug, Clone)]
pub struct GlobalAction {
    rows: Vec<[f64; FACTORS_PER_USER]>,
}

impl GlobalAction {
    pub fn users(&self) -> usize {
        self.rows.len()
    }
    pub fn uplink_power(&self, m: usize) -> f64 {
        self.rows[m][0]
    }
    pub fn downlink_power(&self, m: usize) -> f64 {
        self.rows[m][1]
    }
    pub fn uplink_bandwidth(&self, m: usize) -> f64 {
        self.rows[m][2]
    }
    pub fn downlink_bandwidth(&self, m: usize) -> f64 {
        self.rows[m][3]
    }
    pub fn compute(&self, m: usize) -> f64 {
        self.rows[m][4]
    }
    pub fn column_sum(&self, col: usize) -> f64 {
        self.rows.iter().map(|r| r[col]).sum()
    }
}

/// Clips every factor to `[0,1]`, then rescales each shared-resource column
/// (downlink power, both bandwidths, compute) by `1/S` when its sum `S`
/// exceeds 1. The uplink-power column is only clipped.
pub fn project_action(raw: &[f64], users: usize) -> GlobalAction {
    assert_eq!(
        raw.len(),
        users * FACTORS_PER_USER,
        "raw action length {} for {} users",
        raw.len(),
        users
    );
    let mut rows: Vec<[f64; FACTORS_PER_USER]> = (0..users)
        .map(|m| {
            let mut row = [0.0; FACTORS_PER_USER];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = raw[m * FACTORS_PER_USER + j].clamp(0.0, 1.0);
            }
            row
        })
        .collect();
    for col in 1..FACTORS_PER_USER {
        let sum: f64 = rows.iter().map(|r| r[col]).sum();
        if sum > 1.0 {
            for row in rows.iter_mut() {
                row[col] /= sum;
            }
        }
    }
    GlobalAction { rows }
}

/// Large-scale path gain `D^(−γ)`.
pub fn path_loss(distance_m: f64, exponent: f64) -> Result<f64, EnvError> {
    if distance_m <= 0.0 {
        return Err(EnvError::Domain(format!(
            "path_loss needs distance > 0, got {distance_m}"
        )));
    }
    Ok(distance_m.powf(-exponent))
}

/// Power gain of a Rician fading envelope with K-factor `k`, normalized to
/// unit mean power. `k = 0` reduces to Rayleigh; `k = ∞` is pure
/// line-of-sight with gain exactly 1.
pub fn sample_rician(k: f64, rng: &mut Stream) -> f64 {
    assert!(k >= 0.0, "rician K-factor must be >= 0");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n1: f64 = normal.sample(rng);
    let n2: f64 = normal.sample(rng);
    let los = (1.0 / (1.0 + 1.0 / k)).sqrt(); // sqrt(K/(K+1)), stable at K=0 and K=∞
    let scatter = (1.0 / (2.0 * (k + 1.0))).sqrt();
    let re = los + scatter * n1;
    let im = scatter * n2;
    re * re + im * im
}

/// Uplink SINR of user `m`: own received power over the other users'
/// interference plus noise.
pub fn sinr_uplink(m: usize, action: &GlobalAction, users: &[UserState], noise: f64) -> f64 {
    let num = action.uplink_power(m) * users[m].max_uplink_power * users[m].uplink_gain
        * users[m].path_gain;
    let mut denom = noise;
    for (j, u) in users.iter().enumerate() {
        if j != m {
            denom += action.uplink_power(j) * u.max_uplink_power * u.uplink_gain * u.path_gain;
        }
    }
    num / denom
}

/// Downlink SINR of user `m`; the base station's power cap appears in both
/// the desired and interfering terms.
pub fn sinr_downlink(
    m: usize,
    action: &GlobalAction,
    users: &[UserState],
    max_downlink_power: f64,
    noise: f64,
) -> f64 {
    let num = action.downlink_power(m) * max_downlink_power * users[m].downlink_gain
        * users[m].path_gain;
    let mut denom = noise;
    for (j, u) in users.iter().enumerate() {
        if j != m {
            denom += action.downlink_power(j) * max_downlink_power * u.downlink_gain * u.path_gain;
        }
    }
    num / denom
}

/// Shannon rate `b·B·log2(1 + SINR)` in bits/s.
pub fn rate(bandwidth_factor: f64, max_bandwidth: f64, sinr: f64) -> f64 {
    bandwidth_factor * max_bandwidth * (1.0 + sinr).log2()
}

/// Rate per unit transmit power (bits/J); zero allocated power maps to zero
/// by convention.
pub fn energy_efficiency(rate: f64, power_factor: f64, max_power: f64) -> f64 {
    if power_factor == 0.0 {
        0.0
    } else {
        rate / (power_factor * max_power)
    }
}

/// Transmission plus processing latency in seconds; degenerate allocations
/// (zero rate or zero compute share) return `cap`.
pub fn latency(
    demand: f64,
    uplink_rate: f64,
    compute_factor: f64,
    compute_capacity: f64,
    compute_efficiency: f64,
    cap: f64,
) -> f64 {
    if uplink_rate <= 0.0 || compute_factor <= 0.0 {
        return cap;
    }
    let transmit = demand / uplink_rate;
    let process = demand / (compute_factor * compute_capacity * compute_efficiency);
    (transmit + process).min(cap)
}

/// Everything the simulator derives for one user in one step.
#[derive(Debug, Clone, Copy)]
pub struct UserMetrics {
    pub sinr_uplink: f64,
    pub sinr_downlink: f64,
    pub rate_uplink: f64,
    pub rate_downlink: f64,
    pub ee_uplink: f64,
    pub ee_downlink: f64,
    pub latency: f64,
}

/// Weighted multi-objective utility of user `m` (diagnostic; rates and EE
/// enter raw).
pub fn utility(metrics: &UserMetrics, weights: &[f64; 5]) -> f64 {
    weights[0] * metrics.rate_uplink + weights[1] * metrics.rate_downlink
        + weights[2] * metrics.ee_uplink
        + weights[3] * metrics.ee_downlink
        - weights[4] * metrics.latency
}

/// Per-user training reward: normalized rates minus bandwidth, squared-power
/// and latency-violation penalties.
pub fn reward(
    m: usize,
    action: &GlobalAction,
    metrics: &UserMetrics,
    weights: &[f64; 7],
    latency_threshold: f64,
    uplink_rate_ref: f64,
    downlink_rate_ref: f64,
) -> f64 {
    let pu = action.uplink_power(m);
    let pd = action.downlink_power(m);
    let violation = if metrics.latency > latency_threshold { 1.0 } else { 0.0 };
    weights[0] * metrics.rate_uplink / uplink_rate_ref
        + weights[1] * metrics.rate_downlink / downlink_rate_ref
        - weights[2] * action.uplink_bandwidth(m)
        - weights[3] * action.downlink_bandwidth(m)
        - weights[4] * pu * pu
        - weights[5] * pd * pd
        - weights[6] * violation
}

/// The simulator. One instance is single-threaded; all randomness flows from
/// the config seed through one stream, so (config, seed, action sequence)
/// fully determines every output.
pub struct HetNetEnv {
    config: EnvConfig,
    rng: Stream,
    users: Vec<UserState>,
    profiles: Vec<TypeProfile>,
    step_idx: usize,
    terminal: bool,
    started: bool,
}

impl HetNetEnv {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let rng = stream(config.seed, "hetnet");
        Ok(HetNetEnv {
            config,
            rng,
            users: Vec::new(),
            profiles: Vec::new(),
            step_idx: 0,
            terminal: false,
            started: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn users(&self) -> &[UserState] {
        &self.users
    }

    pub fn profiles(&self) -> &[TypeProfile] {
        &self.profiles
    }

    fn draw_profiles(&mut self) {
        self.profiles = (0..self.config.type_count)
            .map(|_| {
                let u = |rng: &mut Stream, lo: f64, hi: f64| rng.gen_range(lo..hi);
                TypeProfile {
                    utility_weights: [
                        u(&mut self.rng, 0.1, 1.0),
                        u(&mut self.rng, 0.1, 1.0),
                        u(&mut self.rng, 0.1, 1.0),
                        u(&mut self.rng, 0.1, 1.0),
                        u(&mut self.rng, 0.1, 1.0),
                    ],
                    reward_weights: [
                        u(&mut self.rng, 0.5, 1.5),
                        u(&mut self.rng, 0.5, 1.5),
                        u(&mut self.rng, 0.1, 0.4),
                        u(&mut self.rng, 0.1, 0.4),
                        u(&mut self.rng, 0.1, 0.4),
                        u(&mut self.rng, 0.1, 0.4),
                        u(&mut self.rng, 0.5, 1.5),
                    ],
                }
            })
            .collect();
    }

    fn draw_users(&mut self) {
        let cfg = self.config.clone();
        self.users = (0..cfg.users)
            .map(|_| {
                let position = self.rng.gen_range(0.0..1.0);
                let distance = self.rng.gen_range(cfg.distance_range.0..=cfg.distance_range.1);
                let demand = self.rng.gen_range(cfg.demand_range.0..=cfg.demand_range.1);
                let latency_threshold = self
                    .rng
                    .gen_range(cfg.latency_threshold_range.0..=cfg.latency_threshold_range.1);
                let user_type = self.rng.gen_range(0..cfg.type_count);
                let cpu_freq = self.rng.gen_range(CPU_FREQ_RANGE.0..=CPU_FREQ_RANGE.1);
                let rho_target = self.rng.gen_range(RHO_RANGE.0..=RHO_RANGE.1);
                let kappa = 1.0 / (rho_target * cpu_freq);
                let uplink_gain = sample_rician(cfg.rician_k, &mut self.rng);
                let downlink_gain = sample_rician(cfg.rician_k, &mut self.rng);
                let path_gain = path_loss(distance, cfg.path_loss_exp).expect("distance > 0");
                UserState {
                    demand,
                    latency: 0.0,
                    position,
                    cpu_freq,
                    user_type,
                    max_uplink_power: cfg.max_uplink_power,
                    uplink_gain,
                    downlink_gain,
                    path_gain,
                    kappa,
                    compute_efficiency: 1.0 / (kappa * cpu_freq),
                    latency_threshold,
                    distance,
                }
            })
            .collect();
    }

    /// Gaussian position update with clipping to `[0,1]`; the transmission
    /// distance moves proportionally to the realized position delta and
    /// stays inside `distance_range`, after which the path gain is
    /// recomputed.
    pub fn advance_mobility(&mut self) {
        let sigma = self.config.mobility_sigma;
        let (d_min, d_max) = self.config.distance_range;
        let gamma = self.config.path_loss_exp;
        let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
        for u in self.users.iter_mut() {
            let delta: f64 = normal.sample(&mut self.rng);
            let new_pos = (u.position + delta).clamp(0.0, 1.0);
            let realized = new_pos - u.position;
            u.position = new_pos;
            u.distance = (u.distance + realized * (d_max - d_min)).clamp(d_min, d_max);
            u.path_gain = path_loss(u.distance, gamma).expect("distance > 0");
        }
    }

    fn resample_fading(&mut self) {
        let k = self.config.rician_k;
        for u in self.users.iter_mut() {
            u.uplink_gain = sample_rician(k, &mut self.rng);
            u.downlink_gain = sample_rician(k, &mut self.rng);
        }
    }

    /// Derives all per-user metrics for a projected action against the
    /// current channel state.
    pub fn metrics(&self, action: &GlobalAction) -> Vec<UserMetrics> {
        let cfg = &self.config;
        (0..self.users.len())
            .map(|m| {
                let su = sinr_uplink(m, action, &self.users, cfg.uplink_noise);
                let sd = sinr_downlink(
                    m,
                    action,
                    &self.users,
                    cfg.max_downlink_power,
                    cfg.downlink_noise,
                );
                let ru = rate(action.uplink_bandwidth(m), cfg.uplink_bandwidth, su);
                let rd = rate(action.downlink_bandwidth(m), cfg.downlink_bandwidth, sd);
                UserMetrics {
                    sinr_uplink: su,
                    sinr_downlink: sd,
                    rate_uplink: ru,
                    rate_downlink: rd,
                    ee_uplink: energy_efficiency(ru, action.uplink_power(m), cfg.max_uplink_power),
                    ee_downlink: energy_efficiency(
                        rd,
                        action.downlink_power(m),
                        cfg.max_downlink_power,
                    ),
                    latency: latency(
                        self.users[m].demand,
                        ru,
                        action.compute(m),
                        cfg.compute_capacity,
                        self.users[m].compute_efficiency,
                        cfg.latency_cap,
                    ),
                }
            })
            .collect()
    }

    pub fn observation(&self) -> Vec<f64> {
        let cfg = &self.config;
        let type_scale = (cfg.type_count.saturating_sub(1)).max(1) as f64;
        let path_ref = path_loss(cfg.distance_range.0, cfg.path_loss_exp).expect("d_min > 0");
        let mut obs = Vec::with_capacity(self.users.len() * FIELDS_PER_USER);
        for u in &self.users {
            obs.push(u.demand / cfg.demand_range.1);
            obs.push(u.latency / cfg.latency_cap);
            obs.push(u.position);
            obs.push(u.cpu_freq / CPU_FREQ_RANGE.1);
            obs.push(u.user_type as f64 / type_scale);
            obs.push(u.max_uplink_power / cfg.max_uplink_power);
            obs.push(u.uplink_gain);
            obs.push(u.path_gain / path_ref);
            obs.push(1.0); // uplink noise std over its own reference
            obs.push(cfg.max_downlink_power / cfg.max_downlink_power);
            obs.push(u.downlink_gain);
            obs.push(1.0); // downlink noise std over its own reference
            obs.push(cfg.compute_capacity / cfg.compute_capacity);
            obs.push(u.compute_efficiency / RHO_RANGE.1);
        }
        obs
    }

    /// Per-user rewards and diagnostics for a projected action.
    pub fn score(
        &self,
        action: &GlobalAction,
        metrics: &[UserMetrics],
    ) -> (Vec<f64>, std::collections::BTreeMap<String, f64>) {
        let cfg = &self.config;
        let mut per_user = Vec::with_capacity(self.users.len());
        let mut info = std::collections::BTreeMap::new();
        for (m, u) in self.users.iter().enumerate() {
            let profile = &self.profiles[u.user_type];
            let r = reward(
                m,
                action,
                &metrics[m],
                &profile.reward_weights,
                u.latency_threshold,
                cfg.uplink_rate_reference(),
                cfg.downlink_rate_reference(),
            );
            per_user.push(r);
            info.insert(format!("rate_u_{m}"), metrics[m].rate_uplink);
            info.insert(format!("rate_d_{m}"), metrics[m].rate_downlink);
            info.insert(format!("ee_u_{m}"), metrics[m].ee_uplink);
            info.insert(format!("ee_d_{m}"), metrics[m].ee_downlink);
            info.insert(format!("latency_{m}"), metrics[m].latency);
            info.insert(
                format!("utility_{m}"),
                utility(&metrics[m], &profile.utility_weights),
            );
        }
        (per_user, info)
    }
}

impl Environment for HetNetEnv {
    fn observation_dim(&self) -> usize {
        self.config.users * FIELDS_PER_USER
    }

    fn action_dim(&self) -> usize {
        self.config.users * FACTORS_PER_USER
    }

    fn reset(&mut self) -> StepOutcome {
        self.draw_profiles();
        self.draw_users();
        self.step_idx = 0;
        self.terminal = false;
        self.started = true;
        StepOutcome::initial(self.observation(), self.config.users)
    }

    fn step(&mut self, raw_action: &[f64]) -> Result<StepOutcome, EnvError> {
        if !self.started || self.terminal {
            return Err(EnvError::EpisodeTerminated);
        }
        if raw_action.len() != self.action_dim() {
            return Err(EnvError::ActionLength {
                got: raw_action.len(),
                expected: self.action_dim(),
            });
        }
        let action = project_action(raw_action, self.config.users);
        let metrics = self.metrics(&action);
        for (u, m) in self.users.iter_mut().zip(&metrics) {
            u.latency = m.latency;
        }
        let (per_user, info) = self.score(&action, &metrics);
        let reward = per_user.iter().sum::<f64>() / per_user.len() as f64;

        self.step_idx += 1;
        let done = self.step_idx == self.config.episode_len;
        self.terminal = done;

        self.advance_mobility();
        self.resample_fading();

        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            per_user_rewards: per_user,
            done,
            info,
        })
    }
}
