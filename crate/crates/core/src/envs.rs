//! Episodic environments with stochastic initial states, and rollout
//! collection.
//!
//! Every environment is a stateless value: the full Markov state lives in the
//! state vector, so `step` is a pure function of `(state, action)`. Rewards
//! are evaluated on the pre-transition state. Actions outside the declared
//! bounds are clipped before they reach the dynamics and the action penalty;
//! the policy's log density is always recorded for the unclipped sample.
//!
//! State layouts:
//!
//! * `point_goal` (7): agent x, y; velocity x, y; goal x, y; initial
//!   agent-to-goal distance (the normalization constant).
//! * `reach_box` (10): agent x, y, lift height z; velocity x, y, z; object x,
//!   y, height; grasp flag (0 or 1).
//! * `bimodal` (2): position; initial position.

use std::fmt::Debug;

use crate::error::{DncError, Result};
use crate::nn::Mat;
use crate::partition::Partition;
use crate::policy::{gaussian_log_density, GaussianPolicy};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub action_bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// One episode. `states` holds one more entry than the other sequences (the
/// terminal state).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeRecord {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub context_id: Option<usize>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("episode has a state")
    }
}

pub trait Env: Send + Sync + Debug {
    fn name(&self) -> &'static str;
    fn spec(&self) -> &MdpSpec;
    /// Closed interval containing every reward the env can emit.
    fn reward_range(&self) -> (f64, f64);
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    /// Transition and reward for a raw (unclipped) action. `done` is only
    /// set for env-specific termination; the horizon is enforced by rollouts.
    fn step(&self, state: &[f64], action: &[f64]) -> Result<StepResult>;
    fn success(&self, episode: &EpisodeRecord) -> bool;
}

pub const ENV_NAMES: [&str; 3] = ["point_goal", "reach_box", "bimodal"];

pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "point_goal" => Ok(Box::new(PointGoal2D::new())),
        "reach_box" => Ok(Box::new(ReachBox2D::new())),
        "bimodal" => Ok(Box::new(Bimodal1D::new())),
        other => Err(DncError::Config(format!(
            "unknown env {other:?}; expected one of {ENV_NAMES:?}"
        ))),
    }
}

fn check_action(spec: &MdpSpec, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
    if state.len() != spec.state_dim {
        return Err(DncError::shape("env state", spec.state_dim, state.len()));
    }
    if action.len() != spec.action_dim {
        return Err(DncError::shape("env action", spec.action_dim, action.len()));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(DncError::Input(format!("non-finite action {action:?}")));
    }
    Ok(action
        .iter()
        .zip(&spec.action_bounds)
        .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
        .collect())
}

const DT: f64 = 0.05;
const DAMPING: f64 = 0.9;

fn dist2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// Point mass steering to a goal drawn on a circle of radius 5.
///
/// Reward `1 - d/d0 - 0.01 |a|`, with `d0` the initial distance to the goal.
#[derive(Debug, Clone)]
pub struct PointGoal2D {
    spec: MdpSpec,
}

impl PointGoal2D {
    pub const GOAL_RADIUS: f64 = 5.0;
    pub const ACTION_LIMIT: f64 = 4.0;
    pub const ARENA: f64 = 10.0;
    pub const SUCCESS_DISTANCE: f64 = 0.5;

    pub fn new() -> Self {
        Self {
            spec: MdpSpec {
                state_dim: 7,
                action_dim: 2,
                horizon: 100,
                action_bounds: vec![(-Self::ACTION_LIMIT, Self::ACTION_LIMIT); 2],
            },
        }
    }

    pub fn distance_to_goal(state: &[f64]) -> f64 {
        dist2(state[0], state[1], state[4], state[5])
    }
}

impl Default for PointGoal2D {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointGoal2D {
    fn name(&self) -> &'static str {
        "point_goal"
    }

    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reward_range(&self) -> (f64, f64) {
        // Agent confined to the arena square; d0 is the goal radius.
        let max_d = Self::ARENA * 2f64.sqrt() + Self::GOAL_RADIUS;
        let max_a = Self::ACTION_LIMIT * 2f64.sqrt();
        (1.0 - max_d / (Self::GOAL_RADIUS * (1.0 - 1e-12)) - 0.01 * max_a, 1.0)
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let theta = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
        let (gx, gy) = (Self::GOAL_RADIUS * theta.cos(), Self::GOAL_RADIUS * theta.sin());
        let d0 = dist2(0.0, 0.0, gx, gy);
        vec![0.0, 0.0, 0.0, 0.0, gx, gy, d0]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Result<StepResult> {
        let a = check_action(&self.spec, state, action)?;
        let d_norm = Self::distance_to_goal(state) / state[6];
        let reward = 1.0 - d_norm - 0.01 * (a[0] * a[0] + a[1] * a[1]).sqrt();
        let mut next = state.to_vec();
        for k in 0..2 {
            next[k] = (state[k] + state[2 + k] * DT).clamp(-Self::ARENA, Self::ARENA);
            next[2 + k] = DAMPING * state[2 + k] + a[k] * DT;
        }
        Ok(StepResult {
            next_state: next,
            reward,
            done: false,
        })
    }

    fn success(&self, episode: &EpisodeRecord) -> bool {
        Self::distance_to_goal(episode.final_state()) < Self::SUCCESS_DISTANCE
    }
}

/// Reach an object placed uniformly in a 0.30 x 0.30 square, grasp it by
/// arriving low, then lift it.
///
/// Reward is the indicator that the object is held within 0.08 of the agent
/// and raised above 0.1.
#[derive(Debug, Clone)]
pub struct ReachBox2D {
    spec: MdpSpec,
}

impl ReachBox2D {
    pub const SQUARE: f64 = 0.30;
    pub const GRASP_RADIUS: f64 = 0.08;
    pub const GRASP_MAX_HEIGHT: f64 = 0.02;
    pub const LIFT_THRESHOLD: f64 = 0.1;
    pub const MAX_HEIGHT: f64 = 0.5;
    pub const WORKSPACE: f64 = 0.5;
    pub const SUCCESS_STEPS: usize = 10;

    pub fn new() -> Self {
        Self {
            spec: MdpSpec {
                state_dim: 10,
                action_dim: 3,
                horizon: 150,
                action_bounds: vec![(-1.0, 1.0); 3],
            },
        }
    }

    pub fn indicator(state: &[f64]) -> bool {
        state[9] > 0.5
            && dist2(state[0], state[1], state[6], state[7]) < Self::GRASP_RADIUS
            && state[8] > Self::LIFT_THRESHOLD
    }
}

impl Default for ReachBox2D {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for ReachBox2D {
    fn name(&self) -> &'static str {
        "reach_box"
    }

    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reward_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let h = Self::SQUARE / 2.0;
        let ox = rng.uniform_range(-h, h);
        let oy = rng.uniform_range(-h, h);
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ox, oy, 0.0, 0.0]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Result<StepResult> {
        let a = check_action(&self.spec, state, action)?;
        let reward = if Self::indicator(state) { 1.0 } else { 0.0 };
        let mut next = state.to_vec();
        let limits = [
            (-Self::WORKSPACE, Self::WORKSPACE),
            (-Self::WORKSPACE, Self::WORKSPACE),
            (0.0, Self::MAX_HEIGHT),
        ];
        for k in 0..3 {
            let moved = state[k] + state[3 + k] * DT;
            let clamped = moved.clamp(limits[k].0, limits[k].1);
            next[k] = clamped;
            next[3 + k] = if clamped != moved {
                0.0
            } else {
                DAMPING * state[3 + k] + a[k] * DT
            };
        }
        let held = state[9] > 0.5;
        if held {
            next[6] = state[6] + (next[0] - state[0]);
            next[7] = state[7] + (next[1] - state[1]);
            next[8] = next[2];
        } else if dist2(next[0], next[1], state[6], state[7]) < Self::GRASP_RADIUS && next[2] < Self::GRASP_MAX_HEIGHT {
            next[8] = next[2];
            next[9] = 1.0;
        } else {
            next[8] = 0.0;
        }
        Ok(StepResult {
            next_state: next,
            reward,
            done: false,
        })
    }

    fn success(&self, episode: &EpisodeRecord) -> bool {
        episode.rewards.iter().filter(|r| **r >= 1.0).count() >= Self::SUCCESS_STEPS
    }
}

/// One-dimensional diagnostic: start on either side of the origin and
/// settle at the target on that same side.
///
/// Reward `-(x - 3 sign(x0))^2 - 0.01 a^2`, dynamics `x <- x + 0.1 a`.
#[derive(Debug, Clone)]
pub struct Bimodal1D {
    spec: MdpSpec,
}

impl Bimodal1D {
    pub const TARGET: f64 = 3.0;
    pub const STEP: f64 = 0.1;
    pub const POSITION_LIMIT: f64 = 5.0;
    pub const SUCCESS_TOLERANCE: f64 = 0.25;

    pub fn new() -> Self {
        Self {
            spec: MdpSpec {
                state_dim: 2,
                action_dim: 1,
                horizon: 100,
                action_bounds: vec![(-1.0, 1.0)],
            },
        }
    }

    pub fn target_for(initial_position: f64) -> f64 {
        Self::TARGET * initial_position.signum()
    }
}

impl Default for Bimodal1D {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Bimodal1D {
    fn name(&self) -> &'static str {
        "bimodal"
    }

    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reward_range(&self) -> (f64, f64) {
        let worst = Self::POSITION_LIMIT + Self::TARGET;
        (-(worst * worst) - 0.01, 0.0)
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let x = side * rng.uniform_range(1.0, 2.0);
        vec![x, x]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Result<StepResult> {
        let a = check_action(&self.spec, state, action)?;
        let err = state[0] - Self::target_for(state[1]);
        let reward = -(err * err) - 0.01 * a[0] * a[0];
        let x = (state[0] + Self::STEP * a[0]).clamp(-Self::POSITION_LIMIT, Self::POSITION_LIMIT);
        Ok(StepResult {
            next_state: vec![x, state[1]],
            reward,
            done: false,
        })
    }

    fn success(&self, episode: &EpisodeRecord) -> bool {
        let x0 = episode.initial_state()[0];
        (episode.final_state()[0] - Self::target_for(x0)).abs() < Self::SUCCESS_TOLERANCE
    }
}

/// How a rollout picks actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Mean,
}

/// Rolls one episode from `initial_state` until the env terminates or the
/// horizon is reached.
pub fn rollout(
    env: &dyn Env,
    policy: &GaussianPolicy,
    initial_state: Vec<f64>,
    mode: ActionMode,
    rng: &mut Rng,
) -> Result<EpisodeRecord> {
    let horizon = env.spec().horizon;
    let mut ep = EpisodeRecord {
        states: Vec::with_capacity(horizon + 1),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        log_probs: Vec::with_capacity(horizon),
        context_id: None,
    };
    let mut state = initial_state;
    for _ in 0..horizon {
        let (action, log_prob) = match mode {
            ActionMode::Sample => {
                let s = policy.sample_action(&state, rng)?;
                (s.action, s.log_prob)
            }
            ActionMode::Mean => {
                let m = policy.mean(&state)?;
                let lp = gaussian_log_density(&m, policy.log_std(), &m);
                (m, lp)
            }
        };
        let step = env.step(&state, &action)?;
        if !step.reward.is_finite() {
            return Err(DncError::Numerical(format!("non-finite reward from {}", env.name())));
        }
        ep.states.push(std::mem::replace(&mut state, step.next_state));
        ep.actions.push(action);
        ep.rewards.push(step.reward);
        ep.log_probs.push(log_prob);
        if step.done {
            break;
        }
    }
    ep.states.push(state);
    Ok(ep)
}

/// Consecutive rejected initial states after which a context is declared
/// starved (its empirical probability is below 1e-4).
pub const STARVATION_ATTEMPTS: usize = 10_000;

/// Draws an initial state, rejection-sampling into `context` when given.
pub fn sample_initial_state(env: &dyn Env, context: Option<(&Partition, usize)>, rng: &mut Rng) -> Result<Vec<f64>> {
    let Some((partition, idx)) = context else {
        return Ok(env.reset(rng));
    };
    if idx >= partition.k() {
        return Err(DncError::Input(format!(
            "context {idx} out of range for k = {}",
            partition.k()
        )));
    }
    for _ in 0..STARVATION_ATTEMPTS {
        let s = env.reset(rng);
        if partition.assign(&s)? == idx {
            return Ok(s);
        }
    }
    Err(DncError::ContextStarvation {
        context: idx,
        accepted: 0,
        attempts: STARVATION_ATTEMPTS,
    })
}

/// Rolls out complete episodes with sampled actions until at least
/// `total_timesteps` steps are gathered.
pub fn collect_trajectories(
    env: &dyn Env,
    policy: &GaussianPolicy,
    context: Option<(&Partition, usize)>,
    total_timesteps: usize,
    rng: &mut Rng,
) -> Result<Vec<EpisodeRecord>> {
    let horizon = env.spec().horizon;
    if total_timesteps < horizon {
        return Err(DncError::Config(format!(
            "batch of {total_timesteps} timesteps is shorter than the horizon {horizon}"
        )));
    }
    let mut episodes = Vec::new();
    let mut steps = 0;
    while steps < total_timesteps {
        let s0 = sample_initial_state(env, context, rng)?;
        let mut ep = rollout(env, policy, s0, ActionMode::Sample, rng)?;
        ep.context_id = context.map(|(_, i)| i);
        steps += ep.len();
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Mean return and success rate over a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: usize,
    pub timesteps: usize,
}

pub fn episode_stats(env: &dyn Env, episodes: &[EpisodeRecord]) -> EpisodeStats {
    let n = episodes.len().max(1) as f64;
    EpisodeStats {
        mean_return: episodes.iter().map(|e| e.total_return()).sum::<f64>() / n,
        success_rate: episodes.iter().filter(|e| env.success(e)).count() as f64 / n,
        episodes: episodes.len(),
        timesteps: episodes.iter().map(|e| e.len()).sum(),
    }
}

/// Evaluates a policy on the unrestricted env with mean actions.
pub fn evaluate_policy(env: &dyn Env, policy: &GaussianPolicy, episodes: usize, rng: &mut Rng) -> Result<EpisodeStats> {
    let eps = (0..episodes)
        .map(|_| {
            let s0 = env.reset(rng);
            rollout(env, policy, s0, ActionMode::Mean, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(episode_stats(env, &eps))
}

/// Flattens the visited (non-terminal) states of episodes into rows.
pub fn stack_states(episodes: &[EpisodeRecord]) -> Result<Mat> {
    let rows: Vec<&[f64]> = episodes
        .iter()
        .flat_map(|e| e.states[..e.len()].iter().map(|s| s.as_slice()))
        .collect();
    Mat::from_rows(&rows)
}

pub fn stack_actions(episodes: &[EpisodeRecord]) -> Result<Mat> {
    let rows: Vec<&[f64]> = episodes
        .iter()
        .flat_map(|e| e.actions.iter().map(|a| a.as_slice()))
        .collect();
    Mat::from_rows(&rows)
}
