//! Analytic toy control tasks with an episode driver and action repeat.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::planner::PlanningModel;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Driver steps per episode.
    pub max_episode_steps: usize,
    pub action_repeat: usize,
}

impl EnvSpec {
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| a.max(lo).min(hi))
            .collect()
    }
}

/// Deterministic simulator of one task.
pub trait Dynamics: Debug + Send + Sync {
    fn spec(&self) -> &EnvSpec;

    fn state_dim(&self) -> usize;

    fn initial_state(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn observe(&self, state: &[f64]) -> Vec<f64>;

    /// Advances `state` by one simulator substep under an in-bounds action
    /// and returns the substep reward.
    fn substep(&self, state: &mut [f64], action: &[f64]) -> f64;
}

pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const PENDULUM_MASS: f64 = 1.0;
pub const PENDULUM_LENGTH: f64 = 1.0;
pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_TORQUE_SCALE: f64 = 2.0;
/// Largest raw pendulum cost: π² + 0.1·8² + 0.001·2².
pub const PENDULUM_COST_BOUND: f64 = PI * PI + 0.1 * 64.0 + 0.001 * 4.0;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Swing-up with `θ = 0` upright. State `(θ, θ̇)`, observation
/// `(cos θ, sin θ, θ̇/8)`.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
}

impl Pendulum {
    pub fn new(max_episode_steps: usize, action_repeat: usize) -> Self {
        Pendulum {
            spec: EnvSpec {
                name: "pendulum",
                obs_dim: 3,
                act_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps,
                action_repeat,
            },
        }
    }

    pub fn reward(theta: f64, theta_dot: f64, u: f64) -> f64 {
        let torque = PENDULUM_TORQUE_SCALE * u;
        let cost = wrap_angle(theta).powi(2) + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque;
        (PENDULUM_COST_BOUND - cost) / PENDULUM_COST_BOUND
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Pendulum::new(100, 2)
    }
}

impl Dynamics for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn initial_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-PI..PI), rng.random_range(-1.0..1.0)]
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0].cos(), state[0].sin(), state[1] / PENDULUM_MAX_SPEED]
    }

    fn substep(&self, state: &mut [f64], action: &[f64]) -> f64 {
        let (theta, theta_dot) = (state[0], state[1]);
        let u = action[0];
        let reward = Pendulum::reward(theta, theta_dot, u);
        let (g, m, l) = (PENDULUM_GRAVITY, PENDULUM_MASS, PENDULUM_LENGTH);
        let accel = 3.0 * g / (2.0 * l) * theta.sin() + 3.0 / (m * l * l) * PENDULUM_TORQUE_SCALE * u;
        let new_dot = (theta_dot + accel * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
        state[0] = theta + new_dot * PENDULUM_DT;
        state[1] = new_dot;
        reward
    }
}

pub const POINTMASS_DAMPING: f64 = 0.95;
pub const POINTMASS_DT: f64 = 0.05;
pub const POINTMASS_GOAL: [f64; 2] = [0.5, 0.5];

/// Damped point in the unit box pushed by a 2-D force. State
/// `(x, y, ẋ, ẏ)` is also the observation.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
}

impl PointMass {
    pub fn new(max_episode_steps: usize, action_repeat: usize) -> Self {
        PointMass {
            spec: EnvSpec {
                name: "pointmass",
                obs_dim: 4,
                act_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                max_episode_steps,
                action_repeat,
            },
        }
    }

    pub fn reward(x: f64, y: f64) -> f64 {
        let dist = ((x - POINTMASS_GOAL[0]).powi(2) + (y - POINTMASS_GOAL[1]).powi(2)).sqrt();
        (-4.0 * dist).exp()
    }
}

impl Default for PointMass {
    fn default() -> Self {
        PointMass::new(100, 2)
    }
}

impl Dynamics for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn initial_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0, 0.0]
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }

    /// Velocity is damped then pushed; a wall hit zeroes that velocity
    /// component.
    fn substep(&self, state: &mut [f64], action: &[f64]) -> f64 {
        for axis in 0..2 {
            let v = POINTMASS_DAMPING * state[2 + axis] + POINTMASS_DT * action[axis];
            let p = state[axis] + POINTMASS_DT * v;
            state[axis] = p.clamp(0.0, 1.0);
            state[2 + axis] = if (0.0..=1.0).contains(&p) { v } else { 0.0 };
        }
        PointMass::reward(state[0], state[1])
    }
}

pub const ENV_NAMES: [&str; 2] = ["pendulum", "pointmass"];

pub fn make_dynamics(name: &str, max_episode_steps: usize, action_repeat: usize) -> Result<Arc<dyn Dynamics>> {
    if max_episode_steps == 0 || action_repeat == 0 {
        return Err(Error::Config("episode length and action repeat must be positive".into()));
    }
    match name {
        "pendulum" => Ok(Arc::new(Pendulum::new(max_episode_steps, action_repeat))),
        "pointmass" => Ok(Arc::new(PointMass::new(max_episode_steps, action_repeat))),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    /// Sum over the repeated substeps.
    pub reward: f64,
    /// Driver steps taken so far, including this one.
    pub step_index: usize,
    pub done: bool,
}

/// Episode driver around a simulator.
#[derive(Clone, Debug)]
pub struct Env {
    dynamics: Arc<dyn Dynamics>,
    state: Vec<f64>,
    steps: usize,
}

impl Env {
    pub fn new(dynamics: Arc<dyn Dynamics>) -> Self {
        let state = vec![0.0; dynamics.state_dim()];
        let steps = dynamics.spec().max_episode_steps;
        Env { dynamics, state, steps }
    }

    pub fn by_name(name: &str, max_episode_steps: usize, action_repeat: usize) -> Result<Self> {
        Ok(Env::new(make_dynamics(name, max_episode_steps, action_repeat)?))
    }

    pub fn spec(&self) -> &EnvSpec {
        self.dynamics.spec()
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.state.len() {
            return Err(Error::dim("environment state", self.state.len(), state.len()));
        }
        self.state.copy_from_slice(state);
        Ok(())
    }

    pub fn observe(&self) -> Vec<f64> {
        self.dynamics.observe(&self.state)
    }

    /// Driver steps taken in the current episode.
    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.dynamics.initial_state(&mut rng);
        self.steps = 0;
        self.observe()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let spec = self.dynamics.spec();
        if self.steps >= spec.max_episode_steps {
            return Err(Error::EpisodeFinished(self.steps));
        }
        if action.len() != spec.act_dim {
            return Err(Error::dim("action", spec.act_dim, action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let action = spec.clip_action(action);
        let mut reward = 0.0;
        for _ in 0..spec.action_repeat {
            reward += self.dynamics.substep(&mut self.state, &action);
        }
        self.steps += 1;
        Ok(StepOutcome {
            obs: self.observe(),
            reward,
            step_index: self.steps,
            done: self.steps >= spec.max_episode_steps,
        })
    }
}

/// `sign(x) ln(|x| + 1)`
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// `sign(x) (e^{|x|} - 1)`
pub fn symexp(x: f64) -> f64 {
    x.signum() * x.abs().exp_m1()
}

/// True simulator exposed as a planning model. State rows are simulator
/// states; rewards are summed over the action repeat and the terminal value
/// is zero.
#[derive(Clone, Debug)]
pub struct OracleModel {
    dynamics: Arc<dyn Dynamics>,
}

impl OracleModel {
    pub fn new(dynamics: Arc<dyn Dynamics>) -> Self {
        OracleModel { dynamics }
    }

    pub fn start_state<T: Scalar>(&self, env: &Env) -> Matrix<T> {
        Matrix::from_fn(1, env.state().len(), |_, j| T::lit(env.state()[j]))
    }

    fn advance<T: Scalar>(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let spec = self.dynamics.spec();
        if actions.rows() != state.rows() || actions.cols() != spec.act_dim {
            return Err(Error::dim(
                "oracle actions",
                format!("{}x{}", state.rows(), spec.act_dim),
                format!("{}x{}", actions.rows(), actions.cols()),
            ));
        }
        let mut next = state.clone();
        let mut rewards = Matrix::zeros(state.rows(), 1);
        let mut s = vec![0.0; state.cols()];
        for i in 0..state.rows() {
            for (dst, src) in s.iter_mut().zip(state.row(i)) {
                *dst = src.as_f64();
            }
            let a: Vec<f64> = actions.row(i).iter().map(|v| v.as_f64()).collect();
            let a = spec.clip_action(&a);
            let mut r = 0.0;
            for _ in 0..spec.action_repeat {
                r += self.dynamics.substep(&mut s, &a);
            }
            for (dst, &src) in next.row_mut(i).iter_mut().zip(&s) {
                *dst = T::lit(src);
            }
            rewards.row_mut(i)[0] = T::lit(r);
        }
        Ok((next, rewards))
    }
}

impl<T: Scalar> PlanningModel<T> for OracleModel {
    fn reward(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.advance(state, actions)?.1)
    }

    fn next(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.advance(state, actions)?.0)
    }

    fn value(&self, state: &Matrix<T>, _actions: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(Matrix::zeros(state.rows(), 1))
    }
}
