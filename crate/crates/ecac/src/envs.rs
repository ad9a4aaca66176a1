//! Deterministic, seeded continuous-control environments with closed-form
//! dynamics. Episode time limits surface as `truncated`, distinct from true
//! environment termination, so the trainer can decide which transitions
//! bootstrap.

use rand::Rng;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::rng;

/// Static description of an environment's interface.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
    /// Loose bound with `|reward| <= reward_bound` on every step.
    pub reward_bound: f64,
}

/// Outcome of one environment step. Rewards are pre-scaling.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Array,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

pub trait Env {
    fn name(&self) -> &'static str;
    fn spec(&self) -> &EnvSpec;

    /// Deterministic initial state for the seed; zeroes the step counter.
    fn reset(&mut self, seed: u64) -> Array;

    /// Advance one tick. Out-of-bound action components are clamped to the
    /// spec bounds. Stepping a finished episode without reset is an error.
    fn step(&mut self, action: &Array) -> Result<StepResult>;

    /// Internal state vector (probe injection and checkpointing).
    fn state(&self) -> Vec<f64>;

    /// Inject internal state; clears the done flag and step counter.
    fn set_state(&mut self, state: &[f64]);

    /// Steps taken in the current episode.
    fn elapsed(&self) -> usize;
    fn set_elapsed(&mut self, steps: usize);

    /// Whether probes may start rollouts from injected states. All
    /// built-ins support it.
    fn supports_state_injection(&self) -> bool {
        true
    }

    fn observation(&self) -> Array {
        Array::vector(self.state())
    }
}

/// Construct a built-in environment by config name.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "pointmass2d" => Ok(Box::new(PointMass2D::new())),
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "mountaincar_c" => Ok(Box::new(MountainCarContinuous::new())),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

pub fn clamp_action(action: &Array, spec: &EnvSpec) -> Result<Vec<f64>> {
    if action.numel() != spec.act_dim {
        return Err(Error::ShapeMismatch {
            op: "env_step",
            lhs: action.shape().to_vec(),
            rhs: vec![spec.act_dim],
        });
    }
    Ok(action
        .values()
        .iter()
        .enumerate()
        .map(|(i, &a)| a.clamp(spec.action_low[i], spec.action_high[i]))
        .collect())
}

/// Planar point mass accelerating toward a goal at the origin.
///
/// State `[px, py, vx, vy]`; action is an acceleration in `[-1, 1]^2`.
/// Dynamics `v' = 0.95 v + 0.1 a`, `p' = p + 0.1 v'`. Reward (at the new
/// position) is `-|p' - goal| - 0.01 |a|^2`; the episode terminates when
/// `|p' - goal| < 0.05` and truncates after 200 steps. Initial position is
/// uniform in `[-1, 1]^2` with zero velocity.
pub struct PointMass2D {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    elapsed: usize,
    done: bool,
}

impl PointMass2D {
    pub const GOAL: [f64; 2] = [0.0, 0.0];

    pub fn new() -> PointMass2D {
        PointMass2D {
            spec: EnvSpec {
                obs_dim: 4,
                act_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                max_episode_steps: 200,
                reward_bound: 64.0,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            elapsed: 0,
            done: false,
        }
    }

    pub fn distance_to_goal(&self) -> f64 {
        let dx = self.pos[0] - Self::GOAL[0];
        let dy = self.pos[1] - Self::GOAL[1];
        (dx * dx + dy * dy).sqrt()
    }
}

impl Default for PointMass2D {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointMass2D {
    fn name(&self) -> &'static str {
        "pointmass2d"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Array {
        let mut r = rng::substream(seed, "pointmass2d.reset");
        self.pos = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        self.vel = [0.0, 0.0];
        self.elapsed = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &Array) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        let a = clamp_action(action, &self.spec)?;
        for i in 0..2 {
            self.vel[i] = 0.95 * self.vel[i] + 0.1 * a[i];
            self.pos[i] += 0.1 * self.vel[i];
        }
        self.elapsed += 1;
        let dist = self.distance_to_goal();
        let effort = a[0] * a[0] + a[1] * a[1];
        let reward = -dist - 0.01 * effort;
        let terminal = dist < 0.05;
        let truncated = !terminal && self.elapsed >= self.spec.max_episode_steps;
        self.done = terminal || truncated;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            terminal,
            truncated,
        })
    }

    fn state(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    fn set_state(&mut self, state: &[f64]) {
        self.pos = [state[0], state[1]];
        self.vel = [state[2], state[3]];
        self.elapsed = 0;
        self.done = false;
    }

    fn elapsed(&self) -> usize {
        self.elapsed
    }

    fn set_elapsed(&mut self, steps: usize) {
        self.elapsed = steps;
        self.done = false;
    }
}

/// Torque-limited pendulum swing-up.
///
/// State `[theta, omega]` with `theta = 0` upright, wrapped to `(-pi, pi]`,
/// `omega` clamped to `[-8, 8]`. Torque in `[-2, 2]`, `dt = 0.05`, gravity
/// 10, unit mass and length. Reward (from the pre-step state) is
/// `-(theta^2 + 0.1 omega^2 + 0.001 u^2)`. Never terminal; truncates at
/// 200 steps. Initial `theta ~ U(-pi, pi)`, `omega ~ U(-1, 1)`.
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    omega: f64,
    elapsed: usize,
    done: bool,
}

fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut t = (theta + PI).rem_euclid(TAU) - PI;
    if t == -PI {
        t = PI;
    }
    t
}

impl Pendulum {
    const DT: f64 = 0.05;
    const GRAVITY: f64 = 10.0;
    const MAX_SPEED: f64 = 8.0;

    pub fn new() -> Pendulum {
        use std::f64::consts::PI;
        Pendulum {
            spec: EnvSpec {
                obs_dim: 2,
                act_dim: 1,
                action_low: vec![-2.0],
                action_high: vec![2.0],
                max_episode_steps: 200,
                // pi^2 + 0.1 * 64 + 0.001 * 4
                reward_bound: PI * PI + 6.4 + 0.004,
            },
            theta: 0.0,
            omega: 0.0,
            elapsed: 0,
            done: false,
        }
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Pendulum {
    fn name(&self) -> &'static str {
        "pendulum"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Array {
        use std::f64::consts::PI;
        let mut r = rng::substream(seed, "pendulum.reset");
        self.theta = r.gen_range(-PI..PI);
        self.omega = r.gen_range(-1.0..1.0);
        self.elapsed = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &Array) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        let u = clamp_action(action, &self.spec)?[0];
        let reward = -(wrap_angle(self.theta).powi(2) + 0.1 * self.omega * self.omega + 0.001 * u * u);

        let accel = 3.0 * Self::GRAVITY / 2.0 * self.theta.sin() + 3.0 * u;
        self.omega = (self.omega + accel * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta = wrap_angle(self.theta + self.omega * Self::DT);

        self.elapsed += 1;
        let truncated = self.elapsed >= self.spec.max_episode_steps;
        self.done = truncated;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            terminal: false,
            truncated,
        })
    }

    fn state(&self) -> Vec<f64> {
        vec![self.theta, self.omega]
    }

    fn set_state(&mut self, state: &[f64]) {
        self.theta = state[0];
        self.omega = state[1];
        self.elapsed = 0;
        self.done = false;
    }

    fn elapsed(&self) -> usize {
        self.elapsed
    }

    fn set_elapsed(&mut self, steps: usize) {
        self.elapsed = steps;
        self.done = false;
    }
}

/// Underpowered car in a valley; reaching the right hilltop requires
/// building momentum by oscillating.
///
/// State `[x, v]`, `x` in `[-1.2, 0.6]`, `v` in `[-0.07, 0.07]`. Throttle
/// in `[-1, 1]`; `v += 0.0015 u - 0.0025 cos(3x)`, the left wall absorbs
/// velocity. Reward `-0.1 u^2` per step plus `100` on reaching the goal
/// `x >= 0.45` (terminal). Truncates at 500 steps. Initial
/// `x ~ U(-0.6, -0.4)`, `v = 0`.
pub struct MountainCarContinuous {
    spec: EnvSpec,
    x: f64,
    v: f64,
    elapsed: usize,
    done: bool,
}

impl MountainCarContinuous {
    const POWER: f64 = 0.0015;
    const GRAVITY: f64 = 0.0025;
    const MIN_POS: f64 = -1.2;
    const MAX_POS: f64 = 0.6;
    const MAX_SPEED: f64 = 0.07;
    pub const GOAL: f64 = 0.45;

    pub fn new() -> MountainCarContinuous {
        MountainCarContinuous {
            spec: EnvSpec {
                obs_dim: 2,
                act_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: 500,
                reward_bound: 101.0,
            },
            x: -0.5,
            v: 0.0,
            elapsed: 0,
            done: false,
        }
    }
}

impl Default for MountainCarContinuous {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for MountainCarContinuous {
    fn name(&self) -> &'static str {
        "mountaincar_c"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Array {
        let mut r = rng::substream(seed, "mountaincar.reset");
        self.x = r.gen_range(-0.6..-0.4);
        self.v = 0.0;
        self.elapsed = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &Array) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        let u = clamp_action(action, &self.spec)?[0];
        self.v += Self::POWER * u - Self::GRAVITY * (3.0 * self.x).cos();
        self.v = self.v.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.x += self.v;
        if self.x < Self::MIN_POS {
            self.x = Self::MIN_POS;
            if self.v < 0.0 {
                self.v = 0.0;
            }
        }
        if self.x > Self::MAX_POS {
            self.x = Self::MAX_POS;
        }
        self.elapsed += 1;
        let terminal = self.x >= Self::GOAL;
        let reward = -0.1 * u * u + if terminal { 100.0 } else { 0.0 };
        let truncated = !terminal && self.elapsed >= self.spec.max_episode_steps;
        self.done = terminal || truncated;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            terminal,
            truncated,
        })
    }

    fn state(&self) -> Vec<f64> {
        vec![self.x, self.v]
    }

    fn set_state(&mut self, state: &[f64]) {
        self.x = state[0];
        self.v = state[1];
        self.elapsed = 0;
        self.done = false;
    }

    fn elapsed(&self) -> usize {
        self.elapsed
    }

    fn set_elapsed(&mut self, steps: usize) {
        self.elapsed = steps;
        self.done = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(values: Vec<f64>) -> Array {
        Array::vector(values)
    }

    #[test]
    fn names_resolve_and_unknown_errors() {
        for name in ["pointmass2d", "pendulum", "mountaincar_c"] {
            let env = make_env(name).unwrap();
            assert_eq!(env.name(), name);
        }
        assert!(matches!(make_env("mujoco"), Err(Error::UnknownEnv(_))));
    }

    #[test]
    fn reset_is_deterministic_and_dimensioned() {
        for name in ["pointmass2d", "pendulum", "mountaincar_c"] {
            let mut a = make_env(name).unwrap();
            let mut b = make_env(name).unwrap();
            let oa = a.reset(99);
            let ob = b.reset(99);
            assert_eq!(oa.values(), ob.values(), "{name}");
            assert_eq!(oa.numel(), a.spec().obs_dim, "{name}");
            let oc = a.reset(100);
            assert_ne!(oc.values(), ob.values(), "{name}");
        }
    }

    #[test]
    fn pointmass_zero_action_from_rest_is_fixed() {
        let mut env = PointMass2D::new();
        env.reset(1);
        env.set_state(&[0.5, -0.3, 0.0, 0.0]);
        let r = env.step(&act(vec![0.0, 0.0])).unwrap();
        assert_eq!(r.obs.values(), &[0.5, -0.3, 0.0, 0.0]);
        assert!(!r.terminal);
    }

    #[test]
    fn pointmass_dynamics_and_reward_step() {
        let mut env = PointMass2D::new();
        env.reset(1);
        env.set_state(&[1.0, 0.0, 1.0, 0.0]);
        let r = env.step(&act(vec![1.0, 0.0])).unwrap();
        // v' = 0.95 * 1 + 0.1 = 1.05 ; p' = 1 + 0.105 = 1.105
        assert!((r.obs.values()[0] - 1.105).abs() < 1e-12);
        assert!((r.obs.values()[2] - 1.05).abs() < 1e-12);
        assert!((r.reward - (-1.105 - 0.01)).abs() < 1e-12);
    }

    #[test]
    fn pointmass_terminates_near_goal() {
        let mut env = PointMass2D::new();
        env.reset(1);
        env.set_state(&[0.04, 0.0, 0.0, 0.0]);
        let r = env.step(&act(vec![0.0, 0.0])).unwrap();
        assert!(r.terminal);
        assert!(env.step(&act(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn pendulum_hanging_rest_is_fixed_point() {
        let mut env = Pendulum::new();
        env.reset(1);
        env.set_state(&[std::f64::consts::PI, 0.0]);
        let r = env.step(&act(vec![0.0])).unwrap();
        // sin(pi) is ~1e-16 in floating point; the equilibrium holds to
        // rounding, not to bit-exact zero.
        assert!((r.obs.values()[0].abs() - std::f64::consts::PI).abs() < 1e-12);
        assert!(r.obs.values()[1].abs() < 1e-12);
        assert!(!r.terminal);
    }

    #[test]
    fn pendulum_upright_is_unstable_without_torque() {
        let mut env = Pendulum::new();
        env.reset(1);
        env.set_state(&[0.05, 0.0]);
        let mut theta = 0.05;
        for _ in 0..20 {
            let r = env.step(&act(vec![0.0])).unwrap();
            theta = r.obs.values()[0];
        }
        assert!(theta.abs() > 0.1, "theta={theta}");
    }

    #[test]
    fn pendulum_truncates_at_200() {
        let mut env = Pendulum::new();
        env.reset(7);
        for i in 1..=200 {
            let r = env.step(&act(vec![0.0])).unwrap();
            assert_eq!(r.truncated, i == 200);
            assert!(!r.terminal);
        }
        assert!(env.step(&act(vec![0.0])).is_err());
    }

    #[test]
    fn mountain_car_full_throttle_cannot_climb_directly() {
        // forward-simulation oracle: positive throttle from rest stalls
        // before the goal; reaching it requires rocking backward first.
        let mut env = MountainCarContinuous::new();
        env.reset(1);
        env.set_state(&[-0.5, 0.0]);
        let mut best = -0.5f64;
        for _ in 0..500 {
            let r = env.step(&act(vec![1.0])).unwrap();
            best = best.max(r.obs.values()[0]);
            if r.terminal {
                panic!("reached goal directly");
            }
            if r.truncated {
                break;
            }
        }
        assert!(best < MountainCarContinuous::GOAL, "best={best}");
    }

    #[test]
    fn mountain_car_oscillation_reaches_goal() {
        // bang-bang energy pumping: throttle along the velocity direction
        let mut env = MountainCarContinuous::new();
        env.reset(1);
        env.set_state(&[-0.5, 0.0]);
        let mut reached = false;
        let mut u = 1.0;
        for _ in 0..500 {
            let r = env.step(&act(vec![u])).unwrap();
            let v = r.obs.values()[1];
            u = if v >= 0.0 { 1.0 } else { -1.0 };
            if r.terminal {
                reached = true;
                assert!((r.reward - (100.0 - 0.1 * u * u)).abs() < 1e-9);
                break;
            }
        }
        assert!(reached, "energy pumping failed to reach the goal");
    }

    #[test]
    fn bit_determinism_over_action_sequences() {
        for name in ["pointmass2d", "pendulum", "mountaincar_c"] {
            let mut a = make_env(name).unwrap();
            let mut b = make_env(name).unwrap();
            a.reset(5);
            b.reset(5);
            let mut r = crate::rng::substream(5, "env-actions");
            for _ in 0..50 {
                let action: Vec<f64> = (0..a.spec().act_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
                let ra = a.step(&act(action.clone())).unwrap();
                let rb = b.step(&act(action)).unwrap();
                assert_eq!(ra.obs.values(), rb.obs.values());
                assert_eq!(ra.reward.to_bits(), rb.reward.to_bits());
                if ra.terminal || ra.truncated {
                    break;
                }
            }
        }
    }

    #[test]
    fn rewards_stay_within_documented_bounds() {
        for name in ["pointmass2d", "pendulum", "mountaincar_c"] {
            let mut env = make_env(name).unwrap();
            let mut r = crate::rng::substream(11, "env-bounds");
            for ep in 0..5 {
                env.reset(ep);
                loop {
                    let action: Vec<f64> = (0..env.spec().act_dim)
                        .map(|_| r.gen_range(-3.0..3.0))
                        .collect();
                    let sr = env.step(&act(action)).unwrap();
                    assert!(
                        sr.reward.abs() <= env.spec().reward_bound,
                        "{name}: reward {} bound {}",
                        sr.reward,
                        env.spec().reward_bound
                    );
                    if sr.terminal || sr.truncated {
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn truncation_fires_exactly_at_limit() {
        let mut env = PointMass2D::new();
        env.reset(3);
        env.set_state(&[5.0, 5.0, 0.0, 0.0]); // far from goal, never terminal
        for i in 1..=200 {
            let r = env.step(&act(vec![0.0, 0.0])).unwrap();
            assert_eq!(r.truncated, i == 200, "step {i}");
        }
    }
}
