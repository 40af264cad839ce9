//! Simulated environments: CartPole, MountainCar, Pendulum and the lifted
//! chain oracle.

pub mod constants;
pub mod labeling;
pub mod lifted_chain;
pub mod policies;

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use labeling::{Cmp, LabelingSpec, Predicate};
pub use lifted_chain::LiftedChainSpec;
pub use policies::{heuristic_policy, HeuristicPolicy};

use crate::error::{Error, Result};
use crate::mdp::{scale_reward, Action, GroundState, Label};

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    CartPole,
    MountainCar,
    Pendulum,
    LiftedChain(LiftedChainSpec),
}

/// Result of one environment step; the reward is unscaled.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: GroundState,
    pub raw_reward: f64,
    pub terminated: bool,
}

/// Environment block of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub id: String,
    /// Replaces the default labeling function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lifted_chain: Option<LiftedChainSpec>,
}

impl EnvConfig {
    pub fn named(id: &str) -> Self {
        EnvConfig { id: id.to_string(), labels: None, lifted_chain: None }
    }
}

/// Immutable description of an environment. Stepping is a pure function of
/// the state, the action and the supplied noise stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    dynamics: Dynamics,
    labeling: LabelingSpec,
}

pub const ENV_IDS: [&str; 4] = ["cartpole", "mountaincar", "pendulum", "lifted_chain"];

impl Environment {
    pub fn from_id(id: &str) -> Result<Self> {
        Self::from_config(&EnvConfig::named(id))
    }

    pub fn from_config(cfg: &EnvConfig) -> Result<Self> {
        let (dynamics, default_labels) = match cfg.id.as_str() {
            "cartpole" => (Dynamics::CartPole, LabelingSpec::cartpole()),
            "mountaincar" => (Dynamics::MountainCar, LabelingSpec::mountaincar()),
            "pendulum" => (Dynamics::Pendulum, LabelingSpec::pendulum()),
            "lifted_chain" => {
                let spec = cfg.lifted_chain.clone().unwrap_or_else(LiftedChainSpec::oracle_default);
                let labels = spec.labeling();
                (Dynamics::LiftedChain(spec), labels)
            }
            other => return Err(Error::UnknownEnv(other.to_string())),
        };
        if cfg.lifted_chain.is_some() && !matches!(dynamics, Dynamics::LiftedChain(_)) {
            return Err(Error::Config("`lifted_chain` block given for a different environment".into()));
        }
        let labeling = cfg.labels.clone().unwrap_or(default_labels);
        let env = Environment { dynamics, labeling };
        env.validate()?;
        Ok(env)
    }

    pub fn lifted_chain(spec: LiftedChainSpec) -> Result<Self> {
        Self::from_config(&EnvConfig {
            id: "lifted_chain".into(),
            labels: None,
            lifted_chain: Some(spec),
        })
    }

    /// Configuration that rebuilds this environment, with the labeling spelled out.
    pub fn config(&self) -> EnvConfig {
        EnvConfig {
            id: self.id().to_string(),
            labels: Some(self.labeling.clone()),
            lifted_chain: self.chain_spec().cloned(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.labeling.n_ap() > 32 {
            return Err(Error::Config("at most 32 atomic propositions".into()));
        }
        if let Some(p) = self.labeling.predicates.iter().find(|p| p.coord >= self.state_dim()) {
            return Err(Error::Config(format!(
                "predicate `{}` reads coordinate {} of a {}-dimensional state",
                p.name,
                p.coord,
                self.state_dim()
            )));
        }
        if let Dynamics::LiftedChain(spec) = &self.dynamics {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn id(&self) -> &'static str {
        match self.dynamics {
            Dynamics::CartPole => "cartpole",
            Dynamics::MountainCar => "mountaincar",
            Dynamics::Pendulum => "pendulum",
            Dynamics::LiftedChain(_) => "lifted_chain",
        }
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn labeling(&self) -> &LabelingSpec {
        &self.labeling
    }

    pub fn chain_spec(&self) -> Option<&LiftedChainSpec> {
        match &self.dynamics {
            Dynamics::LiftedChain(spec) => Some(spec),
            _ => None,
        }
    }

    pub fn n_ap(&self) -> usize {
        self.labeling.n_ap()
    }

    pub fn state_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::CartPole => 4,
            Dynamics::MountainCar => 2,
            Dynamics::Pendulum => 3,
            Dynamics::LiftedChain(_) => 2,
        }
    }

    /// Number of discrete actions; `None` for continuous action spaces.
    pub fn n_actions(&self) -> Option<usize> {
        match &self.dynamics {
            Dynamics::CartPole => Some(2),
            Dynamics::MountainCar => Some(3),
            Dynamics::Pendulum => None,
            Dynamics::LiftedChain(spec) => Some(spec.n_actions()),
        }
    }

    /// Range of the scalar continuous action (also the force range of CartPole).
    pub fn action_bounds(&self) -> (f64, f64) {
        match self.dynamics {
            Dynamics::Pendulum => (-constants::pendulum::MAX_TORQUE, constants::pendulum::MAX_TORQUE),
            Dynamics::CartPole => (-constants::cartpole::FORCE_MAG, constants::cartpole::FORCE_MAG),
            _ => (0.0, 0.0),
        }
    }

    pub fn reward_bounds(&self) -> (f64, f64) {
        match self.dynamics {
            Dynamics::CartPole => constants::cartpole::REWARD_BOUNDS,
            Dynamics::MountainCar => constants::mountaincar::REWARD_BOUNDS,
            Dynamics::Pendulum => constants::pendulum::REWARD_BOUNDS,
            Dynamics::LiftedChain(_) => (-0.5, 0.5),
        }
    }

    /// Unscaled reward attached to the transition that restarts an episode.
    pub fn reset_reward(&self) -> f64 {
        0.0
    }

    pub fn max_episode_steps(&self) -> Option<usize> {
        match self.dynamics {
            Dynamics::CartPole => Some(constants::cartpole::MAX_EPISODE_STEPS),
            Dynamics::MountainCar => Some(constants::mountaincar::MAX_EPISODE_STEPS),
            Dynamics::Pendulum => Some(constants::pendulum::MAX_EPISODE_STEPS),
            Dynamics::LiftedChain(_) => None,
        }
    }

    pub fn scale(&self, raw: f64) -> Result<f64> {
        scale_reward(raw, self.reward_bounds())
    }

    pub fn label(&self, s: &GroundState) -> Label {
        self.labeling.label(s)
    }

    pub fn reset(&self, rng: &mut dyn RngCore) -> GroundState {
        match &self.dynamics {
            Dynamics::CartPole => {
                let h = constants::cartpole::INIT_HALF_WIDTH;
                GroundState::new((0..4).map(|_| rng.random_range(-h..h)).collect())
            }
            Dynamics::MountainCar => {
                use constants::mountaincar::*;
                GroundState::new(vec![rng.random_range(INIT_LOW..INIT_HIGH), 0.0])
            }
            Dynamics::Pendulum => {
                use constants::pendulum::*;
                let theta = rng.random_range(-INIT_MAX_ANGLE..INIT_MAX_ANGLE);
                let omega = rng.random_range(-INIT_MAX_SPEED..INIT_MAX_SPEED);
                GroundState::new(vec![theta.cos(), theta.sin(), omega])
            }
            Dynamics::LiftedChain(spec) => spec.observe(spec.initial_node, rng),
        }
    }

    fn check_state(&self, s: &GroundState) -> Result<()> {
        if s.dim() != self.state_dim() {
            return Err(Error::invalid(format!(
                "{} expects {}-dimensional states, got {}",
                self.id(),
                self.state_dim(),
                s.dim()
            )));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite { context: format!("{} input state", self.id()) });
        }
        Ok(())
    }

    fn discrete(&self, a: &Action) -> Result<usize> {
        let n = self.n_actions().unwrap_or(0);
        match a {
            Action::Discrete(i) if *i < n => Ok(*i),
            _ => Err(Error::invalid(format!("action {a:?} not enabled in {}", self.id()))),
        }
    }

    fn scalar(&self, a: &Action) -> Result<f64> {
        match a {
            Action::Continuous(v) if v.len() == 1 && v[0].is_finite() => Ok(v[0]),
            _ => Err(Error::invalid(format!("{} expects a scalar continuous action", self.id()))),
        }
    }

    pub fn step(&self, s: &GroundState, a: &Action, rng: &mut dyn RngCore) -> Result<StepOutcome> {
        self.check_state(s)?;
        let out = match &self.dynamics {
            Dynamics::CartPole => {
                let force = match a {
                    Action::Discrete(_) => {
                        if self.discrete(a)? == 1 {
                            constants::cartpole::FORCE_MAG
                        } else {
                            -constants::cartpole::FORCE_MAG
                        }
                    }
                    Action::Continuous(_) => {
                        let (lo, hi) = self.action_bounds();
                        self.scalar(a)?.clamp(lo, hi)
                    }
                };
                cartpole_step(s.coords(), force)
            }
            Dynamics::MountainCar => mountaincar_step(s.coords(), self.discrete(a)?),
            Dynamics::Pendulum => pendulum_step(s.coords(), self.scalar(a)?),
            Dynamics::LiftedChain(spec) => {
                let action = self.discrete(a)?;
                let node = spec.node_of(s);
                let raw_reward = spec.reward(node, rng);
                let next_node = spec.sample_next(node, action, rng);
                StepOutcome { next: spec.observe(next_node, rng), raw_reward, terminated: false }
            }
        };
        if !out.next.is_finite() || !out.raw_reward.is_finite() {
            return Err(Error::NonFinite { context: format!("{} dynamics", self.id()) });
        }
        Ok(out)
    }
}

fn cartpole_step(s: &[f64], force: f64) -> StepOutcome {
    use constants::cartpole::*;
    let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
    let (sin, cos) = theta.sin_cos();
    let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
    let next = [
        x + TAU * x_dot,
        x_dot + TAU * x_acc,
        theta + TAU * theta_dot,
        theta_dot + TAU * theta_acc,
    ];
    let terminated = next[0].abs() > X_THRESHOLD || next[2].abs() > THETA_THRESHOLD;
    StepOutcome { next: GroundState::new(next.to_vec()), raw_reward: STEP_REWARD, terminated }
}

fn mountaincar_step(s: &[f64], action: usize) -> StepOutcome {
    use constants::mountaincar::*;
    let (mut x, mut v) = (s[0], s[1]);
    v += (action as f64 - 1.0) * FORCE + (3.0 * x).cos() * (-GRAVITY);
    v = v.clamp(-MAX_SPEED, MAX_SPEED);
    x += v;
    x = x.clamp(MIN_POSITION, MAX_POSITION);
    if x == MIN_POSITION && v < 0.0 {
        v = 0.0;
    }
    StepOutcome {
        next: GroundState::new(vec![x, v]),
        raw_reward: STEP_REWARD,
        terminated: x >= GOAL_POSITION,
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn angle_normalize(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

fn pendulum_step(s: &[f64], torque: f64) -> StepOutcome {
    use constants::pendulum::*;
    let theta = s[1].atan2(s[0]);
    let omega = s[2];
    let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
    let th = angle_normalize(theta);
    let cost = th * th + 0.1 * omega * omega + 0.001 * u * u;
    let new_omega = (omega
        + (3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u) * DT)
        .clamp(-MAX_SPEED, MAX_SPEED);
    let new_theta = theta + new_omega * DT;
    StepOutcome {
        next: GroundState::new(vec![new_theta.cos(), new_theta.sin(), new_omega]),
        raw_reward: -cost.min(-REWARD_BOUNDS.0),
        terminated: false,
    }
}
