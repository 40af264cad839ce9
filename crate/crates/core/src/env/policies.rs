//! Scripted input policies standing in for trained RL agents.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{angle_normalize, constants, Dynamics, Environment};
use crate::error::{Error, Result};
use crate::mdp::{Action, GroundState, Policy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeuristicPolicy {
    /// Pushes towards the side the pole is falling, with a weak cart-centring term.
    CartPolePd { kp: f64, kd: f64, kx: f64, kv: f64 },
    /// Full throttle in the direction of motion.
    MountainCarBangBang,
    /// Energy pumping far from the top, PD stabilisation near it.
    PendulumEnergy { k_energy: f64, kp: f64, kd: f64, catch_cos: f64 },
    /// `table[node][a]`: action distribution per lifted-chain node.
    Tabular { table: Vec<Vec<f64>> },
}

pub fn heuristic_policy(env: &Environment) -> HeuristicPolicy {
    match env.dynamics() {
        Dynamics::CartPole => HeuristicPolicy::CartPolePd { kp: 1.0, kd: 0.5, kx: 0.05, kv: 0.1 },
        Dynamics::MountainCar => HeuristicPolicy::MountainCarBangBang,
        Dynamics::Pendulum => {
            HeuristicPolicy::PendulumEnergy { k_energy: 1.0, kp: 10.0, kd: 2.0, catch_cos: 0.85 }
        }
        Dynamics::LiftedChain(spec) => {
            let n_a = spec.n_actions();
            let table = (0..spec.n_nodes)
                .map(|i| {
                    // Tilt towards action `i mod n_a` so the policy is non-uniform.
                    let mut row = vec![0.4 / n_a as f64; n_a];
                    row[i % n_a] += 0.6;
                    row
                })
                .collect();
            HeuristicPolicy::Tabular { table }
        }
    }
}

impl HeuristicPolicy {
    pub fn uniform_tabular(n_nodes: usize, n_actions: usize) -> Self {
        HeuristicPolicy::Tabular { table: vec![vec![1.0 / n_actions as f64; n_actions]; n_nodes] }
    }

    pub fn validate_for(&self, env: &Environment) -> Result<()> {
        let ok = match (self, env.dynamics()) {
            (HeuristicPolicy::CartPolePd { .. }, Dynamics::CartPole) => true,
            (HeuristicPolicy::MountainCarBangBang, Dynamics::MountainCar) => true,
            (HeuristicPolicy::PendulumEnergy { .. }, Dynamics::Pendulum) => true,
            (HeuristicPolicy::Tabular { table }, Dynamics::LiftedChain(spec)) => {
                table.len() == spec.n_nodes
                    && table.iter().all(|row| {
                        row.len() == spec.n_actions()
                            && row.iter().all(|&p| p >= 0.0)
                            && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
                    })
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("policy {self:?} does not fit environment {}", env.id())))
        }
    }
}

fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Policy for HeuristicPolicy {
    fn act(&self, env: &Environment, s: &GroundState, rng: &mut dyn RngCore) -> Result<Action> {
        let c = s.coords();
        match self {
            HeuristicPolicy::CartPolePd { kp, kd, kx, kv } => {
                let u = kp * c[2] + kd * c[3] + kx * c[0] + kv * c[1];
                Ok(Action::Discrete((u > 0.0) as usize))
            }
            HeuristicPolicy::MountainCarBangBang => {
                Ok(Action::Discrete(if c[1] >= 0.0 { 2 } else { 0 }))
            }
            HeuristicPolicy::PendulumEnergy { k_energy, kp, kd, catch_cos } => {
                use constants::pendulum::*;
                let (cos, sin, omega) = (c[0], c[1], c[2]);
                let theta = angle_normalize(sin.atan2(cos));
                let u = if cos >= *catch_cos {
                    -(kp * theta + kd * omega)
                } else {
                    // Rod inertia m l^2 / 3; potential measured from the pivot.
                    let inertia = MASS * LENGTH * LENGTH / 3.0;
                    let energy = 0.5 * inertia * omega * omega + MASS * GRAVITY * LENGTH / 2.0 * cos;
                    let target = MASS * GRAVITY * LENGTH / 2.0;
                    let dir = if omega == 0.0 { 1.0 } else { omega.signum() };
                    k_energy * (target - energy) * dir
                };
                Ok(Action::Continuous(vec![u.clamp(-MAX_TORQUE, MAX_TORQUE)]))
            }
            HeuristicPolicy::Tabular { table } => {
                let spec = env
                    .chain_spec()
                    .ok_or_else(|| Error::invalid("tabular policy requires the lifted chain"))?;
                Ok(Action::Discrete(sample_categorical(&table[spec.node_of(s)], rng)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::stream;

    #[test]
    fn tabular_frequencies_match_table() {
        let env = Environment::from_id("lifted_chain").unwrap();
        let pol = heuristic_policy(&env);
        let HeuristicPolicy::Tabular { table } = &pol else { panic!() };
        let s = env.chain_spec().unwrap().observe(1, &mut stream(0, 0));
        let mut rng = stream(5, 1);
        let n = 100_000;
        let mut counts = vec![0usize; 2];
        for _ in 0..n {
            counts[pol.act(&env, &s, &mut rng).unwrap().index().unwrap()] += 1;
        }
        for (a, &c) in counts.iter().enumerate() {
            assert!((c as f64 / n as f64 - table[1][a]).abs() < 0.01);
        }
    }

    #[test]
    fn policies_fit_their_environments() {
        for id in super::super::ENV_IDS {
            let env = Environment::from_id(id).unwrap();
            heuristic_policy(&env).validate_for(&env).unwrap();
        }
    }
}
