//! A finite Markov chain lifted into the plane. Node `i` sits at
//! `(i * spacing, 0)`; observations are drawn uniformly from a disc around the
//! current node, and the disc radius keeps the balls disjoint, so the node is
//! recoverable from any observation.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::labeling::{Cmp, LabelingSpec, Predicate};
use crate::error::{Error, Result};
use crate::mdp::GroundState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftedChainSpec {
    pub n_nodes: usize,
    /// `transitions[a][i][j]`: probability of moving from node `i` to `j` under action `a`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Already in `[-1/2, 1/2]`; the reward of leaving a node.
    pub node_rewards: Vec<f64>,
    pub observation_radius: f64,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    /// Half-width of uniform noise added to every reward.
    #[serde(default)]
    pub reward_noise: f64,
    #[serde(default)]
    pub initial_node: usize,
    /// Proposition `i` holds when `x >= label_thresholds[i]`.
    pub label_thresholds: Vec<f64>,
}

fn default_spacing() -> f64 {
    1.0
}

impl LiftedChainSpec {
    /// Four nodes, two actions, fast mixing, two propositions.
    pub fn oracle_default() -> Self {
        let shift = |row: [f64; 4]| -> Vec<Vec<f64>> {
            (0..4).map(|i| (0..4).map(|j| row[(j + 4 - i) % 4]).collect()).collect()
        };
        LiftedChainSpec {
            n_nodes: 4,
            transitions: vec![shift([0.2, 0.5, 0.2, 0.1]), shift([0.3, 0.1, 0.2, 0.4])],
            node_rewards: vec![-0.3, -0.1, 0.1, 0.3],
            observation_radius: 0.3,
            spacing: 1.0,
            reward_noise: 0.0,
            initial_node: 0,
            label_thresholds: vec![1.5, 2.5],
        }
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.len()
    }

    pub fn center(&self, node: usize) -> [f64; 2] {
        [node as f64 * self.spacing, 0.0]
    }

    pub fn labeling(&self) -> LabelingSpec {
        LabelingSpec {
            predicates: self
                .label_thresholds
                .iter()
                .enumerate()
                .map(|(i, &t)| Predicate::new(&format!("x_ge_{i}"), 0, Cmp::Ge, t))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("lifted_chain: {m}")));
        if self.n_nodes == 0 {
            return bad("needs at least one node".into());
        }
        if self.transitions.is_empty() {
            return bad("needs at least one action".into());
        }
        for (a, m) in self.transitions.iter().enumerate() {
            if m.len() != self.n_nodes {
                return bad(format!("action {a} has {} rows", m.len()));
            }
            for (i, row) in m.iter().enumerate() {
                if row.len() != self.n_nodes || row.iter().any(|&p| !(p >= 0.0)) {
                    return bad(format!("row {i} of action {a} is not a probability vector"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return bad(format!("row {i} of action {a} sums to {sum}"));
                }
            }
        }
        if self.node_rewards.len() != self.n_nodes {
            return bad("one reward per node required".into());
        }
        if !(self.reward_noise >= 0.0) {
            return bad("reward_noise must be nonnegative".into());
        }
        if self.node_rewards.iter().any(|r| !(r.abs() + self.reward_noise <= 0.5)) {
            return bad("node rewards plus noise must stay within [-1/2, 1/2]".into());
        }
        if !(self.observation_radius > 0.0 && 2.0 * self.observation_radius < self.spacing) {
            return bad("observation balls must be disjoint (0 < 2 * radius < spacing)".into());
        }
        if self.initial_node >= self.n_nodes {
            return bad("initial node out of range".into());
        }
        for &t in &self.label_thresholds {
            if (0..self.n_nodes).any(|i| (self.center(i)[0] - t).abs() <= self.observation_radius) {
                return bad(format!("label threshold {t} cuts through an observation ball"));
            }
        }
        Ok(())
    }

    /// Nearest node centre.
    pub fn node_of(&self, s: &GroundState) -> usize {
        let x = s.coords()[0] / self.spacing;
        (x.round().max(0.0) as usize).min(self.n_nodes - 1)
    }

    pub fn observe(&self, node: usize, rng: &mut dyn RngCore) -> GroundState {
        let [cx, cy] = self.center(node);
        let rho = self.observation_radius * rng.random::<f64>().sqrt();
        let angle = 2.0 * std::f64::consts::PI * rng.random::<f64>();
        GroundState::new(vec![cx + rho * angle.cos(), cy + rho * angle.sin()])
    }

    pub fn sample_next(&self, node: usize, action: usize, rng: &mut dyn RngCore) -> usize {
        let row = &self.transitions[action][node];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(self.n_nodes - 1)
    }

    pub fn reward(&self, node: usize, rng: &mut dyn RngCore) -> f64 {
        let noise = if self.reward_noise > 0.0 {
            self.reward_noise * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            0.0
        };
        self.node_rewards[node] + noise
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        LiftedChainSpec::oracle_default().validate().unwrap();
    }

    #[test]
    fn overlapping_balls_rejected() {
        let mut spec = LiftedChainSpec::oracle_default();
        spec.observation_radius = 0.6;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn threshold_inside_ball_rejected() {
        let mut spec = LiftedChainSpec::oracle_default();
        spec.label_thresholds = vec![1.1];
        assert!(spec.validate().is_err());
    }
}
