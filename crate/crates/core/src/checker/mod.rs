//! Exact analysis of finite latent models: objective transforms, policy
//! evaluation, Lipschitz constants, stationary distributions, optimal
//! transport, bisimulation distances and PRISM export.

pub mod bisim;
pub mod ot;
pub mod prism;
pub mod stationary;
pub mod value;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{label_mask, LatentMdp, LatentPolicy, LatentRow, LatentState};

pub use bisim::{bisim_pseudometric, BisimVariant};
pub use ot::{total_variation, wasserstein_exact};
pub use stationary::stationary_distribution;
pub use value::{evaluate_mc, value_iteration, ValueTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    DiscountedReturn,
    Reach,
    ConstrainedReach,
}

/// `C` and `T` are masks over atomic propositions; a state satisfies a mask
/// when its label shares at least one bit with it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    #[serde(default)]
    pub constraint: u64,
    #[serde(default)]
    pub target: u64,
    pub gamma: f64,
}

impl Objective {
    pub fn discounted(gamma: f64) -> Self {
        Objective { kind: ObjectiveKind::DiscountedReturn, constraint: 0, target: 0, gamma }
    }

    pub fn reach(target: u64, gamma: f64) -> Self {
        Objective { kind: ObjectiveKind::Reach, constraint: 0, target, gamma }
    }

    pub fn constrained_reach(constraint: u64, target: u64, gamma: f64) -> Self {
        Objective { kind: ObjectiveKind::ConstrainedReach, constraint, target, gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if self.kind != ObjectiveKind::DiscountedReturn && self.target == 0 {
            return Err(Error::invalid("reachability objectives need a nonempty target set"));
        }
        Ok(())
    }

    pub fn is_target(&self, label: u64) -> bool {
        self.kind != ObjectiveKind::DiscountedReturn && label & self.target != 0
    }

    /// States leaving the constraint set; absorbing with reward 0.
    pub fn is_violating(&self, label: u64) -> bool {
        self.kind == ObjectiveKind::ConstrainedReach && !self.is_target(label) && label & self.constraint == 0
    }
}

/// Rewrites `m` so that discounted return equals the discounted reachability
/// value: target states become absorbing with reward `1 - gamma`, states
/// outside the constraint become absorbing with reward 0, every other state
/// keeps its transitions and earns 0.
pub fn transform_for_objective(m: &LatentMdp, obj: &Objective) -> Result<LatentMdp> {
    obj.validate()?;
    if obj.kind == ObjectiveKind::DiscountedReturn {
        return Err(Error::invalid("discounted-return objectives need no transform"));
    }
    let mask = label_mask(m.n_ap);
    let mut rows = BTreeMap::new();
    for s in m.states() {
        let label = s & mask;
        let absorbing_reward = if obj.is_target(label) {
            Some(1.0 - obj.gamma)
        } else if obj.is_violating(label) {
            Some(0.0)
        } else {
            None
        };
        for a in 0..m.n_actions {
            let row = match absorbing_reward {
                Some(reward) => LatentRow { next: vec![(s, 1.0)], reward, count: 0 },
                None => match m.row(s, a) {
                    Ok(row) => LatentRow { next: row.next.clone(), reward: 0.0, count: row.count },
                    Err(_) => continue,
                },
            };
            rows.insert((s, a), row);
        }
    }
    LatentMdp::from_rows_unscaled(m.n_bits, m.n_ap, m.n_actions, rows)
}

/// Finite Markov chain over indexed latent states.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMc {
    pub states: Vec<LatentState>,
    /// Sparse rows `(successor index, probability)`, sorted by index.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rewards: Vec<f64>,
    pub labels: Vec<u64>,
}

impl LatentMc {
    /// Chain from dense matrices; state `i` is latent state `i`.
    pub fn from_dense(p: &[Vec<f64>], rewards: &[f64], labels: &[u64]) -> Result<Self> {
        let n = p.len();
        if rewards.len() != n || labels.len() != n || p.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch { op: "LatentMc::from_dense", detail: format!("{n} states") });
        }
        let rows: Vec<Vec<(usize, f64)>> = p
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(j, &x)| (j, x)).collect())
            .collect();
        let mc = LatentMc { states: (0..n as u64).collect(), rows, rewards: rewards.to_vec(), labels: labels.to_vec() };
        mc.validate()?;
        Ok(mc)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            let sum: f64 = row.iter().map(|&(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&(j, p)| p < 0.0 || j >= self.len()) {
                return Err(Error::invalid(format!("row {i} is not a probability vector (sum {sum})")));
            }
        }
        Ok(())
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        for &(j, p) in &self.rows[i] {
            v[j] += p;
        }
        v
    }

    pub fn index_of(&self, s: LatentState) -> Option<usize> {
        self.states.binary_search(&s).ok()
    }

    /// Chain induced by `policy` on `m`, over the states reachable from the
    /// states where the policy is defined. States where every action leads
    /// to the same absorbing self-loop need no policy entry.
    pub fn induced(m: &LatentMdp, policy: &LatentPolicy) -> Result<Self> {
        if policy.n_actions != m.n_actions {
            return Err(Error::invalid(format!(
                "policy has {} actions, model has {}",
                policy.n_actions, m.n_actions
            )));
        }
        let mut reachable: BTreeSet<LatentState> = BTreeSet::new();
        let mut frontier: Vec<LatentState> = policy.table.keys().copied().collect();
        let mut rows: BTreeMap<LatentState, (BTreeMap<LatentState, f64>, f64)> = BTreeMap::new();
        while let Some(s) = frontier.pop() {
            if !reachable.insert(s) {
                continue;
            }
            let (next, reward) = induced_row(m, policy, s)?;
            frontier.extend(next.keys().filter(|t| !reachable.contains(t)));
            rows.insert(s, (next, reward));
        }
        let states: Vec<LatentState> = reachable.into_iter().collect();
        let index: BTreeMap<LatentState, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mask = label_mask(m.n_ap);
        let mut mc_rows = Vec::with_capacity(states.len());
        let mut rewards = Vec::with_capacity(states.len());
        for s in &states {
            let (next, reward) = &rows[s];
            mc_rows.push(next.iter().map(|(t, &p)| (index[t], p)).collect());
            rewards.push(*reward);
        }
        let labels = states.iter().map(|s| s & mask).collect();
        Ok(LatentMc { states, rows: mc_rows, rewards, labels })
    }
}

fn induced_row(m: &LatentMdp, policy: &LatentPolicy, s: LatentState) -> Result<(BTreeMap<LatentState, f64>, f64)> {
    let probs: Vec<f64> = match policy.table.get(&s) {
        Some(p) => p.clone(),
        None => {
            let self_loop = (0..m.n_actions)
                .all(|a| m.row(s, a).is_ok_and(|r| r.next == [(s, 1.0)] && r.reward == m.row(s, 0).unwrap().reward));
            if !self_loop {
                return Err(Error::invalid(format!("latent policy undefined at reachable state {s:#x}")));
            }
            let mut p = vec![0.0; m.n_actions];
            p[0] = 1.0;
            p
        }
    };
    let mut next = BTreeMap::new();
    let mut reward = 0.0;
    for (a, &pa) in probs.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        let row = m.row(s, a)?;
        reward += pa * row.reward;
        for &(t, p) in &row.next {
            *next.entry(t).or_insert(0.0) += pa * p;
        }
    }
    Ok((next, reward))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    #[serde(rename = "KR")]
    pub kr: f64,
    #[serde(rename = "KP")]
    pub kp: f64,
    #[serde(rename = "KV")]
    pub kv: f64,
    #[serde(rename = "Rmax")]
    pub rmax: f64,
    /// Lexicographically smallest state pairs attaining `KR` and `KP`.
    pub kr_pair: Option<(LatentState, LatentState)>,
    pub kp_pair: Option<(LatentState, LatentState)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Value-smoothness constant from the reward and transition constants.
pub fn kv_from(kr: f64, kp: f64, rmax: f64, gamma: f64) -> (f64, Option<String>) {
    let cap = rmax / (1.0 - gamma);
    if gamma * kp >= 1.0 {
        (cap, Some(format!("gamma * KP = {} >= 1; KV falls back to Rmax / (1 - gamma)", gamma * kp)))
    } else {
        (cap.min(kr / (1.0 - gamma * kp)), None)
    }
}

/// Optimal Lipschitz constants of the chain's rewards and transitions under
/// the discrete metric.
pub fn lipschitz_constants(mc: &LatentMc, gamma: f64) -> Result<LipschitzConstants> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("discount {gamma} outside [0, 1)")));
    }
    let n = mc.len();
    let rmax = mc.rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let (mut kr, mut kp) = (0.0f64, 0.0f64);
    let (mut kr_pair, mut kp_pair) = (None, None);
    let dense: Vec<Vec<f64>> = (0..n).map(|i| mc.dense_row(i)).collect();
    // States are sorted, so index order is lexicographic order and a strict
    // comparison keeps the first attaining pair.
    for i in 0..n {
        for j in (i + 1)..n {
            let dr = (mc.rewards[i] - mc.rewards[j]).abs();
            if dr > kr || kr_pair.is_none() {
                kr = dr;
                kr_pair = Some((mc.states[i], mc.states[j]));
            }
            let tv = total_variation(&dense[i], &dense[j])?;
            if tv > kp || kp_pair.is_none() {
                kp = tv;
                kp_pair = Some((mc.states[i], mc.states[j]));
            }
        }
    }
    let (kv, warning) = kv_from(kr, kp, rmax, gamma);
    Ok(LipschitzConstants { kr, kp, kv, rmax, kr_pair, kp_pair, warnings: warning.into_iter().collect() })
}
