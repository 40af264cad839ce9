//! Discrete latent MDPs over bit-vector states, embeddings linking them to
//! ground environments, and frequency estimation of latent dynamics.
//!
//! A latent state is a `u64` bit pattern whose low `n_ap` bits are the label
//! bits (bit 0 is atomic proposition 0).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::mdp::{rollout_with, Action, GroundState, Label, Policy, Trace};

pub type LatentState = u64;

pub fn label_mask(n_ap: usize) -> u64 {
    if n_ap >= 64 {
        u64::MAX
    } else {
        (1u64 << n_ap) - 1
    }
}

/// State embedding phi: ground state (with its label) to latent state.
pub trait StateEmbedding {
    fn n_bits(&self) -> usize;
    fn embed(&self, s: &GroundState, label: Label) -> Result<LatentState>;
}

/// Latent policy over latent states together with the action embedding psi.
pub trait LatentAgent: StateEmbedding {
    fn n_latent_actions(&self) -> usize;
    fn action_probs(&self, s_bar: LatentState) -> Result<Vec<f64>>;
    /// Ground action executing latent action `a_bar`. The default maps latent
    /// action `i` to ground action `i`.
    fn decode_action(&self, _s: &GroundState, _s_bar: LatentState, a_bar: usize) -> Result<Action> {
        Ok(Action::Discrete(a_bar))
    }
}

/// Exact embedding of the lifted chain: label bits, then the node index.
#[derive(Clone, Debug)]
pub struct ChainEmbedding {
    env: Environment,
    node_bits: usize,
}

impl ChainEmbedding {
    pub fn new(env: &Environment) -> Result<Self> {
        let spec = env
            .chain_spec()
            .ok_or_else(|| Error::invalid("chain embedding requires the lifted chain"))?;
        let node_bits = (usize::BITS - (spec.n_nodes.max(2) - 1).leading_zeros()) as usize;
        Ok(ChainEmbedding { env: env.clone(), node_bits })
    }

    pub fn latent_of_node(&self, node: usize) -> LatentState {
        let spec = self.env.chain_spec().expect("checked at construction");
        let label = self.env.label(&GroundState::new(spec.center(node).to_vec()));
        label.bits() | ((node as u64) << self.env.n_ap())
    }

    pub fn node_of_latent(&self, s_bar: LatentState) -> usize {
        (s_bar >> self.env.n_ap()) as usize
    }
}

impl StateEmbedding for ChainEmbedding {
    fn n_bits(&self) -> usize {
        self.env.n_ap() + self.node_bits
    }

    fn embed(&self, s: &GroundState, _label: Label) -> Result<LatentState> {
        let spec = self.env.chain_spec().expect("checked at construction");
        Ok(self.latent_of_node(spec.node_of(s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentTransition {
    pub s: LatentState,
    pub a: usize,
    pub r: f64,
    pub s_next: LatentState,
    pub reset: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrace {
    pub n_ap: usize,
    pub steps: Vec<LatentTransition>,
}

impl LatentTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Embeds every transition of `trace`. Discrete ground actions pass through
/// unchanged unless `action_encoder` is given; continuous actions require it.
pub fn embed_trace(
    trace: &Trace,
    phi: &dyn StateEmbedding,
    action_encoder: Option<&dyn Fn(&GroundState, LatentState, &Action) -> Result<usize>>,
) -> Result<LatentTrace> {
    let mask = label_mask(trace.n_ap);
    let mut steps = Vec::with_capacity(trace.len());
    let mut carried: Option<LatentState> = None;
    for (t, tr) in trace.transitions.iter().enumerate() {
        let s = match carried {
            Some(s) => s,
            None => phi.embed(&tr.s, tr.l)?,
        };
        if s & mask != tr.l.bits() {
            return Err(Error::LabelMismatch { step: t, latent: s & mask, label: tr.l.bits() });
        }
        let s_next = phi.embed(&tr.s_next, tr.l_next)?;
        if s_next & mask != tr.l_next.bits() {
            return Err(Error::LabelMismatch { step: t + 1, latent: s_next & mask, label: tr.l_next.bits() });
        }
        let a = match (action_encoder, &tr.a) {
            (Some(enc), a) => enc(&tr.s, s, a)?,
            (None, Action::Discrete(i)) => *i,
            (None, Action::Continuous(_)) => {
                return Err(Error::invalid("continuous ground actions need an action encoder"))
            }
        };
        steps.push(LatentTransition { s, a, r: tr.r, s_next, reset: tr.reset });
        carried = Some(s_next);
    }
    Ok(LatentTrace { n_ap: trace.n_ap, steps })
}

/// Rewards are accumulated in fixed point so that sums are exact and
/// independent of insertion order.
const REWARD_SCALE: f64 = (1u64 << 52) as f64;

fn to_fixed(r: f64) -> i128 {
    (r * REWARD_SCALE).round() as i128
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct CountRow {
    next: BTreeMap<LatentState, u64>,
    total: u64,
    reward_sum: i128,
}

/// Transition counts and reward sums per latent state-action pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CountTable {
    n_bits: usize,
    n_ap: usize,
    n_actions: usize,
    rows: BTreeMap<(LatentState, usize), CountRow>,
}

impl CountTable {
    pub fn new(n_bits: usize, n_ap: usize, n_actions: usize) -> Self {
        CountTable { n_bits, n_ap, n_actions, rows: BTreeMap::new() }
    }

    pub fn from_trace(trace: &LatentTrace, n_bits: usize, n_actions: usize) -> Result<Self> {
        let mut table = CountTable::new(n_bits, trace.n_ap, n_actions);
        for step in &trace.steps {
            table.observe(step)?;
        }
        Ok(table)
    }

    pub fn observe(&mut self, step: &LatentTransition) -> Result<()> {
        if step.a >= self.n_actions {
            return Err(Error::invalid(format!("latent action {} out of range", step.a)));
        }
        if !(step.r.abs() <= 0.5) {
            return Err(Error::RewardOutOfBounds { raw: step.r, min: -0.5, max: 0.5 });
        }
        let row = self.rows.entry((step.s, step.a)).or_default();
        *row.next.entry(step.s_next).or_insert(0) += 1;
        row.total += 1;
        row.reward_sum += to_fixed(step.r);
        Ok(())
    }

    /// Commutative, associative union of two tables.
    pub fn merge(&mut self, other: &CountTable) -> Result<()> {
        if (self.n_bits, self.n_ap, self.n_actions) != (other.n_bits, other.n_ap, other.n_actions) {
            return Err(Error::invalid("cannot merge count tables of different shapes"));
        }
        for (key, row) in &other.rows {
            let mine = self.rows.entry(*key).or_default();
            for (s, c) in &row.next {
                *mine.next.entry(*s).or_insert(0) += c;
            }
            mine.total += row.total;
            mine.reward_sum += row.reward_sum;
        }
        Ok(())
    }

    pub fn total(&self, s: LatentState, a: usize) -> u64 {
        self.rows.get(&(s, a)).map_or(0, |r| r.total)
    }

    pub fn count(&self, s: LatentState, a: usize, s_next: LatentState) -> u64 {
        self.rows
            .get(&(s, a))
            .and_then(|r| r.next.get(&s_next).copied())
            .unwrap_or(0)
    }

    /// Checks that totals equal row sums.
    pub fn is_consistent(&self) -> bool {
        self.rows.values().all(|r| r.next.values().sum::<u64>() == r.total)
    }

    /// Maximum-likelihood latent MDP: relative frequencies and mean rewards.
    pub fn frequency_estimate(&self) -> LatentMdp {
        let rows = self
            .rows
            .iter()
            .map(|(&key, row)| {
                let n = row.total as f64;
                let next = row.next.iter().map(|(&s, &c)| (s, c as f64 / n)).collect();
                let reward = (row.reward_sum as f64 / REWARD_SCALE / n).clamp(-0.5, 0.5);
                (key, LatentRow { next, reward, count: row.total })
            })
            .collect();
        LatentMdp {
            n_bits: self.n_bits,
            n_ap: self.n_ap,
            n_actions: self.n_actions,
            rows,
            smoothing: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    /// Successor distribution, sorted by successor.
    pub next: Vec<(LatentState, f64)>,
    pub reward: f64,
    /// Number of observations behind the row; zero when unknown.
    pub count: u64,
}

impl LatentRow {
    pub fn prob(&self, s_next: LatentState) -> f64 {
        self.next
            .binary_search_by_key(&s_next, |&(s, _)| s)
            .map_or(0.0, |i| self.next[i].1)
    }
}

/// Tabular latent MDP, immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMdp {
    pub n_bits: usize,
    pub n_ap: usize,
    pub n_actions: usize,
    rows: BTreeMap<(LatentState, usize), LatentRow>,
    smoothing: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatentMdpJson {
    n_bits: usize,
    n_ap: usize,
    n_actions: usize,
    transitions: Vec<(u64, usize, u64, f64)>,
    rewards: Vec<(u64, usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    counts: Vec<(u64, usize, u64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    smoothing: Option<String>,
}

impl LatentMdp {
    /// Builds and validates a model from explicit rows.
    pub fn from_rows(
        n_bits: usize,
        n_ap: usize,
        n_actions: usize,
        rows: impl IntoIterator<Item = ((LatentState, usize), LatentRow)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (key, mut row) in rows {
            row.next.sort_by_key(|&(s, _)| s);
            if map.insert(key, row).is_some() {
                return Err(Error::Parse(format!("duplicate row for pair {key:?}")));
            }
        }
        let m = LatentMdp { n_bits, n_ap, n_actions, rows: map, smoothing: None };
        m.validate()?;
        Ok(m)
    }

    /// Like [`LatentMdp::from_rows`] without the reward range check, for
    /// models derived from objectives whose rewards are not scaled rewards.
    pub(crate) fn from_rows_unscaled(
        n_bits: usize,
        n_ap: usize,
        n_actions: usize,
        rows: impl IntoIterator<Item = ((LatentState, usize), LatentRow)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (key, mut row) in rows {
            row.next.sort_by_key(|&(s, _)| s);
            if map.insert(key, row).is_some() {
                return Err(Error::Parse(format!("duplicate row for pair {key:?}")));
            }
        }
        let m = LatentMdp { n_bits, n_ap, n_actions, rows: map, smoothing: None };
        m.validate_structure()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        for row in self.rows.values() {
            if !(row.reward.abs() <= 0.5) {
                return Err(Error::RewardOutOfBounds { raw: row.reward, min: -0.5, max: 0.5 });
            }
        }
        Ok(())
    }

    fn validate_structure(&self) -> Result<()> {
        if self.n_bits < self.n_ap || self.n_bits > 64 {
            return Err(Error::invalid(format!(
                "n_bits = {} must lie in [n_ap = {}, 64]",
                self.n_bits, self.n_ap
            )));
        }
        let limit = if self.n_bits == 64 { u64::MAX } else { (1u64 << self.n_bits) - 1 };
        for (&(s, a), row) in &self.rows {
            if a >= self.n_actions || s > limit {
                return Err(Error::invalid(format!("pair ({s}, {a}) outside the model's ranges")));
            }
            let sum: f64 = row.next.iter().map(|&(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-9 || row.next.iter().any(|&(t, p)| !(p >= 0.0) || t > limit) {
                return Err(Error::invalid(format!("row ({s}, {a}) is not a distribution (sum {sum})")));
            }
            if row.next.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::invalid(format!("row ({s}, {a}) repeats a successor")));
            }
            if !row.reward.is_finite() {
                return Err(Error::NonFinite { context: format!("reward of row ({s}, {a})") });
            }
        }
        Ok(())
    }

    pub fn label_of(&self, s: LatentState) -> u64 {
        s & label_mask(self.n_ap)
    }

    pub fn row(&self, s: LatentState, a: usize) -> Result<&LatentRow> {
        self.rows.get(&(s, a)).ok_or(Error::UnsupportedPair { state: s, action: a })
    }

    pub fn is_supported(&self, s: LatentState, a: usize) -> bool {
        self.rows.contains_key(&(s, a))
    }

    pub fn prob(&self, s: LatentState, a: usize, s_next: LatentState) -> Result<f64> {
        Ok(self.row(s, a)?.prob(s_next))
    }

    pub fn reward(&self, s: LatentState, a: usize) -> Result<f64> {
        Ok(self.row(s, a)?.reward)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&(LatentState, usize), &LatentRow)> {
        self.rows.iter()
    }

    pub fn with_smoothing(mut self, method: String) -> Self {
        self.smoothing = Some(method);
        self
    }

    pub fn smoothing(&self) -> Option<&str> {
        self.smoothing.as_deref()
    }

    /// Every instantiated state: sources and successors, sorted.
    pub fn states(&self) -> Vec<LatentState> {
        let mut set = BTreeSet::new();
        for (&(s, _), row) in &self.rows {
            set.insert(s);
            set.extend(row.next.iter().map(|&(t, _)| t));
        }
        set.into_iter().collect()
    }

    /// Pairs `(s, a)` over instantiated states that have no row.
    pub fn missing_pairs(&self) -> Vec<(LatentState, usize)> {
        self.states()
            .into_iter()
            .flat_map(|s| (0..self.n_actions).map(move |a| (s, a)))
            .filter(|k| !self.rows.contains_key(k))
            .collect()
    }

    /// Add-one smoothing over the instantiated states, for export only.
    /// Rows with unknown counts are treated as a single observation; missing
    /// pairs become uniform with reward 0.
    pub fn smoothed_add_one(&self) -> LatentMdp {
        let states = self.states();
        let k = states.len() as f64;
        let mut rows = BTreeMap::new();
        for &s in &states {
            for a in 0..self.n_actions {
                let (n, base, reward) = match self.rows.get(&(s, a)) {
                    Some(row) => (row.count.max(1) as f64, Some(row), row.reward),
                    None => (0.0, None, 0.0),
                };
                let next = states
                    .iter()
                    .map(|&t| {
                        let p = base.map_or(0.0, |r| r.prob(t));
                        (t, (p * n + 1.0) / (n + k))
                    })
                    .collect();
                let count = base.map_or(0, |r| r.count);
                rows.insert((s, a), LatentRow { next, reward, count });
            }
        }
        LatentMdp {
            n_bits: self.n_bits,
            n_ap: self.n_ap,
            n_actions: self.n_actions,
            rows,
            smoothing: Some("add-one".into()),
        }
    }

    pub fn to_json(&self) -> String {
        let mut doc = LatentMdpJson {
            n_bits: self.n_bits,
            n_ap: self.n_ap,
            n_actions: self.n_actions,
            transitions: Vec::new(),
            rewards: Vec::new(),
            counts: Vec::new(),
            smoothing: self.smoothing.clone(),
        };
        for (&(s, a), row) in &self.rows {
            doc.transitions.extend(row.next.iter().map(|&(t, p)| (s, a, t, p)));
            doc.rewards.push((s, a, row.reward));
            if row.count > 0 {
                doc.counts.push((s, a, row.count));
            }
        }
        serde_json::to_string(&doc).expect("latent MDP serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LatentMdpJson = serde_json::from_str(text)?;
        let mut rows: BTreeMap<(u64, usize), LatentRow> = BTreeMap::new();
        for (s, a, r) in doc.rewards {
            if rows.insert((s, a), LatentRow { next: Vec::new(), reward: r, count: 0 }).is_some() {
                return Err(Error::Parse(format!("duplicate reward for pair ({s}, {a})")));
            }
        }
        for (s, a, t, p) in doc.transitions {
            let row = rows
                .get_mut(&(s, a))
                .ok_or_else(|| Error::Parse(format!("transition from ({s}, {a}) has no reward entry")))?;
            row.next.push((t, p));
        }
        for (s, a, n) in doc.counts {
            rows.get_mut(&(s, a))
                .ok_or_else(|| Error::Parse(format!("count for unknown pair ({s}, {a})")))?
                .count = n;
        }
        let mut m = LatentMdp::from_rows(doc.n_bits, doc.n_ap, doc.n_actions, rows)?;
        m.smoothing = doc.smoothing;
        Ok(m)
    }
}

/// Stochastic memoryless policy over latent states, recorded only on the
/// states it was given for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPolicy {
    pub n_actions: usize,
    pub table: BTreeMap<LatentState, Vec<f64>>,
}

impl LatentPolicy {
    pub fn deterministic(n_actions: usize, choices: impl IntoIterator<Item = (LatentState, usize)>) -> Self {
        let table = choices
            .into_iter()
            .map(|(s, a)| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                (s, row)
            })
            .collect();
        LatentPolicy { n_actions, table }
    }

    pub fn probs(&self, s: LatentState) -> Result<&[f64]> {
        self.table
            .get(&s)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("latent policy undefined at state {s:#x}")))
    }

    /// Most likely action, ties to the lowest index.
    pub fn mode(&self, s: LatentState) -> Result<usize> {
        Ok(argmax(self.probs(s)?))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
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

/// Agent built from an embedding and a tabular latent policy.
pub struct TabularAgent<'a, E: StateEmbedding> {
    pub phi: &'a E,
    pub policy: &'a LatentPolicy,
}

impl<E: StateEmbedding> StateEmbedding for TabularAgent<'_, E> {
    fn n_bits(&self) -> usize {
        self.phi.n_bits()
    }

    fn embed(&self, s: &GroundState, label: Label) -> Result<LatentState> {
        self.phi.embed(s, label)
    }
}

impl<E: StateEmbedding> LatentAgent for TabularAgent<'_, E> {
    fn n_latent_actions(&self) -> usize {
        self.policy.n_actions
    }

    fn action_probs(&self, s_bar: LatentState) -> Result<Vec<f64>> {
        Ok(self.policy.probs(s_bar)?.to_vec())
    }
}

/// Executes the epsilon-mimic mixture: at each step the latent agent acts
/// with probability `epsilon`, otherwise `base` does. The mixture coin uses
/// its own random stream, so `epsilon = 0` reproduces `rollout(env, base)`.
pub fn run_latent_policy(
    env: &Environment,
    agent: &dyn LatentAgent,
    steps: usize,
    seed: u64,
    epsilon: f64,
    base: Option<&dyn Policy>,
) -> Result<Trace> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon_mimic = {epsilon} outside [0, 1]")));
    }
    if epsilon < 1.0 && base.is_none() {
        return Err(Error::invalid("a base policy is required when epsilon_mimic < 1"));
    }
    rollout_with(env, steps, seed, |s, rngs| {
        let use_latent = epsilon >= 1.0 || rngs.mixture.random::<f64>() < epsilon;
        if use_latent {
            latent_act(env, agent, s, &mut rngs.policy)
        } else {
            base.expect("checked above").act(env, s, &mut rngs.policy)
        }
    })
}

pub fn latent_act(env: &Environment, agent: &dyn LatentAgent, s: &GroundState, rng: &mut dyn RngCore) -> Result<Action> {
    let s_bar = agent.embed(s, env.label(s))?;
    let probs = agent.action_probs(s_bar)?;
    let a_bar = sample_index(&probs, rng);
    agent.decode_action(s, s_bar, a_bar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(s: u64, a: usize, r: f64, t: u64) -> LatentTransition {
        LatentTransition { s, a, r, s_next: t, reset: false }
    }

    #[test]
    fn relative_frequencies() {
        let mut c = CountTable::new(4, 1, 1);
        for _ in 0..3 {
            c.observe(&step(2, 0, 0.1, 4)).unwrap();
        }
        c.observe(&step(2, 0, 0.1, 6)).unwrap();
        let m = c.frequency_estimate();
        assert_eq!(m.prob(2, 0, 4).unwrap(), 0.75);
        assert_eq!(m.prob(2, 0, 6).unwrap(), 0.25);
        assert!((m.reward(2, 0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn single_observation_is_point_mass() {
        let mut c = CountTable::new(2, 0, 2);
        c.observe(&step(1, 1, 0.0, 3)).unwrap();
        let m = c.frequency_estimate();
        assert_eq!(m.row(1, 1).unwrap().next, vec![(3, 1.0)]);
    }

    #[test]
    fn unvisited_pair_is_an_error() {
        let mut c = CountTable::new(2, 0, 2);
        c.observe(&step(1, 1, 0.0, 3)).unwrap();
        let m = c.frequency_estimate();
        assert!(matches!(m.row(1, 0), Err(Error::UnsupportedPair { state: 1, action: 0 })));
    }

    #[test]
    fn json_roundtrip() {
        let mut c = CountTable::new(3, 1, 2);
        c.observe(&step(1, 0, 0.25, 3)).unwrap();
        c.observe(&step(3, 1, -0.125, 1)).unwrap();
        c.observe(&step(3, 1, -0.5, 5)).unwrap();
        let m = c.frequency_estimate();
        let back = LatentMdp::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn smoothing_fills_missing_pairs() {
        let mut c = CountTable::new(2, 0, 2);
        c.observe(&step(0, 0, 0.0, 1)).unwrap();
        c.observe(&step(1, 0, 0.0, 0)).unwrap();
        let m = c.frequency_estimate().smoothed_add_one();
        assert!(m.missing_pairs().is_empty());
        assert_eq!(m.prob(0, 1, 0).unwrap(), 0.5);
        assert_eq!(m.prob(0, 0, 1).unwrap(), 2.0 / 3.0);
        m.validate().unwrap();
    }

    #[test]
    fn merge_equals_joint_count() {
        let steps = [step(0, 0, 0.1, 1), step(1, 0, -0.2, 0), step(0, 0, 0.3, 0)];
        let mut joint = CountTable::new(1, 0, 1);
        let mut a = CountTable::new(1, 0, 1);
        let mut b = CountTable::new(1, 0, 1);
        for (i, s) in steps.iter().enumerate() {
            joint.observe(s).unwrap();
            if i % 2 == 0 { a.observe(s).unwrap() } else { b.observe(s).unwrap() }
        }
        b.merge(&a).unwrap();
        assert_eq!(joint, b);
        assert!(b.is_consistent());
    }
}
