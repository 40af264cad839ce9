//! Ground MDP primitives: states, labels, actions, transitions and traces.
//!
//! A [`Trace`] is one long interaction stream. Episodic environments are
//! folded into it: when an episode ends, the next recorded transition leaves
//! the terminal state and lands on a freshly sampled initial state, with its
//! `reset` flag set. Chaining (`s_next[t] == s[t + 1]`) therefore holds for
//! every trace, including across episode boundaries.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::Environment;
use crate::error::{Error, Result};

/// A point of the ground state space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundState(pub Vec<f64>);

impl GroundState {
    pub fn new(coords: Vec<f64>) -> Self {
        GroundState(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Binary label vector over the atomic propositions; bit `i` is proposition `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    bits: u64,
    len: u8,
}

impl Label {
    pub fn new(bits: u64, len: usize) -> Self {
        assert!(len <= 64, "at most 64 atomic propositions");
        let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
        Label { bits: bits & mask, len: len as u8 }
    }

    pub fn from_bools(values: &[bool]) -> Self {
        let bits = values
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i));
        Label::new(bits, values.len())
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        (self.bits >> i) & 1 == 1
    }

    pub fn to_vec(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.get(i) as u8).collect()
    }
}

/// A ground action: an index for discrete action spaces, a vector otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: GroundState,
    pub a: Action,
    /// Reward scaled to `[-1/2, 1/2]`.
    pub r: f64,
    pub s_next: GroundState,
    pub l: Label,
    pub l_next: Label,
    /// Set when `s_next` is a fresh initial state following an episode end.
    pub reset: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub env_id: String,
    pub seed: u64,
    pub n_ap: usize,
    pub dim: usize,
    pub transitions: Vec<Transition>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Checks `s_next[t] == s[t + 1]` for all `t`.
    pub fn is_chained(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].s_next == w[1].s && w[0].l_next == w[1].l)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = TraceHeader {
            env: self.env_id.clone(),
            seed: self.seed,
            ap: self.n_ap,
            dim: self.dim,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (t, tr) in self.transitions.iter().enumerate() {
            let line = TraceLine {
                t,
                s: tr.s.0.clone(),
                a: tr.a.clone(),
                r: tr.r,
                l: tr.l.to_vec(),
                reset: tr.reset,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        if let Some(last) = self.transitions.last() {
            let end = TraceEnd {
                end: true,
                s: last.s_next.0.clone(),
                l: last.l_next.to_vec(),
            };
            serde_json::to_writer(&mut out, &end)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// SHA-256 of the JSON-lines serialization, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl_string().as_bytes()))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Trace> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trace file".into()))??;
        let header: TraceHeader = serde_json::from_str(&header_line)?;
        let mut rows: Vec<TraceLine> = Vec::new();
        let mut end: Option<TraceEnd> = None;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if end.is_some() {
                return Err(Error::Parse("content after trace end marker".into()));
            }
            match serde_json::from_str::<TraceRecord>(&line)? {
                TraceRecord::Step(row) => {
                    if row.t != rows.len() {
                        return Err(Error::Parse(format!(
                            "expected step {}, found {}",
                            rows.len(),
                            row.t
                        )));
                    }
                    rows.push(row)
                }
                TraceRecord::End(e) => end = Some(e),
            }
        }
        let to_label = |bits: &[u8]| -> Result<Label> {
            if bits.len() != header.ap {
                return Err(Error::Parse(format!(
                    "label of length {} but header declares {} propositions",
                    bits.len(),
                    header.ap
                )));
            }
            Ok(Label::from_bools(&bits.iter().map(|&b| b != 0).collect::<Vec<_>>()))
        };
        if !rows.is_empty() && end.is_none() {
            return Err(Error::Parse("missing trace end marker".into()));
        }
        let mut transitions = Vec::with_capacity(rows.len());
        for i in 0..rows.len() {
            let (s_next, l_next) = if i + 1 < rows.len() {
                (rows[i + 1].s.clone(), to_label(&rows[i + 1].l)?)
            } else {
                let e = end.as_ref().expect("checked above");
                (e.s.clone(), to_label(&e.l)?)
            };
            let row = &rows[i];
            transitions.push(Transition {
                s: GroundState(row.s.clone()),
                a: row.a.clone(),
                r: row.r,
                s_next: GroundState(s_next),
                l: to_label(&row.l)?,
                l_next,
                reset: row.reset,
            });
        }
        Ok(Trace {
            env_id: header.env,
            seed: header.seed,
            n_ap: header.ap,
            dim: header.dim,
            transitions,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceHeader {
    env: String,
    seed: u64,
    ap: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    t: usize,
    s: Vec<f64>,
    a: Action,
    r: f64,
    l: Vec<u8>,
    reset: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceEnd {
    end: bool,
    s: Vec<f64>,
    l: Vec<u8>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TraceRecord {
    Step(TraceLine),
    End(TraceEnd),
}

/// Affine map of `[min, max]` onto `[-1/2, 1/2]`.
pub fn scale_reward(raw: f64, bounds: (f64, f64)) -> Result<f64> {
    let (min, max) = bounds;
    if !(min < max) {
        return Err(Error::invalid(format!("reward bounds ({min}, {max}) are not increasing")));
    }
    if !(raw >= min && raw <= max) {
        return Err(Error::RewardOutOfBounds { raw, min, max });
    }
    let scaled = (raw - min) / (max - min) - 0.5;
    Ok(scaled.clamp(-0.5, 0.5))
}

/// Independent random streams of one rollout. Dynamics noise and policy
/// sampling never share draws, so swapping the policy leaves the dynamics
/// noise sequence untouched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutRng {
    pub dynamics: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub mixture: ChaCha8Rng,
}

impl RolloutRng {
    pub const DYNAMICS_STREAM: u64 = 0;
    pub const POLICY_STREAM: u64 = 1;
    pub const MIXTURE_STREAM: u64 = 2;

    pub fn new(seed: u64) -> Self {
        RolloutRng {
            dynamics: stream(seed, Self::DYNAMICS_STREAM),
            policy: stream(seed, Self::POLICY_STREAM),
            mixture: stream(seed, Self::MIXTURE_STREAM),
        }
    }
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A memoryless stochastic policy over ground states.
pub trait Policy {
    fn act(&self, env: &Environment, s: &GroundState, rng: &mut dyn RngCore) -> Result<Action>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, env: &Environment, s: &GroundState, rng: &mut dyn RngCore) -> Result<Action> {
        (**self).act(env, s, rng)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn act(&self, env: &Environment, s: &GroundState, rng: &mut dyn RngCore) -> Result<Action> {
        (**self).act(env, s, rng)
    }
}

/// Uniform choice among the discrete actions of the environment.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformRandomPolicy;

impl Policy for UniformRandomPolicy {
    fn act(&self, env: &Environment, _s: &GroundState, rng: &mut dyn RngCore) -> Result<Action> {
        match env.n_actions() {
            Some(n) => Ok(Action::Discrete(rng.random_range(0..n))),
            None => {
                let (lo, hi) = env.action_bounds();
                Ok(Action::Continuous(vec![rng.random_range(lo..=hi)]))
            }
        }
    }
}

/// Runs `policy` in `env` for exactly `steps` transitions.
pub fn rollout<P: Policy + ?Sized>(env: &Environment, policy: &P, steps: usize, seed: u64) -> Result<Trace> {
    rollout_with(env, steps, seed, |s, rngs| policy.act(env, s, &mut rngs.policy))
}

/// Rollout driver shared by every collection loop. `choose` receives the
/// current state and the rollout's random streams.
pub fn rollout_with<F>(env: &Environment, steps: usize, seed: u64, mut choose: F) -> Result<Trace>
where
    F: FnMut(&GroundState, &mut RolloutRng) -> Result<Action>,
{
    if steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    let mut rngs = RolloutRng::new(seed);
    let mut collector = Collector::new(env, &mut rngs.dynamics);
    let mut transitions = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = collector.state().clone();
        let a = choose(&s, &mut rngs)?;
        transitions.push(collector.advance(env, a, &mut rngs.dynamics)?);
    }
    Ok(Trace {
        env_id: env.id().to_string(),
        seed,
        n_ap: env.n_ap(),
        dim: env.state_dim(),
        transitions,
    })
}

/// Unscaled returns of the first `episodes` complete episodes, collected
/// with the same reset-folding stepper as rollouts.
pub fn episode_returns<F>(env: &Environment, episodes: usize, seed: u64, mut choose: F) -> Result<Vec<f64>>
where
    F: FnMut(&GroundState, &mut RolloutRng) -> Result<Action>,
{
    if env.max_episode_steps().is_none() {
        return Err(Error::invalid(format!("environment {} is not episodic", env.id())));
    }
    let mut rngs = RolloutRng::new(seed);
    let mut collector = Collector::new(env, &mut rngs.dynamics);
    while collector.finished_returns().len() < episodes {
        let s = collector.state().clone();
        let a = choose(&s, &mut rngs)?;
        collector.advance(env, a, &mut rngs.dynamics)?;
    }
    Ok(collector.finished_returns()[..episodes].to_vec())
}

/// Incremental stepper implementing the reset-folding convention; used by
/// rollouts and by the training loop, which interleaves collection with
/// optimisation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Collector {
    state: GroundState,
    label: Label,
    episode_len: usize,
    pending_reset: bool,
    episode_return: f64,
    finished_returns: Vec<f64>,
}

impl Collector {
    pub fn new(env: &Environment, rng: &mut dyn RngCore) -> Self {
        let state = env.reset(rng);
        let label = env.label(&state);
        Collector {
            state,
            label,
            episode_len: 0,
            pending_reset: false,
            episode_return: 0.0,
            finished_returns: Vec::new(),
        }
    }

    pub fn state(&self) -> &GroundState {
        &self.state
    }

    pub fn label(&self) -> Label {
        self.label
    }

    /// Unscaled returns of the episodes completed so far.
    pub fn finished_returns(&self) -> &[f64] {
        &self.finished_returns
    }

    pub fn advance(&mut self, env: &Environment, a: Action, rng: &mut dyn RngCore) -> Result<Transition> {
        let (next, r, reset) = if self.pending_reset {
            let s0 = env.reset(rng);
            self.pending_reset = false;
            self.episode_len = 0;
            (s0, env.scale(env.reset_reward())?, true)
        } else {
            let out = env.step(&self.state, &a, rng)?;
            self.episode_len += 1;
            self.episode_return += out.raw_reward;
            if out.terminated || env.max_episode_steps().is_some_and(|m| self.episode_len >= m) {
                self.pending_reset = true;
                self.finished_returns.push(self.episode_return);
                self.episode_return = 0.0;
            }
            (out.next, env.scale(out.raw_reward)?, false)
        };
        if !next.is_finite() {
            return Err(Error::NonFinite { context: format!("{} dynamics", env.id()) });
        }
        let l_next = env.label(&next);
        let tr = Transition {
            s: std::mem::replace(&mut self.state, next.clone()),
            a,
            r,
            s_next: next,
            l: self.label,
            l_next,
            reset,
        };
        self.label = l_next;
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_reward_endpoints_and_midpoint() {
        assert_eq!(scale_reward(1.0, (0.0, 1.0)).unwrap(), 0.5);
        assert_eq!(scale_reward(0.0, (0.0, 1.0)).unwrap(), -0.5);
        assert_eq!(scale_reward(0.5, (0.0, 1.0)).unwrap(), 0.0);
        assert_eq!(scale_reward(-100.0, (-200.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn scale_reward_rejects_out_of_bounds() {
        assert!(matches!(
            scale_reward(1.5, (0.0, 1.0)),
            Err(Error::RewardOutOfBounds { .. })
        ));
        assert!(scale_reward(0.0, (1.0, 1.0)).is_err());
    }

    #[test]
    fn label_bits_roundtrip() {
        let l = Label::from_bools(&[true, false, true]);
        assert_eq!(l.bits(), 0b101);
        assert_eq!(l.to_vec(), vec![1, 0, 1]);
        assert!(l.get(2) && !l.get(1));
    }

    #[test]
    fn streams_are_disjoint() {
        let mut a = stream(3, RolloutRng::DYNAMICS_STREAM);
        let mut b = stream(3, RolloutRng::POLICY_STREAM);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
