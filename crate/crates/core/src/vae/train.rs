use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ElboMode, ElboTerms, Normalizer, Schedule, VaeConfig, VaeModel};
use crate::autodiff::{Adam, Graph};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::latent::{argmax, LatentAgent, LatentState};
use crate::mdp::{episode_returns, rollout, stream, Action, Collector, GroundState, Policy, RolloutRng, Transition};
use crate::replay::{BufferConfig, ReplayBuffer};

pub const METRICS_HEADER: &str =
    "step,D,R,elbo,alpha,beta,lam_enc,lam_prior,eps_mimic,usage_entropy,return_eval";

pub const TRAINER_CHECKPOINT_VERSION: u32 = 1;

const TRAIN_STREAM: u64 = 3;
const PILOT_STREAM_SEED_OFFSET: u64 = 0x9e37_79b9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub distortion: f64,
    pub rate: f64,
    pub elbo: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lam_enc: f64,
    pub lam_prior: f64,
    pub eps_mimic: f64,
    /// Entropy in bits of the latent states visited by the encoder mode.
    pub usage_entropy: f64,
    pub return_eval: Option<f64>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let ret = self.return_eval.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.distortion,
            self.rate,
            self.elbo,
            self.alpha,
            self.beta,
            self.lam_enc,
            self.lam_prior,
            self.eps_mimic,
            self.usage_entropy,
            ret
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Entropy in bits of the empirical distribution of `states`.
pub fn usage_entropy(states: &[LatentState]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<LatentState, usize> = BTreeMap::new();
    for s in states {
        *counts.entry(*s).or_insert(0) += 1;
    }
    let n = states.len() as f64;
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum()
}

/// Mean and per-episode returns of the latent policy executed through the
/// encoder mode, taking the most likely latent action.
pub fn distill_eval(env: &Environment, agent: &dyn LatentAgent, episodes: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let returns = episode_returns(env, episodes, seed, |s, _| greedy_action(env, agent, s))?;
    Ok((returns.iter().sum::<f64>() / episodes as f64, returns))
}

pub fn greedy_action(env: &Environment, agent: &dyn LatentAgent, s: &GroundState) -> Result<Action> {
    let z = agent.embed(s, env.label(s))?;
    let a_bar = argmax(&agent.action_probs(z)?);
    agent.decode_action(s, z, a_bar)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerDoc {
    version: u32,
    model: serde_json::Value,
    opt: Adam,
    buffer: ReplayBuffer<Transition>,
    collector: Collector,
    rngs: RolloutRng,
    train_rng: ChaCha8Rng,
    t: u64,
    updates: u64,
    metrics: Vec<MetricsRow>,
    last_terms: Option<ElboTerms>,
}

/// Interleaved collection and optimisation. Every `steps_per_update`
/// environment steps past the warmup, one minibatch update is applied.
pub struct Trainer<'a> {
    pub env: Environment,
    base: &'a dyn Policy,
    pub model: VaeModel,
    opt: Adam,
    buffer: ReplayBuffer<Transition>,
    collector: Collector,
    rngs: RolloutRng,
    train_rng: ChaCha8Rng,
    t: u64,
    updates: u64,
    pub metrics: Vec<MetricsRow>,
    last_terms: Option<ElboTerms>,
}

impl<'a> Trainer<'a> {
    /// The state normaliser is fitted on a pilot rollout of the base policy
    /// drawn from its own seed, so the training streams are unaffected.
    pub fn new(env: &Environment, base: &'a dyn Policy, config: VaeConfig) -> Result<Self> {
        config.validate(env)?;
        let pilot_len = config.warmup.max(1) as usize;
        let pilot = rollout(env, base, pilot_len, config.seed.wrapping_add(PILOT_STREAM_SEED_OFFSET))?;
        let norm = Normalizer::fit(pilot.transitions.iter().map(|t| &t.s), env.state_dim());
        let buffer = ReplayBuffer::new(BufferConfig {
            capacity: config.buffer_capacity,
            mode: config.replay,
            priority_exponent: config.priority_exponent,
            max_priority: config.max_priority,
        })?;
        let seed = config.seed;
        let model = VaeModel::new(env, config, norm)?;
        let opt = Adam::new(&model.store, model.config.lr);
        let mut rngs = RolloutRng::new(seed);
        let collector = Collector::new(env, &mut rngs.dynamics);
        Ok(Trainer {
            env: env.clone(),
            base,
            model,
            opt,
            buffer,
            collector,
            rngs,
            train_rng: stream(seed, TRAIN_STREAM),
            t: 0,
            updates: 0,
            metrics: Vec::new(),
            last_terms: None,
        })
    }

    /// Serializes the complete training state: parameters, optimiser
    /// moments, replay contents, random streams and counters. Resuming from
    /// it continues exactly as the uninterrupted run would.
    pub fn checkpoint(&self) -> String {
        let doc = TrainerDoc {
            version: TRAINER_CHECKPOINT_VERSION,
            model: serde_json::from_str(&self.model.to_json()).expect("model JSON is valid"),
            opt: self.opt.clone(),
            buffer: self.buffer.clone(),
            collector: self.collector.clone(),
            rngs: self.rngs.clone(),
            train_rng: self.train_rng.clone(),
            t: self.t,
            updates: self.updates,
            metrics: self.metrics.clone(),
            last_terms: self.last_terms,
        };
        serde_json::to_string(&doc).expect("trainer state serializes")
    }

    pub fn resume(base: &'a dyn Policy, text: &str) -> Result<Self> {
        let doc: TrainerDoc = serde_json::from_str(text)?;
        if doc.version != TRAINER_CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported trainer checkpoint version {}", doc.version)));
        }
        let model = VaeModel::from_json(&doc.model.to_string())?;
        let env = Environment::from_config(model.env_config())?;
        if doc.opt.state.m.len() != model.store.len() {
            return Err(Error::Parse("optimiser state does not match the model parameters".into()));
        }
        Ok(Trainer {
            env,
            base,
            model,
            opt: doc.opt,
            buffer: doc.buffer,
            collector: doc.collector,
            rngs: doc.rngs,
            train_rng: doc.train_rng,
            t: doc.t,
            updates: doc.updates,
            metrics: doc.metrics,
            last_terms: doc.last_terms,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn buffer(&self) -> &ReplayBuffer<Transition> {
        &self.buffer
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::at(&self.model.config, self.t)
    }

    pub fn last_terms(&self) -> Option<ElboTerms> {
        self.last_terms
    }

    /// One environment step under the epsilon-mimic mixture, followed by an
    /// update when due.
    pub fn step(&mut self) -> Result<()> {
        let sched = self.schedule();
        let s = self.collector.state().clone();
        let use_latent = sched.eps_mimic > 0.0 && self.rngs.mixture.random::<f64>() < sched.eps_mimic;
        let a = if use_latent {
            crate::latent::latent_act(&self.env, &self.model, &s, &mut self.rngs.policy)?
        } else {
            self.base.act(&self.env, &s, &mut self.rngs.policy)?
        };
        let tr = self.collector.advance(&self.env, a, &mut self.rngs.dynamics)?;
        let hint = self.model.encode_mode(&tr.s, tr.l)?;
        self.buffer.insert(tr, hint);
        self.t += 1;
        let cfg = &self.model.config;
        if self.t >= cfg.warmup && (self.t - cfg.warmup) % cfg.steps_per_update == 0 {
            self.update()?;
        }
        if self.t >= self.model.config.warmup && self.t % self.model.config.eval_interval == 0 {
            let row = self.evaluate()?;
            self.metrics.push(row);
        }
        Ok(())
    }

    /// One minibatch gradient step on the negative `<alpha, beta>`-ELBO.
    pub fn update(&mut self) -> Result<ElboTerms> {
        let sched = self.schedule();
        let batch = self.buffer.sample(self.model.config.batch_size, sched.omega, &mut self.train_rng)?;
        let tensors = self.model.batch_tensors(&batch.items, &batch.weights)?;
        let mut g = Graph::new();
        let out = self.model.elbo(&mut g, &tensors, &sched, ElboMode::Relaxed, &mut self.train_rng)?;
        let loss = g.value(out.loss).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.t });
        }
        let grads = g.backward(out.loss)?;
        if !grads.is_finite() {
            return Err(Error::Diverged { step: self.t });
        }
        self.opt.step(&mut self.model.store, &grads)?;
        if self.model.config.replay == crate::replay::ReplayMode::Loss {
            for (&slot, &l) in batch.slots.iter().zip(&out.per_sample) {
                self.buffer.update_priority_loss(slot, l)?;
            }
        }
        self.updates += 1;
        self.last_terms = Some(out.terms);
        Ok(out.terms)
    }

    /// Objective on a large replay batch with discrete latent samples and
    /// analytic rate, plus latent usage and optionally the distilled return.
    pub fn evaluate(&mut self) -> Result<MetricsRow> {
        let sched = self.schedule();
        let n = self.model.config.eval_batch.min(self.buffer.len());
        let batch = self.buffer.sample(n, sched.omega, &mut self.train_rng)?;
        let tensors = self.model.batch_tensors(&batch.items, &batch.weights)?;
        let mut g = Graph::new();
        let out = self.model.elbo(&mut g, &tensors, &sched, ElboMode::Discrete, &mut self.train_rng)?;
        let states: Vec<LatentState> = batch
            .items
            .iter()
            .map(|t| self.model.encode_mode(&t.s, t.l))
            .collect::<Result<_>>()?;
        let return_eval = if self.model.config.eval_episodes > 0 && self.env.max_episode_steps().is_some() {
            let seed = self.model.config.seed.wrapping_add(self.t);
            Some(distill_eval(&self.env, &self.model, self.model.config.eval_episodes, seed)?.0)
        } else {
            None
        };
        Ok(MetricsRow {
            step: self.t,
            distortion: out.terms.distortion,
            rate: out.terms.rate,
            elbo: out.terms.elbo(),
            alpha: sched.alpha,
            beta: sched.beta,
            lam_enc: sched.lam_enc,
            lam_prior: sched.lam_prior,
            eps_mimic: sched.eps_mimic,
            usage_entropy: usage_entropy(&states),
            return_eval,
        })
    }

    /// Runs until `train_steps` environment steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        while self.t < self.model.config.train_steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains a model from scratch with the given base policy.
pub fn train(env: &Environment, base: &dyn Policy, config: VaeConfig) -> Result<(VaeModel, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(env, base, config)?;
    trainer.run()?;
    Ok((trainer.model, trainer.metrics))
}
