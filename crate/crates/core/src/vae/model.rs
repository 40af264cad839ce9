use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::dist::{
    check_gumbel_temperature, gumbel_softmax, gumbel_softmax_log_density, gumbel_tensor, logistic_tensor,
    relaxed_bernoulli, relaxed_bernoulli_log_density,
};
use super::nets::{Activation, Mlp};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::env::{EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::latent::{argmax, label_mask, sample_index, LatentAgent, LatentState, StateEmbedding};
use crate::mdp::{stream, Action, GroundState, Label, Transition};
use crate::replay::ReplayMode;

pub const MODEL_VERSION: u32 = 1;

/// Logit standing in for a certain label bit inside Bernoulli KL terms.
const LABEL_LOGIT: f64 = 30.0;
/// Lower bound on decoder scales.
const MIN_SCALE: f64 = 1e-3;

/// Hyper-parameters of the variational model and its training loop.
/// Step counts are environment steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    /// Latent state bits, label bits included.
    pub n_bits: usize,
    /// Size of the latent action space; zero keeps the ground actions.
    pub n_latent_actions: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub lam_enc: f64,
    pub lam_prior: f64,
    pub lam_action_enc: f64,
    pub lam_action_prior: f64,
    pub tau_lam_enc: f64,
    pub tau_lam_prior: f64,
    pub alpha: f64,
    pub alpha_action: f64,
    pub tau_alpha: f64,
    pub beta: f64,
    pub tau_beta: f64,
    pub eps_mimic: f64,
    pub tau_eps: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup: u64,
    pub steps_per_update: u64,
    pub replay: ReplayMode,
    pub priority_exponent: f64,
    pub max_priority: f64,
    pub omega: f64,
    pub tau_omega: f64,
    pub train_steps: u64,
    pub eval_interval: u64,
    pub eval_batch: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl VaeConfig {
    /// Defaults for CartPole, also used for the lifted chain with fewer bits.
    pub fn cartpole() -> Self {
        VaeConfig {
            n_bits: 9,
            n_latent_actions: 0,
            hidden: vec![64, 64],
            activation: Activation::LeakyRelu,
            lr: 1e-3,
            lam_enc: 2.0 / 3.0,
            lam_prior: 0.5,
            lam_action_enc: 0.5,
            lam_action_prior: 1.0 / 3.0,
            tau_lam_enc: 1e-6,
            tau_lam_prior: 2e-6,
            alpha: 10.0,
            alpha_action: 0.0,
            tau_alpha: 1e-5,
            beta: 0.0,
            tau_beta: 5e-5,
            eps_mimic: 0.0,
            tau_eps: 0.0,
            batch_size: 128,
            buffer_capacity: 1_000_000,
            warmup: 10_000,
            steps_per_update: 16,
            replay: ReplayMode::Bucket,
            priority_exponent: 1.0 / 3.0,
            max_priority: 1.0,
            omega: 0.4,
            tau_omega: 7e-5,
            train_steps: 200_000,
            eval_interval: 10_000,
            eval_batch: 1024,
            eval_episodes: 5,
            seed: 0,
        }
    }

    pub fn mountaincar() -> Self {
        VaeConfig { n_bits: 10, tau_omega: 7.5e-5, ..Self::cartpole() }
    }

    pub fn pendulum() -> Self {
        VaeConfig {
            n_bits: 13,
            n_latent_actions: 3,
            activation: Activation::Relu,
            lr: 1e-4,
            lam_action_enc: 0.5,
            lam_action_prior: 1.0 / 3.0,
            alpha_action: 1.0,
            tau_alpha: 7.5e-5,
            tau_beta: 7.5e-5,
            replay: ReplayMode::Loss,
            priority_exponent: 0.3,
            tau_omega: 1e-5,
            eps_mimic: 0.5,
            tau_eps: 1e-5,
            ..Self::cartpole()
        }
    }

    pub fn for_env(id: &str) -> Result<Self> {
        match id {
            "cartpole" => Ok(Self::cartpole()),
            "mountaincar" => Ok(Self::mountaincar()),
            "pendulum" => Ok(Self::pendulum()),
            "lifted_chain" => Ok(VaeConfig { n_bits: 6, ..Self::cartpole() }),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }

    /// Environment defaults with the keys of `overrides` replaced. Unknown
    /// keys are rejected.
    pub fn for_env_with(id: &str, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_env(id)?)?;
        match overrides {
            serde_json::Value::Null => {}
            serde_json::Value::Object(map) => {
                let obj = base.as_object_mut().expect("config serializes to an object");
                for (k, v) in map {
                    if !obj.contains_key(k) {
                        return Err(Error::Config(format!("unknown vae key `{k}`")));
                    }
                    obj.insert(k.clone(), v.clone());
                }
            }
            _ => return Err(Error::Config("vae block must be an object".into())),
        }
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self, env: &Environment) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n_ap = env.n_ap();
        if self.n_bits <= n_ap || self.n_bits > 63 {
            return bad(format!("n_bits = {} must exceed the {n_ap} label bits and be at most 63", self.n_bits));
        }
        if env.n_actions().is_none() && self.n_latent_actions == 0 {
            return bad("continuous actions need a latent action space (n_latent_actions > 0)".into());
        }
        if self.n_latent_actions == 1 {
            return bad("a latent action space needs at least two actions".into());
        }
        for (name, t) in [
            ("lam_enc", self.lam_enc),
            ("lam_prior", self.lam_prior),
            ("lam_action_enc", self.lam_action_enc),
            ("lam_action_prior", self.lam_action_prior),
        ] {
            if !(t > 0.0) {
                return bad(format!("temperature {name} = {t} must be positive"));
            }
        }
        if self.n_latent_actions > 0 {
            check_gumbel_temperature(self.n_latent_actions, self.lam_action_enc)?;
            check_gumbel_temperature(self.n_latent_actions, self.lam_action_prior)?;
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta = {} outside [0, 1]", self.beta));
        }
        if !(self.alpha >= 0.0 && self.alpha_action >= 0.0) {
            return bad("entropy scales must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.eps_mimic) || !(0.0..=1.0).contains(&self.omega) {
            return bad("eps_mimic and omega must lie in [0, 1]".into());
        }
        for (name, t) in [
            ("tau_lam_enc", self.tau_lam_enc),
            ("tau_lam_prior", self.tau_lam_prior),
            ("tau_alpha", self.tau_alpha),
            ("tau_beta", self.tau_beta),
            ("tau_eps", self.tau_eps),
            ("tau_omega", self.tau_omega),
        ] {
            if !(0.0..1.0).contains(&t) {
                return bad(format!("annealing term {name} = {t} outside [0, 1)"));
            }
        }
        if !(self.lr > 0.0) || self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("lr must be positive and hidden widths nonzero".into());
        }
        if self.batch_size == 0 || self.steps_per_update == 0 || self.eval_interval == 0 || self.eval_batch == 0 {
            return bad("batch sizes and intervals must be positive".into());
        }
        if self.buffer_capacity < self.batch_size.max(self.eval_batch) {
            return bad("buffer capacity below the batch size".into());
        }
        if self.warmup < self.batch_size.max(self.eval_batch) as u64 {
            return bad("warmup must collect at least one batch of transitions".into());
        }
        Ok(())
    }
}

/// Annealed scalars at one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub alpha: f64,
    pub beta: f64,
    pub lam_enc: f64,
    pub lam_prior: f64,
    pub lam_action_enc: f64,
    pub lam_action_prior: f64,
    pub eps_mimic: f64,
    pub omega: f64,
}

impl Schedule {
    pub fn at(cfg: &VaeConfig, t: u64) -> Self {
        use super::dist::{anneal, AnnealMode::*};
        let t0 = cfg.warmup;
        Schedule {
            alpha: anneal(cfg.alpha, cfg.tau_alpha, t, t0, ToZero),
            beta: anneal(cfg.beta, cfg.tau_beta, t, t0, ToOne),
            lam_enc: anneal(cfg.lam_enc, cfg.tau_lam_enc, t, t0, ToZero),
            lam_prior: anneal(cfg.lam_prior, cfg.tau_lam_prior, t, t0, ToZero),
            lam_action_enc: anneal(cfg.lam_action_enc, cfg.tau_lam_enc, t, t0, ToZero),
            lam_action_prior: anneal(cfg.lam_action_prior, cfg.tau_lam_prior, t, t0, ToZero),
            eps_mimic: anneal(cfg.eps_mimic, cfg.tau_eps, t, t0, ToZero),
            omega: anneal(cfg.omega, cfg.tau_omega, t, t0, ToOne),
        }
    }
}

/// How latent variables are drawn when evaluating the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElboMode {
    /// Relaxed samples and Monte-Carlo rate, used for gradient steps.
    Relaxed,
    /// Discrete samples and analytic rate.
    Discrete,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub distortion: f64,
    pub rate: f64,
    /// `alpha (H(q) + alpha_A H(q_A))` of the marginal encoders.
    pub entropy_reg: f64,
    /// `-(D + beta R) + entropy_reg`.
    pub alpha_beta_elbo: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        -(self.distortion + self.rate)
    }
}

/// Per-coordinate standardisation of ground states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit<'a>(states: impl IntoIterator<Item = &'a GroundState>, dim: usize) -> Self {
        let mut n = 0.0;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for s in states {
            n += 1.0;
            for (i, &x) in s.coords().iter().enumerate() {
                sum[i] += x;
                sq[i] += x * x;
            }
        }
        if n == 0.0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-6 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, s: &GroundState) -> Vec<f64> {
        s.coords().iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, sd))| (x - m) / sd).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum GroundActions {
    Discrete(usize),
    Continuous { low: f64, high: f64 },
}

impl GroundActions {
    fn width(&self) -> usize {
        match self {
            GroundActions::Discrete(n) => *n,
            GroundActions::Continuous { .. } => 1,
        }
    }
}

/// Batch of transitions laid out as network inputs.
pub struct BatchTensors {
    pub size: usize,
    s: Tensor,
    s_next: Tensor,
    labels: Tensor,
    labels_next: Tensor,
    /// One-hot discrete actions or normalised continuous actions.
    actions: Tensor,
    rewards: Tensor,
    /// Importance weights normalised to sum to one.
    weights: Tensor,
}

pub struct ElboOutput {
    pub loss: Var,
    pub terms: ElboTerms,
    /// `D_i + beta R_i` of every transition.
    pub per_sample: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    version: u32,
    env: EnvConfig,
    config: VaeConfig,
    norm: Normalizer,
    params: serde_json::Value,
}

/// Encoder, latent dynamics, latent policy and decoders.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: VaeConfig,
    env_config: EnvConfig,
    n_ap: usize,
    state_dim: usize,
    ground: GroundActions,
    pub norm: Normalizer,
    pub store: ParamStore,
    encoder: Mlp,
    transition: Mlp,
    policy: Mlp,
    reward: Mlp,
    decoder: Mlp,
    action_encoder: Option<Mlp>,
    action_decoder: Option<Mlp>,
}

fn bits_of(s: LatentState, n_bits: usize) -> Vec<f64> {
    (0..n_bits).map(|i| ((s >> i) & 1) as f64).collect()
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

impl VaeModel {
    pub fn new(env: &Environment, config: VaeConfig, norm: Normalizer) -> Result<Self> {
        config.validate(env)?;
        let ground = match env.n_actions() {
            Some(n) => GroundActions::Discrete(n),
            None => {
                let (low, high) = env.action_bounds();
                GroundActions::Continuous { low, high }
            }
        };
        let n_ap = env.n_ap();
        let d = env.state_dim();
        if norm.mean.len() != d || norm.std.len() != d {
            return Err(Error::invalid("normaliser dimension differs from the state dimension"));
        }
        let nb = config.n_bits;
        let h = config.hidden.clone();
        let act = config.activation;
        let mut rng = stream(config.seed, 10);
        let mut store = ParamStore::new();
        let latent_actions = config.n_latent_actions > 0;
        let act_in = if latent_actions { config.n_latent_actions } else { ground.width() };
        let encoder = Mlp::new(&mut store, "encoder", d, &h, nb - n_ap, act, &mut rng);
        let transition = Mlp::new(&mut store, "transition", nb + act_in, &h, nb, act, &mut rng);
        let n_policy = if latent_actions { config.n_latent_actions } else { ground.width() };
        let policy = Mlp::new(&mut store, "policy", nb, &h, n_policy, act, &mut rng);
        let reward = Mlp::new(&mut store, "reward", nb + act_in, &h, 2, act, &mut rng);
        let decoder = Mlp::new(&mut store, "decoder", nb, &h, 2 * d, act, &mut rng);
        let (action_encoder, action_decoder) = if latent_actions {
            let k = config.n_latent_actions;
            let enc = Mlp::new(&mut store, "action_encoder", nb + ground.width(), &h, k, act, &mut rng);
            let out = match ground {
                GroundActions::Discrete(n) => n,
                GroundActions::Continuous { .. } => 2,
            };
            let dec = Mlp::new(&mut store, "action_decoder", nb + k, &h, out, act, &mut rng);
            (Some(enc), Some(dec))
        } else {
            (None, None)
        };
        Ok(VaeModel {
            config,
            env_config: env.config(),
            n_ap,
            state_dim: d,
            ground,
            norm,
            store,
            encoder,
            transition,
            policy,
            reward,
            decoder,
            action_encoder,
            action_decoder,
        })
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_config
    }

    pub fn n_ap(&self) -> usize {
        self.n_ap
    }

    fn action_features(&self, a: &Action) -> Result<Vec<f64>> {
        match (self.ground, a) {
            (GroundActions::Discrete(n), Action::Discrete(i)) if *i < n => Ok(one_hot(*i, n)),
            (GroundActions::Continuous { low, high }, Action::Continuous(v)) if v.len() == 1 => {
                Ok(vec![2.0 * (v[0] - low) / (high - low) - 1.0])
            }
            _ => Err(Error::invalid(format!("action {a:?} does not fit the model"))),
        }
    }

    pub fn batch_tensors(&self, items: &[Transition], weights: &[f64]) -> Result<BatchTensors> {
        let b = items.len();
        if b == 0 || weights.len() != b {
            return Err(Error::ShapeMismatch { op: "batch", detail: format!("{b} transitions, {} weights", weights.len()) });
        }
        let d = self.state_dim;
        let mut s = Vec::with_capacity(b * d);
        let mut s2 = Vec::with_capacity(b * d);
        let mut l = Vec::with_capacity(b * self.n_ap);
        let mut l2 = Vec::with_capacity(b * self.n_ap);
        let mut acts = Vec::new();
        let mut r = Vec::with_capacity(b);
        for t in items {
            if t.s.dim() != d || t.s_next.dim() != d {
                return Err(Error::ShapeMismatch { op: "batch", detail: "state dimension".into() });
            }
            s.extend(self.norm.apply(&t.s));
            s2.extend(self.norm.apply(&t.s_next));
            l.extend((0..self.n_ap).map(|i| t.l.get(i) as u8 as f64));
            l2.extend((0..self.n_ap).map(|i| t.l_next.get(i) as u8 as f64));
            acts.extend(self.action_features(&t.a)?);
            r.push(t.r);
        }
        let total: f64 = weights.iter().sum();
        Ok(BatchTensors {
            size: b,
            s: Tensor::new(b, d, s)?,
            s_next: Tensor::new(b, d, s2)?,
            labels: Tensor::new(b, self.n_ap, l)?,
            labels_next: Tensor::new(b, self.n_ap, l2)?,
            actions: Tensor::new(b, self.ground.width(), acts)?,
            rewards: Tensor::new(b, 1, r)?,
            weights: Tensor::new(b, 1, weights.iter().map(|w| w / total).collect())?,
        })
    }

    /// Gaussian log-likelihood of `target` under `[mean | raw_scale]` columns.
    fn gaussian_ll(g: &mut Graph, params: Var, target: Var, dim: usize) -> Result<Var> {
        let mean = g.slice_cols(params, 0, dim)?;
        let raw = g.slice_cols(params, dim, 2 * dim)?;
        let sp = g.softplus(raw)?;
        let scale = g.add_scalar(sp, MIN_SCALE)?;
        let log_scale = g.log(scale)?;
        let lp = g.gaussian_log_prob(target, mean, log_scale)?;
        g.sum_cols(lp)
    }

    fn bernoulli_entropy_of_marginal(g: &mut Graph, logits: Var) -> Result<Var> {
        let p = g.sigmoid(logits)?;
        let m = g.mean_rows(p)?;
        let lp = g.log(m)?;
        let a = g.mul(m, lp)?;
        let q = g.neg(m)?;
        let q = g.add_scalar(q, 1.0)?;
        let lq = g.log(q)?;
        let b = g.mul(q, lq)?;
        let s = g.add(a, b)?;
        let s = g.sum(s)?;
        g.neg(s)
    }

    fn categorical_entropy_of_marginal(g: &mut Graph, logits: Var) -> Result<Var> {
        let p = g.softmax(logits)?;
        let m = g.mean_rows(p)?;
        let lp = g.log(m)?;
        let a = g.mul(m, lp)?;
        let s = g.sum(a)?;
        g.neg(s)
    }

    fn hard_bits(logits: &Tensor, rng: &mut dyn RngCore) -> Tensor {
        let data = logits
            .data
            .iter()
            .map(|a| {
                let p = 1.0 / (1.0 + (-a).exp());
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor { shape: logits.shape, data }
    }

    /// Records the negative `<alpha, beta>`-ELBO of a batch on `g`.
    pub fn elbo(&self, g: &mut Graph, batch: &BatchTensors, sched: &Schedule, mode: ElboMode, rng: &mut dyn RngCore) -> Result<ElboOutput> {
        let b = batch.size;
        let n_ap = self.n_ap;
        let nb = self.config.n_bits;
        let k = nb - n_ap;
        let s = g.constant(batch.s.clone())?;
        let s2 = g.constant(batch.s_next.clone())?;
        let lab = g.constant(batch.labels.clone())?;
        let lab2 = g.constant(batch.labels_next.clone())?;
        let acts = g.constant(batch.actions.clone())?;
        let rew = g.constant(batch.rewards.clone())?;
        let w = g.constant(batch.weights.clone())?;

        let enc_s = self.encoder.forward(g, &self.store, s)?;
        let enc_s2 = self.encoder.forward(g, &self.store, s2)?;
        let (z_s, z_s2, l_s2) = match mode {
            ElboMode::Relaxed => {
                let (_, soft) = relaxed_bernoulli(g, enc_s, logistic_tensor(b, k, rng), sched.lam_enc)?;
                let (l2, soft2) = relaxed_bernoulli(g, enc_s2, logistic_tensor(b, k, rng), sched.lam_enc)?;
                (soft, soft2, Some(l2))
            }
            ElboMode::Discrete => {
                let h1 = Self::hard_bits(g.value(enc_s), rng);
                let h2 = Self::hard_bits(g.value(enc_s2), rng);
                (g.constant(h1)?, g.constant(h2)?, None)
            }
        };
        let zbar = g.concat(&[lab, z_s])?;
        let zbar2 = g.concat(&[lab2, z_s2])?;
        let prefix = g.value(zbar);
        for i in 0..b {
            let bits = |t: &Tensor| (0..n_ap).fold(0u64, |acc, j| acc | (u64::from(t.at(i, j) > 0.5) << j));
            if (0..n_ap).any(|j| prefix.at(i, j) != batch.labels.at(i, j)) {
                return Err(Error::LabelMismatch { step: i, latent: bits(prefix), label: bits(&batch.labels) });
            }
        }

        // Action branch: ground actions, or the latent action encoder.
        let mut rate_action = None;
        let mut entropy_action = None;
        let (act_in, policy_ll) = match (&self.action_encoder, &self.action_decoder) {
            (Some(aenc), Some(adec)) => {
                let n = self.config.n_latent_actions;
                let enc_in = g.concat(&[zbar, acts])?;
                let ae_logits = aenc.forward(g, &self.store, enc_in)?;
                let pol_logits = self.policy.forward(g, &self.store, zbar)?;
                let abar = match mode {
                    ElboMode::Relaxed => {
                        let (x, soft) = gumbel_softmax(g, ae_logits, gumbel_tensor(b, n, rng), sched.lam_action_enc)?;
                        let lq = gumbel_softmax_log_density(g, x, ae_logits, sched.lam_action_enc)?;
                        let lp = gumbel_softmax_log_density(g, x, pol_logits, sched.lam_action_prior)?;
                        rate_action = Some(g.sub(lq, lp)?);
                        soft
                    }
                    ElboMode::Discrete => {
                        let probs = g.value(ae_logits).clone();
                        let mut hard = Tensor::zeros(b, n);
                        for i in 0..b {
                            let p = softmax(probs.row_slice(i));
                            hard.data[i * n + sample_index(&p, rng)] = 1.0;
                        }
                        let lq = g.log_softmax(ae_logits)?;
                        let lp = g.log_softmax(pol_logits)?;
                        let q = g.exp(lq)?;
                        let diff = g.sub(lq, lp)?;
                        let kl = g.mul(q, diff)?;
                        rate_action = Some(g.sum_cols(kl)?);
                        g.constant(hard)?
                    }
                };
                entropy_action = Some(Self::categorical_entropy_of_marginal(g, ae_logits)?);
                let dec_in = g.concat(&[zbar, abar])?;
                let out = adec.forward(g, &self.store, dec_in)?;
                let ll = match self.ground {
                    GroundActions::Discrete(_) => {
                        let lsm = g.log_softmax(out)?;
                        let m = g.mul(lsm, acts)?;
                        g.sum_cols(m)?
                    }
                    GroundActions::Continuous { .. } => Self::gaussian_ll(g, out, acts, 1)?,
                };
                (abar, ll)
            }
            _ => {
                let pol_logits = self.policy.forward(g, &self.store, zbar)?;
                let lsm = g.log_softmax(pol_logits)?;
                let m = g.mul(lsm, acts)?;
                (acts, g.sum_cols(m)?)
            }
        };

        // Distortion.
        let dec = self.decoder.forward(g, &self.store, zbar2)?;
        let obs_ll = Self::gaussian_ll(g, dec, s2, self.state_dim)?;
        let r_in = g.concat(&[zbar, act_in])?;
        let r_out = self.reward.forward(g, &self.store, r_in)?;
        let rew_ll = Self::gaussian_ll(g, r_out, rew, 1)?;
        let ll = g.add(obs_ll, rew_ll)?;
        let ll = g.add(ll, policy_ll)?;
        let d_i = g.neg(ll)?;

        // Rate.
        let t_in = g.concat(&[zbar, act_in])?;
        let t_logits = self.transition.forward(g, &self.store, t_in)?;
        let t_label = g.slice_cols(t_logits, 0, n_ap)?;
        let t_latent = g.slice_cols(t_logits, n_ap, nb)?;
        let label_logits = g.constant(batch.labels_next.map(|v| if v > 0.5 { LABEL_LOGIT } else { -LABEL_LOGIT }))?;
        let kl_label = g.bernoulli_kl(label_logits, t_label)?;
        let kl_label = g.sum_cols(kl_label)?;
        let kl_latent = match l_s2 {
            Some(l2) => {
                let lq = relaxed_bernoulli_log_density(g, l2, enc_s2, sched.lam_enc)?;
                let lp = relaxed_bernoulli_log_density(g, l2, t_latent, sched.lam_prior)?;
                let diff = g.sub(lq, lp)?;
                g.sum_cols(diff)?
            }
            None => {
                let kl = g.bernoulli_kl(enc_s2, t_latent)?;
                g.sum_cols(kl)?
            }
        };
        let mut r_i = g.add(kl_label, kl_latent)?;
        if let Some(ra) = rate_action {
            r_i = g.add(r_i, ra)?;
        }

        // Marginal encoder entropy.
        let mut h = Self::bernoulli_entropy_of_marginal(g, enc_s)?;
        if let Some(ha) = entropy_action {
            let ha = g.scale(ha, self.config.alpha_action)?;
            h = g.add(h, ha)?;
        }
        let h = g.scale(h, sched.alpha)?;

        let dw = g.mul(d_i, w)?;
        let dist = g.sum(dw)?;
        let rw = g.mul(r_i, w)?;
        let rate = g.sum(rw)?;
        let br = g.scale(rate, sched.beta)?;
        let obj = g.add(dist, br)?;
        let loss = g.sub(obj, h)?;

        let (dv, rv, hv) = (g.value(dist).item(), g.value(rate).item(), g.value(h).item());
        let per_sample = g
            .value(d_i)
            .data
            .iter()
            .zip(&g.value(r_i).data)
            .map(|(d, r)| d + sched.beta * r)
            .collect();
        Ok(ElboOutput {
            loss,
            terms: ElboTerms {
                distortion: dv,
                rate: rv,
                entropy_reg: hv,
                alpha_beta_elbo: -(dv + sched.beta * rv) + hv,
            },
            per_sample,
        })
    }

    /// Encoder logits of the non-label bits.
    pub fn encoder_logits(&self, s: &GroundState) -> Result<Vec<f64>> {
        let x = Tensor::row(self.norm.apply(s));
        Ok(self.encoder.forward_plain(&self.store, &x)?.data)
    }

    /// Mode of the encoder: label bits, then the thresholded encoder bits.
    pub fn encode_mode(&self, s: &GroundState, label: Label) -> Result<LatentState> {
        let logits = self.encoder_logits(s)?;
        let mut z = label.bits() & label_mask(self.n_ap);
        for (i, a) in logits.iter().enumerate() {
            if *a >= 0.0 {
                z |= 1 << (self.n_ap + i);
            }
        }
        Ok(z)
    }

    /// Relaxed sample of the latent state: label bits copied, the rest drawn
    /// from the encoder at the given temperature.
    pub fn encode_relaxed(&self, s: &GroundState, label: Label, temperature: f64, rng: &mut dyn RngCore) -> Result<super::dist::RelaxedBernoulliSample> {
        let logits = self.encoder_logits(s)?;
        let tail = super::dist::sample_relaxed_bernoulli(&logits, temperature, rng)?;
        let mut soft: Vec<f64> = (0..self.n_ap).map(|i| label.get(i) as u8 as f64).collect();
        soft.extend(&tail.soft);
        let mut hard: Vec<bool> = (0..self.n_ap).map(|i| label.get(i)).collect();
        hard.extend(&tail.hard);
        let mut all_logits: Vec<f64> =
            (0..self.n_ap).map(|i| if label.get(i) { LABEL_LOGIT } else { -LABEL_LOGIT }).collect();
        all_logits.extend(&tail.logits);
        Ok(super::dist::RelaxedBernoulliSample { logits: all_logits, temperature, soft, hard })
    }

    pub fn policy_logits(&self, s_bar: LatentState) -> Result<Vec<f64>> {
        let x = Tensor::row(bits_of(s_bar, self.config.n_bits));
        Ok(self.policy.forward_plain(&self.store, &x)?.data)
    }

    /// Latent action of a ground action: the mode of the action encoder, or
    /// the action index itself when the model has no latent actions.
    pub fn encode_action(&self, s_bar: LatentState, a: &Action) -> Result<usize> {
        let features = self.action_features(a)?;
        match &self.action_encoder {
            None => Ok(argmax(&features)),
            Some(enc) => {
                let mut x = bits_of(s_bar, self.config.n_bits);
                x.extend(features);
                Ok(argmax(&enc.forward_plain(&self.store, &Tensor::row(x))?.data))
            }
        }
    }

    pub fn to_json(&self) -> String {
        let params: serde_json::Value =
            serde_json::from_str(&self.store.to_checkpoint()).expect("checkpoint is valid JSON");
        let doc = ModelDoc {
            version: MODEL_VERSION,
            env: self.env_config.clone(),
            config: self.config.clone(),
            norm: self.norm.clone(),
            params,
        };
        serde_json::to_string(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.version != MODEL_VERSION {
            return Err(Error::Parse(format!("unsupported model version {}", doc.version)));
        }
        let env = Environment::from_config(&doc.env)?;
        let mut model = VaeModel::new(&env, doc.config, doc.norm)?;
        model.store.load_checkpoint(&doc.params.to_string())?;
        Ok(model)
    }
}

impl StateEmbedding for VaeModel {
    fn n_bits(&self) -> usize {
        self.config.n_bits
    }

    fn embed(&self, s: &GroundState, label: Label) -> Result<LatentState> {
        self.encode_mode(s, label)
    }
}

impl LatentAgent for VaeModel {
    fn n_latent_actions(&self) -> usize {
        self.policy.output_dim()
    }

    fn action_probs(&self, s_bar: LatentState) -> Result<Vec<f64>> {
        Ok(softmax(&self.policy_logits(s_bar)?))
    }

    fn decode_action(&self, _s: &GroundState, s_bar: LatentState, a_bar: usize) -> Result<Action> {
        let Some(dec) = &self.action_decoder else {
            return Ok(Action::Discrete(a_bar));
        };
        let mut x = bits_of(s_bar, self.config.n_bits);
        x.extend(one_hot(a_bar, self.config.n_latent_actions));
        let out = dec.forward_plain(&self.store, &Tensor::row(x))?;
        Ok(match self.ground {
            GroundActions::Discrete(_) => Action::Discrete(argmax(&out.data)),
            GroundActions::Continuous { low, high } => {
                let m = out.data[0].clamp(-1.0, 1.0);
                Action::Continuous(vec![low + (m + 1.0) / 2.0 * (high - low)])
            }
        })
    }
}
