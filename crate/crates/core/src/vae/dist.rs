//! Relaxed Bernoulli and Gumbel-softmax distributions, plain and on the tape.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealMode {
    ToZero,
    ToOne,
}

/// Annealed value at step `t`. Before `t0` the initial value is returned.
///
/// `ToZero`: `v0 (1 - tau)^(t - t0)`. `ToOne`: `v0 + (1 - v0)(1 - (1 - tau)^(t - t0))`.
pub fn anneal(v0: f64, tau: f64, t: u64, t0: u64, mode: AnnealMode) -> f64 {
    let k = t.saturating_sub(t0) as f64;
    let decay = (1.0 - tau).powf(k);
    match mode {
        AnnealMode::ToZero => v0 * decay,
        AnnealMode::ToOne => v0 + (1.0 - v0) * (1.0 - decay),
    }
}

fn open_unit(rng: &mut dyn RngCore) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard logistic draw `ln u - ln(1 - u)`.
pub fn logistic_noise(rng: &mut dyn RngCore) -> f64 {
    let u = open_unit(rng);
    u.ln() - (-u).ln_1p()
}

/// Standard Gumbel draw `-ln(-ln u)`.
pub fn gumbel_noise(rng: &mut dyn RngCore) -> f64 {
    -(-open_unit(rng).ln()).ln()
}

pub fn logistic_tensor(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Tensor {
    Tensor { shape: [rows, cols], data: (0..rows * cols).map(|_| logistic_noise(rng)).collect() }
}

pub fn gumbel_tensor(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Tensor {
    Tensor { shape: [rows, cols], data: (0..rows * cols).map(|_| gumbel_noise(rng)).collect() }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedBernoulliSample {
    pub logits: Vec<f64>,
    pub temperature: f64,
    pub soft: Vec<f64>,
    pub hard: Vec<bool>,
}

/// Draws `sigmoid((logit + L) / temperature)` per coordinate with `L` standard logistic.
pub fn sample_relaxed_bernoulli(logits: &[f64], temperature: f64, rng: &mut dyn RngCore) -> Result<RelaxedBernoulliSample> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    let soft: Vec<f64> = logits.iter().map(|&a| sigmoid((a + logistic_noise(rng)) / temperature)).collect();
    let hard = soft.iter().map(|&x| x >= 0.5).collect();
    Ok(RelaxedBernoulliSample { logits: logits.to_vec(), temperature, soft, hard })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSoftmaxSample {
    pub logits: Vec<f64>,
    pub temperature: f64,
    pub soft: Vec<f64>,
    /// Index of the one-hot hard sample.
    pub hard: usize,
}

pub fn check_gumbel_temperature(n: usize, temperature: f64) -> Result<()> {
    let bound = if n > 1 { 1.0 / (n - 1) as f64 } else { f64::INFINITY };
    if !(temperature > 0.0) || temperature > bound + 1e-12 {
        return Err(Error::invalid(format!(
            "Gumbel-softmax temperature {temperature} outside (0, {bound}] for {n} classes"
        )));
    }
    Ok(())
}

/// Tempered softmax of `logits + G` with `G` standard Gumbel noise.
pub fn sample_gumbel_softmax(logits: &[f64], temperature: f64, rng: &mut dyn RngCore) -> Result<GumbelSoftmaxSample> {
    if logits.is_empty() {
        return Err(Error::invalid("Gumbel-softmax needs at least one class"));
    }
    check_gumbel_temperature(logits.len(), temperature)?;
    let z: Vec<f64> = logits.iter().map(|&a| (a + gumbel_noise(rng)) / temperature).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let soft: Vec<f64> = e.iter().map(|v| v / total).collect();
    let hard = crate::latent::argmax(&z);
    Ok(GumbelSoftmaxSample { logits: logits.to_vec(), temperature, soft, hard })
}

/// Relaxed Bernoulli sample on the tape. Returns the logit-space sample
/// `l = (logits + noise) / temperature` and `sigmoid(l)`.
pub fn relaxed_bernoulli(g: &mut Graph, logits: Var, noise: Tensor, temperature: f64) -> Result<(Var, Var)> {
    let n = g.constant(noise)?;
    let z = g.add(logits, n)?;
    let l = g.scale(z, 1.0 / temperature)?;
    let soft = g.sigmoid(l)?;
    Ok((l, soft))
}

/// Elementwise log-density at `l` of the logit-space relaxed Bernoulli with
/// the given logits and temperature:
/// `ln λ - λ l + α - 2 softplus(α - λ l)`.
pub fn relaxed_bernoulli_log_density(g: &mut Graph, l: Var, logits: Var, temperature: f64) -> Result<Var> {
    let sl = g.scale(l, -temperature)?;
    let y = g.add(logits, sl)?;
    let sp = g.softplus(y)?;
    let sp2 = g.scale(sp, -2.0)?;
    let out = g.add(y, sp2)?;
    g.add_scalar(out, temperature.ln())
}

/// Gumbel-softmax sample on the tape. Returns the log-space sample
/// `x = log_softmax((logits + noise) / temperature)` and `exp(x)`.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, noise: Tensor, temperature: f64) -> Result<(Var, Var)> {
    let n = g.constant(noise)?;
    let z = g.add(logits, n)?;
    let zs = g.scale(z, 1.0 / temperature)?;
    let x = g.log_softmax(zs)?;
    let soft = g.exp(x)?;
    Ok((x, soft))
}

/// Row log-density at the log-space sample `x` of the relaxed categorical:
/// `ln (n-1)! + (n-1) ln λ + Σ_k (α_k - λ x_k) - n logsumexp_k(α_k - λ x_k)`.
pub fn gumbel_softmax_log_density(g: &mut Graph, x: Var, logits: Var, temperature: f64) -> Result<Var> {
    let n = g.value(x).cols();
    let sx = g.scale(x, -temperature)?;
    let y = g.add(logits, sx)?;
    let s = g.sum_cols(y)?;
    let lse = g.logsumexp(y)?;
    let lse_n = g.scale(lse, -(n as f64))?;
    let out = g.add(s, lse_n)?;
    let log_fact: f64 = (1..n).map(|k| (k as f64).ln()).sum();
    g.add_scalar(out, log_fact + (n as f64 - 1.0) * temperature.ln())
}
