//! PAC estimation of local losses from on-policy traces and assembly of the
//! bisimulation and value-difference certificates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checker::{LipschitzConstants, Objective};
use crate::error::{Error, Result};
use crate::latent::{LatentMdp, LatentState, LatentTrace};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacParams {
    pub epsilon: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl PacParams {
    pub fn new(epsilon: f64, delta: f64, gamma: f64) -> Result<Self> {
        let p = PacParams { epsilon, delta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.epsilon) || !open(self.delta) {
            return Err(Error::invalid(format!(
                "epsilon = {} and delta = {} must lie in (0, 1)",
                self.epsilon, self.delta
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma = {} must lie in [0, 1)", self.gamma)));
        }
        Ok(())
    }
}

/// Steps needed so both loss estimates are within epsilon with probability
/// at least 1 - delta: `ceil(-ln(delta / 4) / (2 epsilon^2))`.
pub fn required_samples_loss(p: &PacParams) -> Result<u64> {
    p.validate()?;
    Ok((-(p.delta / 4.0).ln() / (2.0 * p.epsilon * p.epsilon)).ceil() as u64)
}

/// Steps needed for the value-difference guarantee:
/// `ceil(-ln(delta / 4) (1 + gamma KV)^2 / (2 epsilon^2 (1 - gamma)^2))`.
pub fn required_samples_value(p: &PacParams, kv: f64) -> Result<u64> {
    p.validate()?;
    if !(kv >= 0.0) || !kv.is_finite() {
        return Err(Error::invalid(format!("KV = {kv} must be finite and nonnegative")));
    }
    let num = -(p.delta / 4.0).ln() * (1.0 + p.gamma * kv).powi(2);
    let den = 2.0 * p.epsilon * p.epsilon * (1.0 - p.gamma).powi(2);
    Ok((num / den).ceil() as u64)
}

/// What to do when the trace visits a latent pair absent from the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupportedPolicy {
    /// Fail with the offending pair.
    #[default]
    Error,
    /// Charge the maximal loss of 1 to both estimators for that step.
    Conservative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    /// Leading transitions discarded before estimation.
    pub burn_in: usize,
    /// Keep every `thin`-th transition after burn-in.
    pub thin: usize,
    pub unsupported: UnsupportedPolicy,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions { burn_in: 1000, thin: 1, unsupported: UnsupportedPolicy::Error }
    }
}

/// Running sums behind a loss estimate; shards merge by addition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossAccumulator {
    pub sum_r: f64,
    pub sum_p: f64,
    pub count: u64,
    pub unsupported: u64,
}

impl LossAccumulator {
    pub fn merge(&mut self, other: &LossAccumulator) {
        self.sum_r += other.sum_r;
        self.sum_p += other.sum_p;
        self.count += other.count;
        self.unsupported += other.unsupported;
    }

    pub fn means(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::InsufficientSamples { required: 1, got: 0 });
        }
        let n = self.count as f64;
        Ok((self.sum_r / n, self.sum_p / n))
    }
}

/// Folds the estimator terms of the transitions selected by `opts`.
pub fn accumulate_losses(trace: &LatentTrace, m: &LatentMdp, opts: &EstimateOptions) -> Result<LossAccumulator> {
    if opts.thin == 0 {
        return Err(Error::invalid("thinning factor must be at least 1"));
    }
    let mut acc = LossAccumulator::default();
    for step in trace.steps.iter().skip(opts.burn_in).step_by(opts.thin) {
        match m.row(step.s, step.a) {
            Ok(row) => {
                acc.sum_r += (step.r - row.reward).abs();
                acc.sum_p += 1.0 - row.prob(step.s_next);
            }
            Err(e) => match opts.unsupported {
                UnsupportedPolicy::Error => return Err(e),
                UnsupportedPolicy::Conservative => {
                    acc.sum_r += 1.0;
                    acc.sum_p += 1.0;
                    acc.unsupported += 1;
                }
            },
        }
        acc.count += 1;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    #[serde(rename = "LR")]
    pub lr: f64,
    #[serde(rename = "LP")]
    pub lp: f64,
    #[serde(rename = "T")]
    pub t_used: u64,
    pub params: PacParams,
    pub unsupported_steps: u64,
}

impl LossEstimate {
    pub fn from_accumulator(acc: &LossAccumulator, params: PacParams) -> Result<Self> {
        params.validate()?;
        let (lr, lp) = acc.means()?;
        Ok(LossEstimate { lr, lp, t_used: acc.count, params, unsupported_steps: acc.unsupported })
    }

    /// Upper confidence values `(LR + epsilon, LP + epsilon)`.
    pub fn upper(&self) -> (f64, f64) {
        (self.lr + self.params.epsilon, self.lp + self.params.epsilon)
    }
}

/// Empirical reward and transition losses of `trace` against `m`:
/// mean `|r_t - R(s_t, a_t)|` and mean `1 - P(s_{t+1} | s_t, a_t)`.
pub fn estimate_losses(
    trace: &LatentTrace,
    m: &LatentMdp,
    params: PacParams,
    opts: &EstimateOptions,
) -> Result<LossEstimate> {
    LossEstimate::from_accumulator(&accumulate_losses(trace, m, opts)?, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub value_diff_return: f64,
    pub value_diff_reach: f64,
    /// `None` when `gamma KP >= 1` leaves the bound undefined.
    pub bisim_reward: Option<f64>,
    pub bisim_label: f64,
    /// Set when any bound exceeds the trivial range of its quantity.
    pub vacuous: bool,
    pub vacuous_bounds: Vec<String>,
}

/// Closed-form bounds from losses (without slack), constants and gamma.
pub fn bound_values(lr: f64, lp: f64, eps: f64, c: &LipschitzConstants, gamma: f64) -> Bounds {
    let value_diff_return = (lr + gamma * c.kv * lp) / (1.0 - gamma) + eps;
    let value_diff_reach = gamma * lp / (1.0 - gamma) + gamma * eps / (1.0 + gamma * c.kv);
    let bisim_reward = if gamma * c.kp < 1.0 {
        Some((lr + eps) + gamma * (lp + eps) * c.kr / (1.0 - gamma * c.kp))
    } else {
        None
    };
    let bisim_label = gamma * (lp + eps) / (1.0 - gamma);
    let mut vacuous_bounds = Vec::new();
    if value_diff_return > c.rmax / (1.0 - gamma) {
        vacuous_bounds.push("value_diff_return".to_string());
    }
    if value_diff_reach > 1.0 {
        vacuous_bounds.push("value_diff_reach".to_string());
    }
    if bisim_reward.is_none_or(|b| b > 1.0) {
        vacuous_bounds.push("bisim_reward".to_string());
    }
    if bisim_label > 1.0 {
        vacuous_bounds.push("bisim_label".to_string());
    }
    Bounds {
        value_diff_return,
        value_diff_reach,
        bisim_reward,
        bisim_label,
        vacuous: !vacuous_bounds.is_empty(),
        vacuous_bounds,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequiredSamples {
    pub loss: u64,
    pub value: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    #[serde(rename = "LR")]
    pub lr: f64,
    #[serde(rename = "LP")]
    pub lp: f64,
    pub unsupported_steps: u64,
}

/// Value of the latent policy on the extracted model for a verification
/// objective, read at the first state of the estimation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSummary {
    pub objective: Objective,
    pub initial_state: LatentState,
    pub latent_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub schema_version: u32,
    pub params: PacParams,
    #[serde(rename = "T")]
    pub t: u64,
    pub required: RequiredSamples,
    pub losses: Losses,
    pub constants: LipschitzConstants,
    pub bounds: Bounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveSummary>,
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl CertificateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Assembles every bound. Fails when the estimate used fewer transitions
/// than the value-difference guarantee requires.
pub fn assemble_certificate(
    est: &LossEstimate,
    consts: &LipschitzConstants,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<CertificateReport> {
    let p = est.params;
    let required = RequiredSamples {
        loss: required_samples_loss(&p)?,
        value: required_samples_value(&p, consts.kv)?,
    };
    let need = required.loss.max(required.value);
    if est.t_used < need {
        return Err(Error::InsufficientSamples { required: need, got: est.t_used });
    }
    Ok(CertificateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        params: p,
        t: est.t_used,
        required,
        losses: Losses { lr: est.lr, lp: est.lp, unsupported_steps: est.unsupported_steps },
        constants: consts.clone(),
        bounds: bound_values(est.lr, est.lp, p.epsilon, consts, p.gamma),
        objective: None,
        provenance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseBounds {
    pub bisim_reward: Option<f64>,
    pub bisim_label: f64,
    pub value_return: f64,
    pub value_reach: f64,
}

/// Bounds for two states sharing a latent representation, scaled by
/// `1/xi(s1) + 1/xi(s2)`. Only defined for discrete ground models where the
/// stationary distribution `xi` is available. Losses enter with their PAC
/// slack.
pub fn pointwise_bounds(
    xi: &[f64],
    s1: usize,
    s2: usize,
    est: &LossEstimate,
    c: &LipschitzConstants,
) -> Result<PointwiseBounds> {
    let (x1, x2) = match (xi.get(s1), xi.get(s2)) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::invalid("state index outside the stationary vector")),
    };
    if !(x1 > 0.0 && x2 > 0.0) {
        return Err(Error::invalid("stationary mass is zero at one of the states"));
    }
    let factor = 1.0 / x1 + 1.0 / x2;
    let (lr, lp) = est.upper();
    let g = est.params.gamma;
    Ok(PointwiseBounds {
        bisim_reward: (g * c.kp < 1.0).then(|| (lr + g * lp * c.kr / (1.0 - g * c.kp)) * factor),
        bisim_label: g * lp / (1.0 - g) * factor,
        value_return: (lr + g * c.kv * lp) / (1.0 - g) * factor,
        value_reach: g * lp / (1.0 - g) * factor,
    })
}
