use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{transform_for_objective, LatentMc, Objective, ObjectiveKind};
use crate::error::{Error, Result};
use crate::latent::{LatentMdp, LatentPolicy, LatentState};

/// Hard cap on sweeps; reached only for discounts extremely close to 1.
const MAX_SWEEPS: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: BTreeMap<LatentState, f64>,
    pub qvalues: BTreeMap<(LatentState, usize), f64>,
    /// Sup-norm change of the final sweep.
    pub residual: f64,
    /// Sup-norm change of every sweep, in order.
    pub residual_history: Vec<f64>,
}

/// Iterates `V <- R + gamma P V` from zero until the sup-norm change is at
/// most `tol (1 - gamma) / gamma`, which bounds the error of `V` by `tol`.
pub fn evaluate_mc(mc: &LatentMc, gamma: f64, tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance {tol} must be positive")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("discount {gamma} outside [0, 1)")));
    }
    let threshold = if gamma == 0.0 { f64::INFINITY } else { tol * (1.0 - gamma) / gamma };
    let n = mc.len();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut history = Vec::new();
    for _ in 0..MAX_SWEEPS {
        let mut residual = 0.0f64;
        for i in 0..n {
            let ev: f64 = mc.rows[i].iter().map(|&(j, p)| p * v[j]).sum();
            next[i] = mc.rewards[i] + gamma * ev;
            residual = residual.max((next[i] - v[i]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        history.push(residual);
        if residual <= threshold {
            return Ok((v, history));
        }
    }
    Err(Error::invalid("value iteration did not reach the requested tolerance"))
}

/// Evaluates `policy` on `m` for the given objective. Reachability
/// objectives are first reduced to discounted return by the absorbing
/// transform.
pub fn value_iteration(m: &LatentMdp, policy: &LatentPolicy, obj: &Objective, tol: f64) -> Result<ValueTable> {
    obj.validate()?;
    let transformed;
    let model = if obj.kind == ObjectiveKind::DiscountedReturn {
        m
    } else {
        transformed = transform_for_objective(m, obj)?;
        &transformed
    };
    let mc = LatentMc::induced(model, policy)?;
    let (v, history) = evaluate_mc(&mc, obj.gamma, tol)?;
    let values: BTreeMap<LatentState, f64> = mc.states.iter().copied().zip(v.iter().copied()).collect();
    let mut qvalues = BTreeMap::new();
    for (&(s, a), row) in model.rows() {
        if !values.contains_key(&s) {
            continue;
        }
        let mut ev = 0.0;
        let mut known = true;
        for &(t, p) in &row.next {
            match values.get(&t) {
                Some(vt) => ev += p * vt,
                None => {
                    known = false;
                    break;
                }
            }
        }
        if known {
            qvalues.insert((s, a), row.reward + obj.gamma * ev);
        }
    }
    Ok(ValueTable {
        values,
        qvalues,
        residual: history.last().copied().unwrap_or(0.0),
        residual_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentRow;

    fn chain() -> (LatentMdp, LatentPolicy) {
        let row = |t: u64| LatentRow { next: vec![(t, 1.0)], reward: 0.0, count: 1 };
        let m = LatentMdp::from_rows(2, 1, 1, [((0, 0), row(2)), ((2, 0), row(1)), ((1, 0), row(1))]).unwrap();
        (m, LatentPolicy::deterministic(1, [(0, 0), (2, 0)]))
    }

    #[test]
    fn reach_chain_geometric_values() {
        let (m, pi) = chain();
        let vt = value_iteration(&m, &pi, &Objective::reach(1, 0.9), 1e-10).unwrap();
        assert!((vt.values[&1] - 1.0).abs() < 1e-9);
        assert!((vt.values[&2] - 0.9).abs() < 1e-9);
        assert!((vt.values[&0] - 0.81).abs() < 1e-9);
        assert!((vt.qvalues[&(0, 0)] - 0.81).abs() < 1e-9);
    }

    #[test]
    fn reach_chain_near_undiscounted() {
        let (m, pi) = chain();
        let vt = value_iteration(&m, &pi, &Objective::reach(1, 0.999), 1e-10).unwrap();
        assert!((vt.values[&0] - 0.998001).abs() < 1e-9);
    }

    #[test]
    fn residuals_contract_at_rate_gamma() {
        let (m, pi) = chain();
        let vt = value_iteration(&m, &pi, &Objective::reach(1, 0.95), 1e-12).unwrap();
        for w in vt.residual_history.windows(2) {
            if w[0] > 1e-10 {
                assert!(w[1] / w[0] <= 0.95 + 1e-6, "{} -> {}", w[0], w[1]);
            }
        }
    }
}
