use serde::{Deserialize, Serialize};

use super::ot::wasserstein_exact;
use super::LatentMc;
use crate::error::{Error, Result};

/// States beyond this count make the pairwise transport problems too costly.
pub const MAX_ORACLE_STATES: usize = 32;
const MAX_ITERATIONS: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BisimVariant {
    /// Distances driven by reward differences.
    Reward,
    /// Distances driven by label disagreement.
    Label,
}

/// One application of the bisimulation operator to `d`.
pub fn delta(mc: &LatentMc, d: &[Vec<f64>], variant: BisimVariant, gamma: f64) -> Result<Vec<Vec<f64>>> {
    let n = mc.len();
    let dense: Vec<Vec<f64>> = (0..n).map(|i| mc.dense_row(i)).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let w = wasserstein_exact(&dense[i], &dense[j], d)?;
            let v = match variant {
                BisimVariant::Reward => (1.0 - gamma) * (mc.rewards[i] - mc.rewards[j]).abs() + gamma * w,
                BisimVariant::Label => {
                    let differ = (mc.labels[i] != mc.labels[j]) as u8 as f64;
                    (gamma * w).max(differ)
                }
            };
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

/// Fixed point of the bisimulation operator, iterated from the zero
/// distance until the sup-norm change is at most `tol`.
pub fn bisim_pseudometric(mc: &LatentMc, variant: BisimVariant, gamma: f64, tol: f64) -> Result<Vec<Vec<f64>>> {
    bisim_iterate(mc, variant, gamma, tol, MAX_ITERATIONS).map(|(d, _)| d)
}

/// Like [`bisim_pseudometric`], but stops after `max_iter` sweeps at most.
/// Returns the distance and the number of sweeps performed.
pub fn bisim_iterate(
    mc: &LatentMc,
    variant: BisimVariant,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<Vec<f64>>, usize)> {
    if mc.len() > MAX_ORACLE_STATES {
        return Err(Error::invalid(format!(
            "bisimulation oracle limited to {MAX_ORACLE_STATES} states, chain has {}",
            mc.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("discount {gamma} outside [0, 1)")));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid(format!("tolerance {tol} must be nonnegative")));
    }
    let n = mc.len();
    let mut d = vec![vec![0.0; n]; n];
    for it in 1..=max_iter {
        let next = delta(mc, &d, variant, gamma)?;
        let change = next
            .iter()
            .flatten()
            .zip(d.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        d = next;
        if change <= tol {
            return Ok((d, it));
        }
    }
    Ok((d, max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_states_are_at_distance_zero() {
        let mc = LatentMc::from_dense(
            &[vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0], vec![0.5, 0.5, 0.0]],
            &[0.2, 0.2, -0.1],
            &[0, 0, 1],
        )
        .unwrap();
        let d = bisim_pseudometric(&mc, BisimVariant::Reward, 0.9, 1e-10).unwrap();
        assert!(d[0][1].abs() < 1e-12);
        assert!(d[0][2] > 0.0);
    }

    #[test]
    fn label_disagreement_forces_unit_distance() {
        let mc = LatentMc::from_dense(&[vec![0.5, 0.5], vec![0.5, 0.5]], &[0.0, 0.0], &[0, 1]).unwrap();
        let d = bisim_pseudometric(&mc, BisimVariant::Label, 0.9, 1e-10).unwrap();
        assert!(d[0][1] >= 1.0);
    }
}
