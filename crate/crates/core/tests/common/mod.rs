//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

pub mod fd;
pub mod prism_text;

use std::collections::BTreeMap;
use std::path::PathBuf;

use bisimcert::checker::LatentMc;
use bisimcert::env::LiftedChainSpec;
use bisimcert::latent::{LatentMdp, LatentPolicy, LatentRow};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

/// Optimal transport cost by the dual: the maximum of `sum f (p - q)` over
/// functions `f` with `|f_i - f_j| <= d_ij` and `f_0 = 0` is attained where
/// a spanning tree of constraints is tight, so enumerating trees and edge
/// orientations visits every vertex.
pub fn kantorovich(p: &[f64], q: &[f64], d: &[Vec<f64>]) -> f64 {
    let n = p.len();
    if n == 1 {
        return 0.0;
    }
    let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
    let mut best = f64::NEG_INFINITY;
    let mut parent = vec![0usize; n];
    for code in 0..n.pow((n - 1) as u32) {
        let mut c = code;
        for slot in parent.iter_mut().skip(1) {
            *slot = c % n;
            c /= n;
        }
        // Depth-first order from the root; a cycle leaves nodes unreached.
        let mut order = vec![0usize];
        let mut k = 0;
        while k < order.len() {
            let u = order[k];
            order.extend((1..n).filter(|&v| parent[v] == u && v != u));
            k += 1;
        }
        if order.len() != n {
            continue;
        }
        for signs in 0u32..(1 << (n - 1)) {
            let mut f = vec![0.0; n];
            for &v in &order[1..] {
                let s = if signs >> (v - 1) & 1 == 1 { 1.0 } else { -1.0 };
                f[v] = f[parent[v]] + s * d[v][parent[v]];
            }
            let feasible = (0..n).all(|i| (0..n).all(|j| (f[i] - f[j]).abs() <= d[i][j] + 1e-12));
            if feasible {
                best = best.max(f.iter().zip(&diff).map(|(a, b)| a * b).sum());
            }
        }
    }
    best
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Bisimulation distance by a fixed number of operator applications using
/// [`kantorovich`] for the transport terms.
pub fn bisim_long_iteration(
    p: &[Vec<f64>],
    rewards: &[f64],
    labels: &[u64],
    label_variant: bool,
    gamma: f64,
    iterations: usize,
) -> Vec<Vec<f64>> {
    let n = p.len();
    let mut d = vec![vec![0.0; n]; n];
    for _ in 0..iterations {
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = kantorovich(&p[i], &p[j], &d);
                next[i][j] = if label_variant {
                    let differ = if labels[i] != labels[j] { 1.0 } else { 0.0 };
                    (gamma * w).max(differ)
                } else {
                    (1.0 - gamma) * (rewards[i] - rewards[j]).abs() + gamma * w
                };
            }
        }
        d = next;
    }
    d
}

/// Discounted values by a dense linear solve of `(I - gamma P) v = r`.
pub fn dense_values(p: &[Vec<f64>], r: &[f64], gamma: f64) -> Vec<f64> {
    let n = p.len();
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * p[i][j]);
    let b = DVector::from_column_slice(r);
    a.lu().solve(&b).expect("nonsingular").iter().copied().collect()
}

/// Stationary distribution of an irreducible chain: `xi (P - I) = 0` with
/// one equation replaced by the normalisation.
pub fn dense_stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut a = DMatrix::from_fn(n, n, |i, j| p[j][i] - if i == j { 1.0 } else { 0.0 });
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    a.lu().solve(&b).expect("irreducible chain").iter().copied().collect()
}

/// Random stochastic matrix whose rows have at most `support` nonzeros,
/// plus an edge to the next state so the chain is irreducible.
pub fn random_stochastic(rng: &mut ChaCha8Rng, n: usize, support: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; n];
            row[(i + 1) % n] = rng.random::<f64>() + 0.05;
            for _ in 0..support.saturating_sub(1) {
                row[rng.random_range(0..n)] += rng.random::<f64>();
            }
            let s: f64 = row.iter().sum();
            row.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn dense_of(mc: &LatentMc) -> Vec<Vec<f64>> {
    (0..mc.len()).map(|i| mc.dense_row(i)).collect()
}

/// Reads a latent MDP and policy from the bundled fixture pair.
pub fn four_state() -> (LatentMdp, LatentPolicy) {
    let m = LatentMdp::from_json(&read_fixture("four_state_mdp.json")).unwrap();
    let pi: LatentPolicy = serde_json::from_str(&read_fixture("four_state_policy.json")).unwrap();
    (m, pi)
}

/// Latent MDP equal to the chain definition under the exact embedding
/// `latent(node)`.
pub fn chain_latent_mdp(spec: &LiftedChainSpec, n_bits: usize, n_ap: usize, latent: impl Fn(usize) -> u64) -> LatentMdp {
    let mut rows = BTreeMap::new();
    for (a, m) in spec.transitions.iter().enumerate() {
        for (i, row) in m.iter().enumerate() {
            let mut next: Vec<(u64, f64)> =
                row.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(j, &p)| (latent(j), p)).collect();
            next.sort_by_key(|e| e.0);
            rows.insert((latent(i), a), LatentRow { next, reward: spec.node_rewards[i], count: 0 });
        }
    }
    LatentMdp::from_rows(n_bits, n_ap, spec.n_actions(), rows).unwrap()
}

/// Exact local losses of the chain's own abstraction under a node policy:
/// `L_R = E|noise|` and `L_P = sum xi(i) pi(a|i) T(j|i,a) (1 - T(j|i,a))`.
pub fn chain_losses(spec: &LiftedChainSpec, policy: &[Vec<f64>]) -> (f64, f64) {
    let n = spec.n_nodes;
    let p_pi: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..spec.n_actions()).map(|a| policy[i][a] * spec.transitions[a][i][j]).sum()).collect())
        .collect();
    let xi = dense_stationary(&p_pi);
    let mut lp = 0.0;
    for i in 0..n {
        for a in 0..spec.n_actions() {
            for j in 0..n {
                let t = spec.transitions[a][i][j];
                lp += xi[i] * policy[i][a] * t * (1.0 - t);
            }
        }
    }
    (spec.reward_noise / 2.0, lp)
}
