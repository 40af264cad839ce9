use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::LatentMc;
use crate::error::{Error, Result};

/// Bottom strongly connected components above this size are solved by power
/// iteration instead of dense elimination.
const DENSE_LIMIT: usize = 400;
const MAX_POWER_SWEEPS: usize = 10_000_000;

/// Bottom strongly connected components, each as sorted state indices.
pub fn bottom_sccs(mc: &LatentMc) -> Vec<Vec<usize>> {
    let mut g = DiGraph::<(), ()>::with_capacity(mc.len(), 0);
    let nodes: Vec<_> = (0..mc.len()).map(|_| g.add_node(())).collect();
    for (i, row) in mc.rows.iter().enumerate() {
        for &(j, p) in row {
            if p > 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut comp = vec![usize::MAX; mc.len()];
    let sccs = tarjan_scc(&g);
    for (c, members) in sccs.iter().enumerate() {
        for v in members {
            comp[v.index()] = c;
        }
    }
    let mut bottoms: Vec<Vec<usize>> = sccs
        .iter()
        .enumerate()
        .filter(|(c, members)| {
            members.iter().all(|v| mc.rows[v.index()].iter().all(|&(j, p)| p == 0.0 || comp[j] == *c))
        })
        .map(|(_, members)| {
            let mut idx: Vec<usize> = members.iter().map(|v| v.index()).collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    bottoms.sort();
    bottoms
}

/// Unique stationary distribution of the chain, supported on its single
/// bottom strongly connected component. A chain with several such
/// components violates the ergodicity assumption and is rejected.
pub fn stationary_distribution(mc: &LatentMc, tol: f64) -> Result<Vec<f64>> {
    if mc.is_empty() {
        return Err(Error::invalid("empty chain has no stationary distribution"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance {tol} must be positive")));
    }
    let bottoms = bottom_sccs(mc);
    if bottoms.len() != 1 {
        return Err(Error::Reducible { count: bottoms.len() });
    }
    let members = &bottoms[0];
    let mut local = vec![usize::MAX; mc.len()];
    for (k, &i) in members.iter().enumerate() {
        local[i] = k;
    }
    let m = members.len();
    let sub: Vec<Vec<(usize, f64)>> = members
        .iter()
        .map(|&i| mc.rows[i].iter().map(|&(j, p)| (local[j], p)).collect())
        .collect();
    let pi_local = if m <= DENSE_LIMIT { solve_dense(&sub) } else { power_iteration(&sub, tol)? };
    let mut xi = vec![0.0; mc.len()];
    for (k, &i) in members.iter().enumerate() {
        xi[i] = pi_local[k];
    }
    let r = residual(mc, &xi);
    if r > tol {
        return Err(Error::invalid(format!("stationary residual {r} exceeds tolerance {tol}")));
    }
    Ok(xi)
}

/// `||xi P - xi||_1`.
pub fn residual(mc: &LatentMc, xi: &[f64]) -> f64 {
    let mut next = vec![0.0; mc.len()];
    for (i, row) in mc.rows.iter().enumerate() {
        for &(j, p) in row {
            next[j] += xi[i] * p;
        }
    }
    next.iter().zip(xi).map(|(a, b)| (a - b).abs()).sum()
}

/// Solves `xi (P - I) = 0, sum xi = 1` by Gaussian elimination with partial
/// pivoting on the transposed system, replacing the last balance equation by
/// the normalisation.
fn solve_dense(rows: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let m = rows.len();
    let mut a = vec![vec![0.0; m + 1]; m];
    for (i, row) in rows.iter().enumerate() {
        for &(j, p) in row {
            a[j][i] += p;
        }
        a[i][i] -= 1.0;
    }
    for c in 0..m {
        a[m - 1][c] = 1.0;
    }
    a[m - 1][m] = 1.0;
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("nonempty range");
        a.swap(col, pivot);
        let d = a[col][col];
        if d.abs() < 1e-300 {
            continue;
        }
        for r in 0..m {
            if r != col && a[r][col] != 0.0 {
                let f = a[r][col] / d;
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut x: Vec<f64> = (0..m).map(|i| (a[i][m] / a[i][i]).max(0.0)).collect();
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    x
}

/// Power iteration on the lazy chain `(P + I) / 2`, which shares the
/// stationary distribution and is aperiodic.
fn power_iteration(rows: &[Vec<(usize, f64)>], tol: f64) -> Result<Vec<f64>> {
    let m = rows.len();
    let mut x = vec![1.0 / m as f64; m];
    let mut next = vec![0.0; m];
    for _ in 0..MAX_POWER_SWEEPS {
        next.iter_mut().zip(&x).for_each(|(n, v)| *n = 0.5 * v);
        for (i, row) in rows.iter().enumerate() {
            for &(j, p) in row {
                next[j] += 0.5 * x[i] * p;
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        let diff: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut x, &mut next);
        if diff <= tol * 1e-3 {
            return Ok(x);
        }
    }
    Err(Error::invalid("power iteration did not converge"))
}
