use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-9;
const FLOW_EPS: f64 = 1e-15;

/// Half the L1 distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "total_variation",
            detail: format!("{} vs {}", p.len(), q.len()),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

struct Arc {
    to: usize,
    cap: f64,
    cost: f64,
}

/// Optimal transport cost between `p` and `q` under `metric`, solved
/// exactly as a min-cost flow by successive shortest paths. Only the
/// supports of `p` and `q` enter the flow network.
pub fn wasserstein_exact(p: &[f64], q: &[f64], metric: &[Vec<f64>]) -> Result<f64> {
    let n = p.len();
    if q.len() != n || metric.len() != n || metric.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch { op: "wasserstein_exact", detail: format!("support of size {n}") });
    }
    if p.iter().chain(q).any(|&x| !(x >= 0.0)) {
        return Err(Error::invalid("transport marginals must be nonnegative"));
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if (sp - sq).abs() > MASS_TOL {
        return Err(Error::InfeasibleMarginals { lhs: sp, rhs: sq });
    }
    let supply: Vec<(usize, f64)> = (0..n).map(|i| (i, p[i])).filter(|&(_, m)| m > FLOW_EPS).collect();
    let demand: Vec<(usize, f64)> = (0..n).map(|j| (j, q[j])).filter(|&(_, m)| m > FLOW_EPS).collect();
    if supply.is_empty() || demand.is_empty() {
        return Ok(0.0);
    }

    let (ns, nd) = (supply.len(), demand.len());
    let source = 0;
    let sink = ns + nd + 1;
    let n_nodes = sink + 1;
    let mut arcs: Vec<Arc> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let add = |arcs: &mut Vec<Arc>, adj: &mut Vec<Vec<usize>>, u: usize, v: usize, cap: f64, cost: f64| {
        adj[u].push(arcs.len());
        arcs.push(Arc { to: v, cap, cost });
        adj[v].push(arcs.len());
        arcs.push(Arc { to: u, cap: 0.0, cost: -cost });
    };
    for (k, &(_, m)) in supply.iter().enumerate() {
        add(&mut arcs, &mut adj, source, 1 + k, m, 0.0);
    }
    for (k, &(_, m)) in demand.iter().enumerate() {
        add(&mut arcs, &mut adj, 1 + ns + k, sink, m, 0.0);
    }
    for (a, &(i, _)) in supply.iter().enumerate() {
        for (b, &(j, _)) in demand.iter().enumerate() {
            let d = metric[i][j];
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::invalid(format!("metric entry ({i}, {j}) = {d} is not a finite distance")));
            }
            add(&mut arcs, &mut adj, 1 + a, 1 + ns + b, f64::INFINITY, d);
        }
    }

    let total: f64 = supply.iter().map(|&(_, m)| m).sum();
    let mut shipped = 0.0;
    let mut cost = 0.0;
    // Each augmentation saturates an arc, so the loop is bounded by the arc count.
    for _ in 0..=arcs.len() {
        if total - shipped <= FLOW_EPS {
            break;
        }
        // Bellman-Ford: reverse arcs carry negative costs.
        let mut dist = vec![f64::INFINITY; n_nodes];
        let mut pred: Vec<Option<usize>> = vec![None; n_nodes];
        dist[source] = 0.0;
        for _ in 0..n_nodes {
            let mut changed = false;
            for u in 0..n_nodes {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for &e in &adj[u] {
                    let arc = &arcs[e];
                    if arc.cap > FLOW_EPS && dist[u] + arc.cost < dist[arc.to] - 1e-15 {
                        dist[arc.to] = dist[u] + arc.cost;
                        pred[arc.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink] == f64::INFINITY {
            break;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = sink;
        while let Some(e) = pred[v] {
            bottleneck = bottleneck.min(arcs[e].cap);
            v = arcs[e ^ 1].to;
        }
        let mut v = sink;
        while let Some(e) = pred[v] {
            arcs[e].cap -= bottleneck;
            arcs[e ^ 1].cap += bottleneck;
            cost += bottleneck * arcs[e].cost;
            v = arcs[e ^ 1].to;
        }
        shipped += bottleneck;
    }
    if total - shipped > MASS_TOL {
        return Err(Error::InfeasibleMarginals { lhs: shipped, rhs: total });
    }
    Ok(cost.max(0.0))
}
