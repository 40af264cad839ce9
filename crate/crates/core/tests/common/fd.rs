//! Random compositions of every differentiable operation, checked against
//! central finite differences.

use bisimcert::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub struct Problem {
    store: ParamStore,
    ids: Vec<ParamId>,
    x: Tensor,
    target: Tensor,
    weights: Tensor,
    activation: usize,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).unwrap()
}

pub fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(1..5);
    let input = rng.random_range(1..5);
    let hidden = rng.random_range(1..6);
    let out = rng.random_range(2..5);
    let mut store = ParamStore::new();
    let ids = vec![
        store.add("w1", random_tensor(&mut rng, input, hidden, 1.0)),
        store.add("b1", random_tensor(&mut rng, 1, hidden, 0.5)),
        store.add("w2", random_tensor(&mut rng, hidden, out, 1.0)),
        store.add("b2", random_tensor(&mut rng, 1, out, 0.5)),
        store.add("log_scale", random_tensor(&mut rng, batch, out, 0.5)),
        store.add("q", random_tensor(&mut rng, batch, out, 1.0)),
    ];
    Problem {
        store,
        ids,
        x: random_tensor(&mut rng, batch, input, 1.0),
        target: random_tensor(&mut rng, batch, out, 1.0),
        weights: random_tensor(&mut rng, batch, out, 1.0),
        activation: rng.random_range(0..4),
    }
}

/// Builds the loss on a fresh tape and returns it with the tape.
pub fn forward(p: &Problem, store: &ParamStore) -> (Graph, Var) {
    let mut g = Graph::new();
    let v: Vec<_> = p.ids.iter().map(|&id| g.param(store, id).unwrap()).collect();
    let x = g.input(p.x.clone()).unwrap();
    let target = g.constant(p.target.clone()).unwrap();
    let weights = g.constant(p.weights.clone()).unwrap();

    let pre = g.matmul(x, v[0]).unwrap();
    let pre = g.add_bias(pre, v[1]).unwrap();
    let h = match p.activation {
        0 => g.tanh(pre),
        1 => g.sigmoid(pre),
        2 => g.softplus(pre),
        _ => g.leaky_relu(pre, 0.1),
    }
    .unwrap();
    let y = g.matmul(h, v[2]).unwrap();
    let y = g.add_bias(y, v[3]).unwrap();

    let gauss = g.gaussian_log_prob(target, y, v[4]).unwrap();
    let gauss = g.mean(gauss).unwrap();
    let kl = g.bernoulli_kl(y, v[5]).unwrap();
    let kl = g.sum(kl).unwrap();
    let ls = g.log_softmax(y).unwrap();
    let ls = g.mul(ls, weights).unwrap();
    let ls = g.sum(ls).unwrap();
    let sm = g.softmax(v[5]).unwrap();
    let lse = g.logsumexp(y).unwrap();
    let weighted = g.mul_col(sm, lse).unwrap();
    let weighted = g.mean_rows(weighted).unwrap();
    let weighted = g.sum(weighted).unwrap();
    let first = g.slice_cols(y, 0, 1).unwrap();
    let rest = g.slice_cols(y, 1, p.target.cols()).unwrap();
    let joined = g.concat(&[rest, first]).unwrap();
    let diff = g.sub(joined, target).unwrap();
    let sq = g.square(diff).unwrap();
    let sq = g.sum_cols(sq).unwrap();
    let sq = g.mean(sq).unwrap();
    let pos = g.exp(v[4]).unwrap();
    let pos = g.add_scalar(pos, 0.5).unwrap();
    let logged = g.log(pos).unwrap();
    let logged = g.neg(logged).unwrap();
    let logged = g.mean(logged).unwrap();

    let parts = [gauss, kl, ls, weighted, sq, logged];
    let mut loss = parts[0];
    for (k, &part) in parts.iter().enumerate().skip(1) {
        let scaled = g.scale(part, 1.0 / (k as f64 + 1.0)).unwrap();
        loss = g.add(loss, scaled).unwrap();
    }
    (g, loss)
}

pub fn loss_at(p: &Problem, store: &ParamStore) -> f64 {
    let (g, loss) = forward(p, store);
    g.value(loss).item()
}

/// Largest relative gradient error over every parameter scalar of case `seed`,
/// with the parameter name and index where it occurs.
pub fn max_relative_error(seed: u64) -> (f64, String) {
    let p = problem(seed);
    let (mut g, loss) = forward(&p, &p.store);
    let grads = g.backward(loss).unwrap();
    let mut worst = (0.0, String::new());
    for &id in &p.ids {
        let analytic = grads.param(id).expect("every parameter reaches the loss").clone();
        for k in 0..p.store.get(id).len() {
            let mut plus = p.store.clone();
            plus.get_mut(id).data[k] += STEP;
            let mut minus = p.store.clone();
            minus.get_mut(id).data[k] -= STEP;
            let fd = (loss_at(&p, &plus) - loss_at(&p, &minus)) / (2.0 * STEP);
            let a = analytic.data[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}]: analytic {a}, finite difference {fd}", p.store.name(id)));
            }
        }
    }
    worst
}
