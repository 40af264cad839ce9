use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Moment estimates of an [`Adam`] optimiser, serializable for resuming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| {
            let t = store.get(id);
            Tensor::zeros(t.rows(), t.cols())
        }).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { t: 0, m: zeros.clone(), v: zeros },
        }
    }

    /// Applies one update. Parameters without a gradient are left unchanged
    /// but their moments still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.state.m.len() != store.len() {
            return Err(Error::ShapeMismatch {
                op: "Adam::step",
                detail: format!("optimiser tracks {} tensors, store has {}", self.state.m.len(), store.len()),
            });
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { context: "gradient".into() });
        }
        self.state.t += 1;
        let t = self.state.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.state.m[id.0], &mut self.state.v[id.0]);
            let p = store.get_mut(id);
            for k in 0..p.len() {
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * g.data[k];
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * g.data[k] * g.data[k];
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = g.param(&store, w).unwrap();
            let c = g.constant(Tensor::row(vec![1.0, 0.5])).unwrap();
            let d = g.sub(x, c).unwrap();
            let sq = g.square(d).unwrap();
            let l = g.sum(sq).unwrap();
            let grads = g.backward(l).unwrap();
            opt.step(&mut store, &grads).unwrap();
        }
        let v = &store.get(w).data;
        assert!((v[0] - 1.0).abs() < 1e-3 && (v[1] - 0.5).abs() < 1e-3, "{v:?}");
    }
}
