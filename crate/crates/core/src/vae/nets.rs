use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }
}

/// Dense perceptron with a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    activation: Activation,
    input: usize,
    output: usize,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add_glorot(&format!("{name}/w{i}"), w[0], w[1], rng);
                let bias = store.add(&format!("{name}/b{i}"), Tensor::zeros(1, w[1]));
                (weight, bias)
            })
            .collect();
        Mlp { layers, activation, input, output }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w)?;
            let bv = g.param(store, b)?;
            let z = g.matmul(h, wv)?;
            h = g.add_bias(z, bv)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::LeakyRelu => g.leaky_relu(h, LEAKY_SLOPE)?,
                };
            }
        }
        Ok(h)
    }

    /// Forward pass without recording a tape.
    pub fn forward_plain(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(store.get(w))?.add_row(store.get(b))?;
            if i < last {
                h = h.map(|v| self.activation.apply(v));
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::stream;

    #[test]
    fn plain_and_taped_forward_agree() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, 0);
        for act in [Activation::Relu, Activation::LeakyRelu] {
            let name = format!("{act:?}");
            let net = Mlp::new(&mut store, &name, 3, &[8, 8], 2, act, &mut rng);
            let x = Tensor::from_rows(&[vec![0.1, -2.0, 0.5], vec![1.0, 0.3, -0.7]]).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = net.forward(&mut g, &store, xv).unwrap();
            let plain = net.forward_plain(&store, &x).unwrap();
            assert_eq!(g.value(y).shape, [2, 2]);
            for (a, b) in g.value(y).data.iter().zip(&plain.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
