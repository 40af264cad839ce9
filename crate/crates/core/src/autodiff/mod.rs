//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records operations on a tape while values are computed. A
//! single call to [`Graph::backward`] consumes the tape and returns
//! gradients for every parameter leaf; a new forward pass needs a fresh
//! graph (or [`Graph::reset`]).

mod graph;
mod optim;

pub use graph::{Gradients, Graph, Var, PROB_CLAMP};
pub use optim::{Adam, AdamState};

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense row-major matrix. Vectors are `1 x n` rows and scalars `1 x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("{} values for shape [{rows}, {cols}]", data.len()),
            });
        }
        Ok(Tensor { shape: [rows, cols], data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: [rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { shape: [rows, cols], data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: [1, 1], data: vec![v] }
    }

    pub fn row(v: Vec<f64>) -> Self {
        Tensor { shape: [1, v.len()], data: v }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::ShapeMismatch { op: "Tensor::from_rows", detail: "ragged rows".into() });
        }
        Ok(Tensor { shape: [r, c], data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.shape;
        let [k2, n] = other.shape;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: [m, n], data: out })
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: [c, r], data }
    }

    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.shape != [1, self.cols()] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", self.shape, bias.shape),
            });
        }
        let c = self.cols();
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().enumerate().map(|(i, x)| x + bias.data[i % c]).collect(),
        })
    }
}

/// Named parameter tensors of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    version: u32,
    params: Vec<NamedArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter name `{name}`");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Dense-layer weight with Glorot-uniform initialisation.
    pub fn add_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, Tensor { shape: [fan_in, fan_out], data })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn to_checkpoint(&self) -> String {
        let doc = CheckpointDoc {
            version: CHECKPOINT_VERSION,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, t)| NamedArray { name: n.clone(), shape: t.shape, data: t.data.clone() })
                .collect(),
        };
        serde_json::to_string(&doc).expect("checkpoint serializes")
    }

    /// Overwrites parameter values from a checkpoint with identical names and shapes.
    pub fn load_checkpoint(&mut self, text: &str) -> Result<()> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", doc.version)));
        }
        let by_name: BTreeMap<&str, &NamedArray> = doc.params.iter().map(|p| (p.name.as_str(), p)).collect();
        if by_name.len() != self.len() {
            return Err(Error::Parse(format!(
                "checkpoint holds {} parameters, model has {}",
                by_name.len(),
                self.len()
            )));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let arr = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter `{name}`")))?;
            if arr.shape != value.shape || arr.data.len() != value.len() {
                return Err(Error::Parse(format!("parameter `{name}` has shape {:?}", arr.shape)));
            }
            value.data.clone_from(&arr.data);
        }
        Ok(())
    }
}
