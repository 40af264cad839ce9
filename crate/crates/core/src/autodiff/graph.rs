use std::collections::BTreeMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Probabilities inside logarithms and KL terms are clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Softplus(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    MeanRows(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    GaussianLogProb(usize, usize, usize),
    BernoulliKl(usize, usize),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to parameters and tracked inputs.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    vars: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Sum of squared gradient entries over all parameters.
    pub fn sq_norm(&self) -> f64 {
        self.params.values().flat_map(|t| t.data.iter()).map(|g| g * g).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.data.iter().all(|g| g.is_finite()))
    }
}

/// Tape of operations for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch { op, detail: format!("{:?} vs {:?}", a.shape, b.shape) });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn row_softmax(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

fn row_logsumexp(t: &Tensor) -> Tensor {
    let c = t.cols();
    let data = t
        .data
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Tensor { shape: [t.rows(), 1], data }
}

/// Elementwise KL between Bernoulli distributions given by logits, with
/// probabilities clamped.
fn bernoulli_kl_value(a: f64, b: f64) -> f64 {
    let p = clamp_prob(sigmoid(a));
    let q = clamp_prob(sigmoid(b));
    p * (p.ln() - q.ln()) + (1.0 - p) * ((1.0 - p).ln() - (1.0 - q).ln())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the tape so the graph can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input without gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).matmul(self.val(b))?;
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(name, self.val(a), self.val(b))?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor { shape: ta.shape, data };
        let ng = self.ng(&[a, b]);
        self.push(v, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.val(a).add_row(self.val(bias))?;
        let ng = self.ng(&[a, bias]);
        self.push(v, Op::AddBias(a.0, bias.0), ng)
    }

    /// Multiplies every row `i` of `a` by the scalar `col[i]` of an `r x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.val(a), self.val(col));
        if tc.shape != [ta.rows(), 1] {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                detail: format!("{:?} by {:?}", ta.shape, tc.shape),
            });
        }
        let c = ta.cols();
        let data = ta.data.iter().enumerate().map(|(i, x)| x * tc.data[i / c]).collect();
        let v = Tensor { shape: ta.shape, data };
        let ng = self.ng(&[a, col]);
        self.push(v, Op::MulCol(a.0, col.0), ng)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.val(x).map(f);
        let ng = self.ng(&[x]);
        self.push(v, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x.0), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Neg(x.0), |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x.0), f64::exp)
    }

    /// Natural log of `max(x, PROB_CLAMP)`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x.0), |v| v.max(PROB_CLAMP).ln())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x.0), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x.0), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x.0, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x.0), softplus)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = row_softmax(self.val(x));
        let ng = self.ng(&[x]);
        self.push(v, Op::Softmax(x.0), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let lse = row_logsumexp(t);
        let c = t.cols();
        let data = t.data.iter().enumerate().map(|(i, v)| v - lse.data[i / c]).collect();
        let v = Tensor { shape: t.shape, data };
        let ng = self.ng(&[x]);
        self.push(v, Op::LogSoftmax(x.0), ng)
    }

    /// Row-wise log-sum-exp, giving an `r x 1` column.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let v = row_logsumexp(self.val(x));
        let ng = self.ng(&[x]);
        self.push(v, Op::LogSumExp(x.0), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.val(x).data.iter().sum());
        let ng = self.ng(&[x]);
        self.push(v, Op::Sum(x.0), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        if t.is_empty() {
            return Err(Error::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
        }
        let v = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        let ng = self.ng(&[x]);
        self.push(v, Op::Mean(x.0), ng)
    }

    /// Sums each row, giving an `r x 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols().max(1);
        let data = if t.cols() == 0 { vec![0.0; t.rows()] } else { t.data.chunks(c).map(|r| r.iter().sum()).collect() };
        let v = Tensor { shape: [t.rows(), 1], data };
        let ng = self.ng(&[x]);
        self.push(v, Op::SumCols(x.0), ng)
    }

    /// Averages over rows, giving a `1 x c` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let [r, c] = t.shape;
        if r == 0 {
            return Err(Error::ShapeMismatch { op: "mean_rows", detail: "no rows".into() });
        }
        let mut data = vec![0.0; c];
        for row in t.data.chunks(c.max(1)) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v / r as f64;
            }
        }
        let v = Tensor { shape: [1, c], data };
        let ng = self.ng(&[x]);
        self.push(v, Op::MeanRows(x.0), ng)
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch { op: "concat", detail: "no inputs".into() })?;
        let r = self.val(*first).rows();
        if parts.iter().any(|p| self.val(*p).rows() != r) {
            return Err(Error::ShapeMismatch { op: "concat", detail: "row counts differ".into() });
        }
        let c: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.val(*p).row_slice(i));
            }
        }
        let ng = self.ng(parts);
        self.push(Tensor { shape: [r, c], data }, Op::Concat(parts.iter().map(|p| p.0).collect()), ng)
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.val(x);
        if start > end || end > t.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}..{end} of {} columns", t.cols()),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        let v = Tensor { shape: [t.rows(), end - start], data };
        let ng = self.ng(&[x]);
        self.push(v, Op::SliceCols(x.0, start), ng)
    }

    /// Elementwise log-density of `x` under `N(mean, exp(log_scale)^2)`.
    pub fn gaussian_log_prob(&mut self, x: Var, mean: Var, log_scale: Var) -> Result<Var> {
        same_shape("gaussian_log_prob", self.val(x), self.val(mean))?;
        same_shape("gaussian_log_prob", self.val(x), self.val(log_scale))?;
        let (tx, tm, ts) = (self.val(x), self.val(mean), self.val(log_scale));
        let data = (0..tx.len())
            .map(|i| {
                let z = (tx.data[i] - tm.data[i]) * (-ts.data[i]).exp();
                -0.5 * z * z - ts.data[i] - HALF_LN_2PI
            })
            .collect();
        let v = Tensor { shape: tx.shape, data };
        let ng = self.ng(&[x, mean, log_scale]);
        self.push(v, Op::GaussianLogProb(x.0, mean.0, log_scale.0), ng)
    }

    /// Elementwise `KL(Bernoulli(sigmoid(p)) || Bernoulli(sigmoid(q)))` from logits.
    pub fn bernoulli_kl(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        self.zip(p_logits, q_logits, "bernoulli_kl", Op::BernoulliKl(p_logits.0, q_logits.0), bernoulli_kl_value)
    }

    /// Back-propagates from the scalar `loss`. The tape is consumed: a second
    /// call, or recording further operations, fails with `GraphConsumed`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.val(loss).shape != [1, 1] {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss has shape {:?}", self.val(loss).shape),
            });
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |j: usize, t: Tensor| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(e) => e.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(t),
                }
            };
            let y = &node.value;
            let ew = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| Tensor {
                shape: x.shape,
                data: (0..x.len()).map(|k| f(g.data[k], x.data[k], y.data[k])).collect(),
            };
            match &node.op {
                Op::Leaf => {
                    out.vars.insert(i, g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(e) => e.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        acc(*a, g.matmul(&tb.transpose())?);
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, ta.transpose().matmul(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, ew(tb, &|g, x, _| g * x));
                    acc(*b, ew(ta, &|g, x, _| g * x));
                }
                Op::AddBias(a, b) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data.chunks(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    acc(*b, Tensor { shape: [1, c], data: gb });
                    acc(*a, g);
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (&nodes[*a].value, &nodes[*col].value);
                    let c = ta.cols();
                    let ga = Tensor {
                        shape: ta.shape,
                        data: g.data.iter().enumerate().map(|(k, v)| v * tc.data[k / c]).collect(),
                    };
                    let mut gc = vec![0.0; ta.rows()];
                    for (k, v) in g.data.iter().enumerate() {
                        gc[k / c] += v * ta.data[k];
                    }
                    acc(*a, ga);
                    acc(*col, Tensor { shape: tc.shape, data: gc });
                }
                Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc(*a, g),
                Op::Neg(a) => acc(*a, g.map(|v| -v)),
                Op::Exp(a) => acc(*a, ew(&nodes[*a].value, &|g, _, y| g * y)),
                Op::Log(a) => acc(*a, ew(&nodes[*a].value, &|g, x, _| if x < PROB_CLAMP { 0.0 } else { g / x })),
                Op::Square(a) => acc(*a, ew(&nodes[*a].value, &|g, x, _| 2.0 * g * x)),
                Op::Sigmoid(a) => acc(*a, ew(&nodes[*a].value, &|g, _, y| g * y * (1.0 - y))),
                Op::Tanh(a) => acc(*a, ew(&nodes[*a].value, &|g, _, y| g * (1.0 - y * y))),
                Op::Relu(a) => acc(*a, ew(&nodes[*a].value, &|g, x, _| if x > 0.0 { g } else { 0.0 })),
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    acc(*a, ew(&nodes[*a].value, &|g, x, _| if x > 0.0 { g } else { s * g }))
                }
                Op::Softplus(a) => acc(*a, ew(&nodes[*a].value, &|g, x, _| g * sigmoid(x))),
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut data = Vec::with_capacity(y.len());
                    for (gr, yr) in g.data.chunks(c).zip(y.data.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        data.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                    }
                    acc(*a, Tensor { shape: y.shape, data });
                }
                Op::LogSoftmax(a) => {
                    let c = y.cols();
                    let mut data = Vec::with_capacity(y.len());
                    for (gr, yr) in g.data.chunks(c).zip(y.data.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        data.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * s));
                    }
                    acc(*a, Tensor { shape: y.shape, data });
                }
                Op::LogSumExp(a) => {
                    let x = &nodes[*a].value;
                    let c = x.cols();
                    let data = x
                        .data
                        .iter()
                        .enumerate()
                        .map(|(k, v)| g.data[k / c] * (v - y.data[k / c]).exp())
                        .collect();
                    acc(*a, Tensor { shape: x.shape, data });
                }
                Op::Sum(a) => {
                    let x = &nodes[*a].value;
                    acc(*a, Tensor::filled(x.rows(), x.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let x = &nodes[*a].value;
                    acc(*a, Tensor::filled(x.rows(), x.cols(), g.item() / x.len() as f64));
                }
                Op::SumCols(a) => {
                    let x = &nodes[*a].value;
                    let c = x.cols().max(1);
                    let data = (0..x.len()).map(|k| g.data[k / c]).collect();
                    acc(*a, Tensor { shape: x.shape, data });
                }
                Op::MeanRows(a) => {
                    let x = &nodes[*a].value;
                    let [r, c] = x.shape;
                    let data = (0..x.len()).map(|k| g.data[k % c] / r as f64).collect();
                    acc(*a, Tensor { shape: x.shape, data });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    let r = g.rows();
                    for &p in parts {
                        let pc = nodes[p].value.cols();
                        let mut data = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            data.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                        }
                        acc(p, Tensor { shape: [r, pc], data });
                        offset += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = &nodes[*a].value;
                    let mut gx = Tensor::zeros(x.rows(), x.cols());
                    let w = g.cols();
                    for i in 0..x.rows() {
                        let base = i * x.cols() + start;
                        gx.data[base..base + w].copy_from_slice(g.row_slice(i));
                    }
                    acc(*a, gx);
                }
                Op::GaussianLogProb(x, m, s) => {
                    let (tx, tm, ts) = (&nodes[*x].value, &nodes[*m].value, &nodes[*s].value);
                    let len = tx.len();
                    let mut gx = vec![0.0; len];
                    let mut gs = vec![0.0; len];
                    for k in 0..len {
                        let inv = (-ts.data[k]).exp();
                        let z = (tx.data[k] - tm.data[k]) * inv;
                        gx[k] = -g.data[k] * z * inv;
                        gs[k] = g.data[k] * (z * z - 1.0);
                    }
                    acc(*m, Tensor { shape: tx.shape, data: gx.iter().map(|v| -v).collect() });
                    acc(*x, Tensor { shape: tx.shape, data: gx });
                    acc(*s, Tensor { shape: tx.shape, data: gs });
                }
                Op::BernoulliKl(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let len = ta.len();
                    let mut ga = vec![0.0; len];
                    let mut gb = vec![0.0; len];
                    for k in 0..len {
                        let praw = sigmoid(ta.data[k]);
                        let qraw = sigmoid(tb.data[k]);
                        let p = clamp_prob(praw);
                        let q = clamp_prob(qraw);
                        if p == praw {
                            let dkl_dp = (p.ln() - (1.0 - p).ln()) - (q.ln() - (1.0 - q).ln());
                            ga[k] = g.data[k] * dkl_dp * p * (1.0 - p);
                        }
                        if q == qraw {
                            gb[k] = g.data[k] * (q - p);
                        }
                    }
                    acc(*a, Tensor { shape: ta.shape, data: ga });
                    acc(*b, Tensor { shape: tb.shape, data: gb });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Build = dyn Fn(&mut Graph, Var) -> Result<Var>;

    fn check_grad(x0: Tensor, build: &Build) {
        let mut g = Graph::new();
        let x = g.input(x0.clone()).unwrap();
        let y = build(&mut g, x).unwrap();
        let grads = g.backward(y).unwrap();
        let analytic = grads.var(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for k in 0..x0.len() {
            let eval = |d: f64| {
                let mut t = x0.clone();
                t.data[k] += d;
                let mut g = Graph::new();
                let x = g.constant(t).unwrap();
                let y = build(&mut g, x).unwrap();
                g.value(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[k];
            assert!((fd - a).abs() <= 1e-5 * (1.0 + fd.abs()), "entry {k}: finite difference {fd}, analytic {a}");
        }
    }

    fn x23() -> Tensor {
        Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.5, 0.2, -0.4]]).unwrap()
    }

    #[test]
    fn elementwise_gradients() {
        let ops: Vec<Box<Build>> = vec![
            Box::new(|g, x| {
                let y = g.exp(x)?;
                g.sum(y)
            }),
            Box::new(|g, x| {
                let y = g.sigmoid(x)?;
                g.sum(y)
            }),
            Box::new(|g, x| {
                let y = g.tanh(x)?;
                g.mean(y)
            }),
            Box::new(|g, x| {
                let y = g.softplus(x)?;
                let z = g.square(y)?;
                g.sum(z)
            }),
            Box::new(|g, x| {
                let y = g.leaky_relu(x, 0.2)?;
                let z = g.scale(y, 3.0)?;
                g.sum(z)
            }),
            Box::new(|g, x| {
                let y = g.relu(x)?;
                let z = g.add_scalar(y, 1.0)?;
                let w = g.log(z)?;
                g.sum(w)
            }),
            Box::new(|g, x| {
                let y = g.mul(x, x)?;
                let z = g.sub(y, x)?;
                let w = g.neg(z)?;
                g.sum(w)
            }),
        ];
        for op in &ops {
            check_grad(x23(), op.as_ref());
        }
    }

    #[test]
    fn row_reduction_gradients() {
        let w = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 0.1, -0.3]]).unwrap();
        let w2 = w.clone();
        check_grad(x23(), &move |g, x| {
            let s = g.softmax(x)?;
            let c = g.constant(w2.clone())?;
            let p = g.mul(s, c)?;
            g.sum(p)
        });
        let w3 = w.clone();
        check_grad(x23(), &move |g, x| {
            let s = g.log_softmax(x)?;
            let c = g.constant(w3.clone())?;
            let p = g.mul(s, c)?;
            g.sum(p)
        });
        check_grad(x23(), &|g, x| {
            let s = g.logsumexp(x)?;
            let sq = g.square(s)?;
            g.sum(sq)
        });
        check_grad(x23(), &|g, x| {
            let m = g.mean_rows(x)?;
            let sq = g.exp(m)?;
            let c = g.sum_cols(sq)?;
            g.sum(c)
        });
    }

    #[test]
    fn structural_gradients() {
        let b = Tensor::from_rows(&[vec![0.2, 0.4], vec![-0.1, 0.3], vec![0.5, -0.6]]).unwrap();
        check_grad(x23(), &move |g, x| {
            let w = g.input(b.clone())?;
            let y = g.matmul(x, w)?;
            let t = g.tanh(y)?;
            g.sum(t)
        });
        check_grad(x23(), &|g, x| {
            let a = g.slice_cols(x, 1, 3)?;
            let b = g.slice_cols(x, 0, 1)?;
            let c = g.concat(&[b, a, b])?;
            let d = g.sigmoid(c)?;
            let col = g.slice_cols(x, 2, 3)?;
            let e = g.mul_col(d, col)?;
            g.sum(e)
        });
        check_grad(x23(), &|g, x| {
            let bias = g.slice_cols(x, 0, 3)?;
            let row = g.mean_rows(bias)?;
            let y = g.add_bias(x, row)?;
            let z = g.square(y)?;
            g.sum(z)
        });
    }

    #[test]
    fn distribution_gradients() {
        check_grad(x23(), &|g, x| {
            let m = g.constant(Tensor::from_rows(&[vec![0.1, 0.0, 0.5], vec![1.0, -0.2, 0.0]])?)?;
            let s = g.scale(x, 0.5)?;
            let lp = g.gaussian_log_prob(x, m, s)?;
            g.sum(lp)
        });
        check_grad(x23(), &|g, x| {
            let q = g.constant(Tensor::from_rows(&[vec![0.4, 0.9, -2.0], vec![0.0, -0.5, 1.1]])?)?;
            let kl = g.bernoulli_kl(x, q)?;
            g.sum(kl)
        });
        check_grad(x23(), &|g, x| {
            let p = g.constant(Tensor::from_rows(&[vec![0.4, 0.9, -2.0], vec![0.0, -0.5, 1.1]])?)?;
            let kl = g.bernoulli_kl(p, x)?;
            g.sum(kl)
        });
    }

    #[test]
    fn bernoulli_kl_matches_closed_form() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0)).unwrap();
        let b = g.constant(Tensor::scalar((0.25f64 / 0.75).ln())).unwrap();
        let kl = g.bernoulli_kl(a, b).unwrap();
        let expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((g.value(kl).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn param_gradients_accumulate_and_graph_is_consumed() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![2.0, -1.0]));
        let mut g = Graph::new();
        let a = g.param(&store, w).unwrap();
        let b = g.param(&store, w).unwrap();
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(w).unwrap().data, vec![4.0, -2.0]);
        assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
        assert!(matches!(g.exp(a), Err(Error::GraphConsumed)));
        g.reset();
        assert!(g.param(&store, w).is_ok());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(3, 2)).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(g.matmul(a, b).is_ok());
        assert!(g.matmul(a, a).is_err());
        assert!(g.backward(a).is_err());
    }
}
