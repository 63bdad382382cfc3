//! Reverse-mode tape over dense matrices.
//!
//! Every value on the tape is a `rows×cols` matrix. Operations are appended in
//! execution order, so a reverse sweep over the node list is a valid reverse
//! topological order.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::tensor::{Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    RowSoftmax(Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowSum(Var),
    Element(Var, usize),
    Dropout(Var, Vec<f64>),
    BceWithLogits(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-use computation tape. Not shared across threads; build one per pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<TensorId, Var>,
    backward_done: bool,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
            rng: None,
        }
    }

    /// Training-mode tape; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Tape {
            rng: Some(rng),
            ..Tape::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("tape values are well formed")
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape("constant", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    /// Records a tensor's current value. The tensor's own `requires_grad` decides
    /// whether gradients flow into it. Repeated calls with the same tensor return
    /// the same handle, so shared weights accumulate a single gradient.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(&t.id()) {
            return Ok(v);
        }
        let (r, c) = t.matrix_dims()?;
        let v = self.push(r, c, t.values().to_vec(), Op::Leaf, t.requires_grad());
        self.params.insert(t.id(), v);
        Ok(v)
    }

    /// Like [`Tape::param`] but never propagates gradients into the tensor.
    pub fn param_frozen(&mut self, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(&t.id()) {
            return Ok(v);
        }
        let (r, c) = t.matrix_dims()?;
        let v = self.push(r, c, t.values().to_vec(), Op::Leaf, false);
        self.params.insert(t.id(), v);
        Ok(v)
    }

    /// Records a tensor as data, ignoring its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.matrix_dims()?;
        self.constant(r, c, t.values().to_vec())
    }

    pub fn param_var(&self, id: TensorId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[n, k], &[k2, m]));
        }
        let value = kernels::matmul(self.value(a), self.value(b), n, k, m);
        let ng = self.ng(&[a, b]);
        Ok(self.push(n, m, value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = kernels::transpose(self.value(a), r, c);
        let ng = self.ng(&[a]);
        self.push(c, r, value, Op::Transpose(a), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Hadamard(a, b), "hadamard", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// `a` is `n×d`, `row` is `1×d`; adds `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims(a);
        let (one, d2) = self.dims(row);
        if one != 1 || d != d2 {
            return Err(Error::shape("add_row", &[n, d], &[one, d2]));
        }
        let rv = self.value(row);
        let value = self
            .value(a)
            .chunks(d)
            .flat_map(|r| r.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[a, row]);
        Ok(self.push(n, d, value, Op::AddRow(a, row), ng))
    }

    /// `a` is `n×d`, `col` is `n×1`; scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, d) = self.dims(a);
        let (n2, one) = self.dims(col);
        if one != 1 || n != n2 {
            return Err(Error::shape("mul_col", &[n, d], &[n2, one]));
        }
        let cv = self.value(col);
        let value = self
            .value(a)
            .chunks(d)
            .zip(cv)
            .flat_map(|(r, s)| r.iter().map(move |x| x * s))
            .collect();
        let ng = self.ng(&[a, col]);
        Ok(self.push(n, d, value, Op::MulCol(a, col), ng))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, value, Op::Scale(a, k), ng)
    }

    /// Multiplies every entry of `a` by the `1×1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            let (r, c) = self.dims(s);
            return Err(Error::shape("scale_by", &[1, 1], &[r, c]));
        }
        let (r, c) = self.dims(a);
        let k = self.scalar_value(s);
        let value = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(&[a, s]);
        Ok(self.push(r, c, value, Op::ScaleBy(a, s), ng))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|x| x + k).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, value, Op::AddScalar(a), ng)
    }

    // ---- elementwise nonlinearities ------------------------------------

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return a;
        };
        if p <= 0.0 {
            return a;
        }
        let len = self.nodes[a.0].value.len();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, value, Op::Dropout(a, mask), ng)
    }

    // ---- normalizations -------------------------------------------------

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(a).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("row_softmax input".into()));
        }
        let value = kernels::row_softmax(self.value(a), r, c);
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, value, Op::RowSoftmax(a), ng))
    }

    /// `scores` is `|E|×1`; normalizes over edges sharing a target.
    pub fn segment_softmax(&mut self, scores: Var, targets: &Arc<[usize]>, n: usize) -> Result<Var> {
        let (e, one) = self.dims(scores);
        if one != 1 {
            return Err(Error::shape("segment_softmax", &[e, 1], &[e, one]));
        }
        let value = kernels::segment_softmax(self.value(scores), targets, n)?;
        let ng = self.ng(&[scores]);
        Ok(self.push(e, 1, value, Op::SegmentSoftmax(scores, targets.clone()), ng))
    }

    /// Row-wise LayerNorm with `gain` and `bias` of shape `1×d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        for p in [gain, bias] {
            let (one, d2) = self.dims(p);
            if one != 1 || d2 != d {
                return Err(Error::shape("layer_norm", &[n, d], &[one, d2]));
            }
        }
        let (xhat, inv_std) = kernels::layer_norm_stats(self.value(x), n, d);
        let g = self.value(gain);
        let b = self.value(bias);
        let value = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            n,
            d,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    // ---- structural ops -------------------------------------------------

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_columns of zero tensors".into()));
        };
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_columns", &[rows], &[r]));
            }
            total += c;
        }
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                value.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(rows, total, value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `[start, end)` of `a`.
    pub fn slice_columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::Index {
                what: "slice_columns end",
                index: end,
                len: c,
            });
        }
        let w = end - start;
        let value = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, w, value, Op::SliceCols(a, start), ng))
    }

    /// Row `index[k]` of `a` becomes row `k` of the output.
    pub fn gather_rows(&mut self, a: Var, index: &Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut value = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= r {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            value.extend_from_slice(&self.value(a)[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(index.len(), c, value, Op::GatherRows(a, index.clone()), ng))
    }

    /// Sums row `k` of `a` into output row `index[k]`; output has `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: &Arc<[usize]>, n: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != index.len() {
            return Err(Error::shape("scatter_add_rows", &[r], &[index.len()]));
        }
        let mut value = vec![0.0; n * c];
        for (k, &i) in index.iter().enumerate() {
            if i >= n {
                return Err(Error::Index {
                    what: "scatter_add_rows",
                    index: i,
                    len: n,
                });
            }
            let src = &self.value(a)[k * c..(k + 1) * c];
            for (o, s) in value[i * c..(i + 1) * c].iter_mut().zip(src) {
                *o += s;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(n, c, value, Op::ScatterAddRows(a, index.clone()), ng))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), ng)
    }

    /// Column-wise mean over rows: `n×d -> 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut value = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            value.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        value.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(&[a]);
        self.push(1, c, value, Op::MeanRows(a), ng)
    }

    /// Sum of each row: `n×d -> n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(r, 1, value, Op::RowSum(a), ng)
    }

    /// The flat entry `index` of `a` as a `1×1` value.
    pub fn element(&mut self, a: Var, index: usize) -> Result<Var> {
        let len = self.value(a).len();
        if index >= len {
            return Err(Error::Index {
                what: "element",
                index,
                len,
            });
        }
        let v = self.value(a)[index];
        let ng = self.ng(&[a]);
        Ok(self.push(1, 1, vec![v], Op::Element(a, index), ng))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean binary cross-entropy of logits `a` (any shape) against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, a: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(a);
        if v.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", &[v.len()], &[targets.len()]));
        }
        let loss = v
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / v.len() as f64;
        let ng = self.ng(&[a]);
        Ok(self.push(1, 1, vec![loss], Op::BceWithLogits(a, targets.to_vec()), ng))
    }

    /// Mean cross-entropy of row logits `a` (`n×C`) against class indices.
    pub fn cross_entropy(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(a);
        if n != targets.len() {
            return Err(Error::shape("cross_entropy", &[n], &[targets.len()]));
        }
        let mut loss = 0.0;
        for (row, &t) in self.value(a).chunks(c).zip(targets) {
            if t >= c {
                return Err(Error::Index {
                    what: "cross_entropy class",
                    index: t,
                    len: c,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let ng = self.ng(&[a]);
        Ok(self.push(1, 1, vec![loss / n as f64], Op::CrossEntropy(a, targets.to_vec()), ng))
    }

    // ---- backward -------------------------------------------------------

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims(nodes: &[Node], v: Var) -> (usize, usize) {
    (nodes[v.0].rows, nodes[v.0].cols)
}

fn value(nodes: &[Node], v: Var) -> &[f64] {
    &nodes[v.0].value
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    contrib(slot);
}

fn acc_vec(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    acc(nodes, grads, v, |slot| slot.iter_mut().zip(g).for_each(|(s, x)| *s += x));
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let (rows, cols) = (nodes[i].rows, nodes[i].cols);
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = dims(nodes, *a);
            let m = cols;
            if nodes[a.0].needs_grad {
                let bv = value(nodes, *b);
                acc(nodes, grads, *a, |slot| kernels::matmul_nt_acc(slot, g, bv, n, m, k));
            }
            if nodes[b.0].needs_grad {
                let av = value(nodes, *a);
                acc(nodes, grads, *b, |slot| kernels::matmul_tn_acc(slot, av, g, n, k, m));
            }
        }
        Op::Transpose(a) => {
            let gt = kernels::transpose(g, rows, cols);
            acc_vec(nodes, grads, *a, &gt);
        }
        Op::Add(a, b) => {
            acc_vec(nodes, grads, *a, g);
            acc_vec(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            acc_vec(nodes, grads, *a, g);
            acc(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, x)| *s -= x));
        }
        Op::Hadamard(a, b) => {
            let av = nodes[a.0].value.as_slice();
            let bv = nodes[b.0].value.as_slice();
            acc(nodes, grads, *a, |s| {
                for ((s, x), y) in s.iter_mut().zip(g).zip(bv.iter()) {
                    *s += x * y;
                }
            });
            acc(nodes, grads, *b, |s| {
                for ((s, x), y) in s.iter_mut().zip(g).zip(av.iter()) {
                    *s += x * y;
                }
            });
        }
        Op::Div(a, b) => {
            let av = nodes[a.0].value.as_slice();
            let bv = nodes[b.0].value.as_slice();
            acc(nodes, grads, *a, |s| {
                for ((s, x), y) in s.iter_mut().zip(g).zip(bv.iter()) {
                    *s += x / y;
                }
            });
            acc(nodes, grads, *b, |s| {
                for (((s, x), num), den) in s.iter_mut().zip(g).zip(av.iter()).zip(bv.iter()) {
                    *s -= x * num / (den * den);
                }
            });
        }
        Op::AddRow(a, row) => {
            acc_vec(nodes, grads, *a, g);
            acc(nodes, grads, *row, |s| {
                for grow in g.chunks(cols) {
                    s.iter_mut().zip(grow).for_each(|(s, x)| *s += x);
                }
            });
        }
        Op::MulCol(a, col) => {
            let av = nodes[a.0].value.as_slice();
            let cv = nodes[col.0].value.as_slice();
            acc(nodes, grads, *a, |s| {
                for ((srow, grow), c) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(cv.iter()) {
                    srow.iter_mut().zip(grow).for_each(|(s, x)| *s += x * c);
                }
            });
            acc(nodes, grads, *col, |s| {
                for ((sc, grow), arow) in s.iter_mut().zip(g.chunks(cols)).zip(av.chunks(cols)) {
                    *sc += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                }
            });
        }
        Op::Scale(a, k) => {
            let k = *k;
            acc(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, x)| *s += k * x));
        }
        Op::ScaleBy(a, sc) => {
            let k = value(nodes, *sc)[0];
            let dot: f64 = value(nodes, *a).iter().zip(g).map(|(x, y)| x * y).sum();
            acc(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, x)| *s += k * x));
            acc(nodes, grads, *sc, |s| s[0] += dot);
        }
        Op::AddScalar(a) => acc_vec(nodes, grads, *a, g),
        Op::Relu(a) => {
            let av = nodes[a.0].value.as_slice();
            acc(nodes, grads, *a, |s| {
                for ((s, x), v) in s.iter_mut().zip(g).zip(av.iter()) {
                    if *v > 0.0 {
                        *s += x;
                    }
                }
            });
        }
        Op::LeakyRelu(a, slope) => {
            let slope = *slope;
            let av = nodes[a.0].value.as_slice();
            acc(nodes, grads, *a, |s| {
                for ((s, x), v) in s.iter_mut().zip(g).zip(av.iter()) {
                    *s += if *v > 0.0 { *x } else { slope * x };
                }
            });
        }
        Op::Sigmoid(a) => {
            let out = &nodes[i].value;
            acc(nodes, grads, *a, |s| {
                for ((s, x), y) in s.iter_mut().zip(g).zip(out.iter()) {
                    *s += x * y * (1.0 - y);
                }
            });
        }
        Op::Abs(a) => {
            let av = nodes[a.0].value.as_slice();
            acc(nodes, grads, *a, |s| {
                for ((s, x), v) in s.iter_mut().zip(g).zip(av.iter()) {
                    *s += x * v.signum() * f64::from(*v != 0.0);
                }
            });
        }
        Op::Dropout(a, mask) => {
            acc(nodes, grads, *a, |s| {
                for ((s, x), m) in s.iter_mut().zip(g).zip(mask) {
                    *s += x * m;
                }
            });
        }
        Op::RowSoftmax(a) => {
            let y = &nodes[i].value;
            acc(nodes, grads, *a, |s| {
                for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((s, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += yv * (gv - dot);
                    }
                }
            });
        }
        Op::SegmentSoftmax(a, targets) => {
            let y = &nodes[i].value;
            let n = targets.iter().copied().max().map_or(0, |m| m + 1);
            let mut dot = vec![0.0; n];
            for ((gv, yv), &t) in g.iter().zip(y.iter()).zip(targets.iter()) {
                dot[t] += gv * yv;
            }
            acc(nodes, grads, *a, |s| {
                for (((s, gv), yv), &t) in s.iter_mut().zip(g).zip(y.iter()).zip(targets.iter()) {
                    *s += yv * (gv - dot[t]);
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = cols;
            let gv = &nodes[gain.0].value;
            acc(nodes, grads, *gain, |s| {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((s, a), b) in s.iter_mut().zip(grow).zip(hrow) {
                        *s += a * b;
                    }
                }
            });
            acc(nodes, grads, *bias, |s| {
                for grow in g.chunks(d) {
                    s.iter_mut().zip(grow).for_each(|(s, a)| *s += a);
                }
            });
            acc(nodes, grads, *x, |s| {
                for (r, (srow, grow)) in s.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<f64> = grow.iter().zip(gv.iter()).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                    let k = inv_std[r] / d as f64;
                    for ((s, dhv), hv) in srow.iter_mut().zip(&dh).zip(hrow) {
                        *s += k * (d as f64 * dhv - sum_dh - hv * sum_dh_h);
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let c = dims(nodes, p).1;
                acc(nodes, grads, p, |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(cols)) {
                        srow.iter_mut()
                            .zip(&grow[offset..offset + c])
                            .for_each(|(s, x)| *s += x);
                    }
                });
                offset += c;
            }
        }
        Op::SliceCols(a, start) => {
            let start = *start;
            let c = dims(nodes, *a).1;
            acc(nodes, grads, *a, |s| {
                for (srow, grow) in s.chunks_mut(c).zip(g.chunks(cols)) {
                    srow[start..start + cols]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(s, x)| *s += x);
                }
            });
        }
        Op::GatherRows(a, index) => {
            acc(nodes, grads, *a, |s| {
                for (k, &src) in index.iter().enumerate() {
                    let grow = &g[k * cols..(k + 1) * cols];
                    s[src * cols..(src + 1) * cols]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(s, x)| *s += x);
                }
            });
        }
        Op::ScatterAddRows(a, index) => {
            acc(nodes, grads, *a, |s| {
                for (k, &dst) in index.iter().enumerate() {
                    let grow = &g[dst * cols..(dst + 1) * cols];
                    s[k * cols..(k + 1) * cols]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(s, x)| *s += x);
                }
            });
        }
        Op::Sum(a) => {
            let g0 = g[0];
            acc(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g0));
        }
        Op::Mean(a) => {
            let len = value(nodes, *a).len() as f64;
            let g0 = g[0] / len;
            acc(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g0));
        }
        Op::MeanRows(a) => {
            let r = dims(nodes, *a).0 as f64;
            acc(nodes, grads, *a, |s| {
                for srow in s.chunks_mut(cols) {
                    srow.iter_mut().zip(g).for_each(|(s, x)| *s += x / r);
                }
            });
        }
        Op::RowSum(a) => {
            let c = dims(nodes, *a).1;
            acc(nodes, grads, *a, |s| {
                for (srow, gv) in s.chunks_mut(c).zip(g) {
                    srow.iter_mut().for_each(|s| *s += gv);
                }
            });
        }
        Op::Element(a, index) => {
            let index = *index;
            acc(nodes, grads, *a, |s| s[index] += g[0]);
        }
        Op::BceWithLogits(a, targets) => {
            let z = nodes[a.0].value.as_slice();
            let scale = g[0] / z.len() as f64;
            acc(nodes, grads, *a, |s| {
                for ((s, z), y) in s.iter_mut().zip(z.iter()).zip(targets) {
                    *s += scale * (kernels::sigmoid(*z) - y);
                }
            });
        }
        Op::CrossEntropy(a, targets) => {
            let c = dims(nodes, *a).1;
            let n = targets.len() as f64;
            let probs = kernels::row_softmax(value(nodes, *a), targets.len(), c);
            let scale = g[0] / n;
            acc(nodes, grads, *a, |s| {
                for (r, (srow, prow)) in s.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    for (k, (s, p)) in srow.iter_mut().zip(prow).enumerate() {
                        let onehot = f64::from(k == targets[r]);
                        *s += scale * (p - onehot);
                    }
                }
            });
        }
    }
}
