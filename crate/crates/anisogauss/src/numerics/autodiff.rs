//! Define-by-run reverse-mode automatic differentiation.
//!
//! The tape records tensor-valued nodes; `backward` walks the recording
//! in reverse and accumulates gradients for every leaf created with
//! `Tape::param`. Graphs are confined to a single thread from
//! construction through backward.

use std::cell::RefCell;
use std::rc::Rc;

use super::NumericsError;

/// Row-major tensor. Rank 0 (scalar), 1 (vector) and 2 (matrix) are
/// supported.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { shape: vec![rows, cols], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product::<usize>().max(1)] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// (rows, cols) treating vectors as a single row.
    fn rc(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rank > 2 unsupported"),
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalarNode(usize, usize),
    DivScalarNode(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Softplus(usize),
    Tanh(usize),
    Exp(usize),
    SoftmaxRows(usize),
    LayerNormRows { x: usize, gain: usize, bias: usize, eps: f64 },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize, end: usize },
    SliceCols { x: usize, start: usize, end: usize },
    Sum(usize),
    Mean(usize),
    SteThreshold { x: usize },
    Reshape(usize),
}

struct TapeInner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

/// A recording of tensor operations supporting reverse-mode gradients.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self { inner: Rc::new(RefCell::new(TapeInner { values: Vec::new(), ops: Vec::new() })) }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.ops.push(op);
        Var { tape: self.clone(), idx: inner.values.len() - 1 }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients,
    /// retrievable through [`Var::grad_in`].
    pub fn backward(&self, loss: &Var) -> Result<Gradients, NumericsError> {
        let inner = self.inner.borrow();
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(NumericsError::Graph("loss from a different tape".into()));
        }
        if inner.values[loss.idx].len() != 1 {
            return Err(NumericsError::Graph("loss is not scalar".into()));
        }
        let n = inner.values.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.idx] = Some(Tensor {
            shape: inner.values[loss.idx].shape.clone(),
            data: vec![1.0],
        });

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let vals = &inner.values;
            let acc = |idx: usize, contrib: Tensor, grads: &mut Vec<Option<Tensor>>| {
                match &mut grads[idx] {
                    Some(existing) => {
                        for (a, b) in existing.data.iter_mut().zip(&contrib.data) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &inner.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    let neg = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| -x).collect() };
                    acc(*b, neg, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&vals[*b].data).map(|(x, y)| x * y).collect(),
                    };
                    let gb = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&vals[*a].data).map(|(x, y)| x * y).collect(),
                    };
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::MulScalarNode(a, s) => {
                    let sv = vals[*s].as_scalar();
                    let ga = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| x * sv).collect() };
                    let gs: f64 = g.data.iter().zip(&vals[*a].data).map(|(x, y)| x * y).sum();
                    acc(*a, ga, &mut grads);
                    acc(*s, Tensor { shape: vals[*s].shape.clone(), data: vec![gs] }, &mut grads);
                }
                Op::DivScalarNode(a, s) => {
                    let sv = vals[*s].as_scalar();
                    let ga = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| x / sv).collect() };
                    let gs: f64 = g
                        .data
                        .iter()
                        .zip(&vals[*a].data)
                        .map(|(x, y)| -x * y / (sv * sv))
                        .sum();
                    acc(*a, ga, &mut grads);
                    acc(*s, Tensor { shape: vals[*s].shape.clone(), data: vec![gs] }, &mut grads);
                }
                Op::Scale(a, c) => {
                    let ga = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| x * c).collect() };
                    acc(*a, ga, &mut grads);
                }
                Op::AddConst(a) => {
                    acc(*a, g, &mut grads);
                }
                Op::AddBias(a, b) => {
                    let (rows, cols) = vals[*a].rc();
                    acc(*a, g.clone(), &mut grads);
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g.data[r * cols + c];
                        }
                    }
                    acc(*b, Tensor { shape: vals[*b].shape.clone(), data: gb }, &mut grads);
                }
                Op::MatMul(a, b) => {
                    let (ar, ac) = vals[*a].rc();
                    let (_, bc) = vals[*b].rc();
                    // dA = G B^T
                    let mut ga = vec![0.0; ar * ac];
                    for i2 in 0..ar {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += g.data[i2 * bc + j] * vals[*b].data[k * bc + j];
                            }
                            ga[i2 * ac + k] = s;
                        }
                    }
                    // dB = A^T G
                    let mut gb = vec![0.0; ac * bc];
                    for k in 0..ac {
                        for j in 0..bc {
                            let mut s = 0.0;
                            for i2 in 0..ar {
                                s += vals[*a].data[i2 * ac + k] * g.data[i2 * bc + j];
                            }
                            gb[k * bc + j] = s;
                        }
                    }
                    acc(*a, Tensor { shape: vals[*a].shape.clone(), data: ga }, &mut grads);
                    acc(*b, Tensor { shape: vals[*b].shape.clone(), data: gb }, &mut grads);
                }
                Op::Transpose(a) => {
                    let (rows, cols) = vals[i].rc();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[c * rows + r] = g.data[r * cols + c];
                        }
                    }
                    acc(*a, Tensor { shape: vals[*a].shape.clone(), data: ga }, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&vals[i].data)
                            .map(|(x, y)| x * y * (1.0 - y))
                            .collect(),
                    };
                    acc(*a, ga, &mut grads);
                }
                Op::Softplus(a) => {
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&vals[*a].data)
                            .map(|(x, y)| x * sigmoid(*y))
                            .collect(),
                    };
                    acc(*a, ga, &mut grads);
                }
                Op::Tanh(a) => {
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&vals[i].data)
                            .map(|(x, y)| x * (1.0 - y * y))
                            .collect(),
                    };
                    acc(*a, ga, &mut grads);
                }
                Op::Exp(a) => {
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&vals[i].data).map(|(x, y)| x * y).collect(),
                    };
                    acc(*a, ga, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let (rows, cols) = vals[i].rc();
                    let y = &vals[i].data;
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| g.data[base + c] * y[base + c]).sum();
                        for c in 0..cols {
                            ga[base + c] = y[base + c] * (g.data[base + c] - dot);
                        }
                    }
                    acc(*a, Tensor { shape: vals[*a].shape.clone(), data: ga }, &mut grads);
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let (rows, cols) = vals[*x].rc();
                    let xd = &vals[*x].data;
                    let gaind = &vals[*gain].data;
                    let nf = cols as f64;
                    let mut gx = vec![0.0; rows * cols];
                    let mut ggain = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let mean: f64 = (0..cols).map(|c| xd[base + c]).sum::<f64>() / nf;
                        let var: f64 =
                            (0..cols).map(|c| (xd[base + c] - mean).powi(2)).sum::<f64>() / nf;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> =
                            (0..cols).map(|c| (xd[base + c] - mean) * inv_std).collect();
                        // dy wrt normalized value
                        let dxhat: Vec<f64> =
                            (0..cols).map(|c| g.data[base + c] * gaind[c]).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[base + c] = inv_std / nf
                                * (nf * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
                            ggain[c] += g.data[base + c] * xhat[c];
                            gbias[c] += g.data[base + c];
                        }
                    }
                    acc(*x, Tensor { shape: vals[*x].shape.clone(), data: gx }, &mut grads);
                    acc(*gain, Tensor { shape: vals[*gain].shape.clone(), data: ggain }, &mut grads);
                    acc(*bias, Tensor { shape: vals[*bias].shape.clone(), data: gbias }, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let (_, cols) = vals[i].rc();
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, _) = vals[p].rc();
                        let slice = g.data[offset * cols..(offset + pr) * cols].to_vec();
                        acc(p, Tensor { shape: vals[p].shape.clone(), data: slice }, &mut grads);
                        offset += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, cols) = vals[i].rc();
                    let mut offset = 0;
                    for &p in parts {
                        let (_, pc) = vals[p].rc();
                        let mut slice = vec![0.0; rows * pc];
                        for r in 0..rows {
                            for c in 0..pc {
                                slice[r * pc + c] = g.data[r * cols + offset + c];
                            }
                        }
                        acc(p, Tensor { shape: vals[p].shape.clone(), data: slice }, &mut grads);
                        offset += pc;
                    }
                }
                Op::SliceRows { x, start, end } => {
                    let (rows, cols) = vals[*x].rc();
                    let mut gx = vec![0.0; rows * cols];
                    gx[start * cols..end * cols].copy_from_slice(&g.data);
                    acc(*x, Tensor { shape: vals[*x].shape.clone(), data: gx }, &mut grads);
                }
                Op::SliceCols { x, start, end } => {
                    let (rows, cols) = vals[*x].rc();
                    let w = end - start;
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..w {
                            gx[r * cols + start + c] = g.data[r * w + c];
                        }
                    }
                    acc(*x, Tensor { shape: vals[*x].shape.clone(), data: gx }, &mut grads);
                }
                Op::Sum(a) => {
                    let gv = g.data[0];
                    let ga = Tensor { shape: vals[*a].shape.clone(), data: vec![gv; vals[*a].len()] };
                    acc(*a, ga, &mut grads);
                }
                Op::Mean(a) => {
                    let gv = g.data[0] / vals[*a].len() as f64;
                    let ga = Tensor { shape: vals[*a].shape.clone(), data: vec![gv; vals[*a].len()] };
                    acc(*a, ga, &mut grads);
                }
                // straight-through: backward is exactly identity
                Op::SteThreshold { x } => {
                    acc(*x, g, &mut grads);
                }
                Op::Reshape(a) => {
                    acc(*a, Tensor { shape: vals[*a].shape.clone(), data: g.data }, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, zero if the node did
    /// not influence the loss.
    pub fn wrt(&self, var: &Var) -> Tensor {
        match &self.grads[var.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.value().shape),
        }
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.idx].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.idx].shape.clone()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        self.tape.push(value, op)
    }

    fn same_shape(&self, other: &Var) {
        debug_assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
    }

    pub fn add(&self, other: &Var) -> Var {
        self.same_shape(other);
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let b = &inner.values[other.idx];
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
            }
        };
        self.unary(v, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.same_shape(other);
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let b = &inner.values[other.idx];
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
            }
        };
        self.unary(v, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.same_shape(other);
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let b = &inner.values[other.idx];
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
            }
        };
        self.unary(v, Op::Mul(self.idx, other.idx))
    }

    /// Multiply every entry by a scalar node.
    pub fn mul_scalar(&self, s: &Var) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let sv = inner.values[s.idx].as_scalar();
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x * sv).collect() }
        };
        self.unary(v, Op::MulScalarNode(self.idx, s.idx))
    }

    /// Divide every entry by a scalar node.
    pub fn div_scalar(&self, s: &Var) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let sv = inner.values[s.idx].as_scalar();
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x / sv).collect() }
        };
        self.unary(v, Op::DivScalarNode(self.idx, s.idx))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x * c).collect() }
        };
        self.unary(v, Op::Scale(self.idx, c))
    }

    pub fn add_const(&self, c: f64) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x + c).collect() }
        };
        self.unary(v, Op::AddConst(self.idx))
    }

    /// Matrix plus broadcast row vector.
    pub fn add_bias(&self, bias: &Var) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let b = &inner.values[bias.idx];
            let (rows, cols) = a.rc();
            debug_assert_eq!(b.len(), cols);
            let mut data = a.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += b.data[c];
                }
            }
            Tensor { shape: a.shape.clone(), data }
        };
        self.unary(v, Op::AddBias(self.idx, bias.idx))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let b = &inner.values[other.idx];
            let (ar, ac) = a.rc();
            let (br, bc) = b.rc();
            assert_eq!(ac, br, "matmul inner dimension mismatch");
            let mut data = vec![0.0; ar * bc];
            for i in 0..ar {
                for k in 0..ac {
                    let av = a.data[i * ac + k];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..bc {
                        data[i * bc + j] += av * b.data[k * bc + j];
                    }
                }
            }
            let shape = if a.shape.len() == 1 && b.shape.len() == 2 {
                vec![bc]
            } else {
                vec![ar, bc]
            };
            Tensor { shape, data }
        };
        self.unary(v, Op::MatMul(self.idx, other.idx))
    }

    pub fn transpose(&self) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let (rows, cols) = a.rc();
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows + r] = a.data[r * cols + c];
                }
            }
            Tensor { shape: vec![cols, rows], data }
        };
        self.unary(v, Op::Transpose(self.idx))
    }

    pub fn sigmoid(&self) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| sigmoid(*x)).collect() }
        };
        self.unary(v, Op::Sigmoid(self.idx))
    }

    pub fn softplus(&self) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let f = |x: f64| if x > 30.0 { x } else { (1.0 + x.exp()).ln() };
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| f(*x)).collect() }
        };
        self.unary(v, Op::Softplus(self.idx))
    }

    pub fn tanh(&self) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x.tanh()).collect() }
        };
        self.unary(v, Op::Tanh(self.idx))
    }

    pub fn exp(&self) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x.exp()).collect() }
        };
        self.unary(v, Op::Exp(self.idx))
    }

    /// Row-wise softmax (vectors are one row).
    pub fn softmax_rows(&self) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let (rows, cols) = a.rc();
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                let base = r * cols;
                let max = a.data[base..base + cols].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..cols {
                    let e = (a.data[base + c] - max).exp();
                    data[base + c] = e;
                    z += e;
                }
                for c in 0..cols {
                    data[base + c] /= z;
                }
            }
            Tensor { shape: a.shape.clone(), data }
        };
        self.unary(v, Op::SoftmaxRows(self.idx))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&self, gain: &Var, bias: &Var, eps: f64) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let gaind = &inner.values[gain.idx];
            let biasd = &inner.values[bias.idx];
            let (rows, cols) = a.rc();
            debug_assert_eq!(gaind.len(), cols);
            let mut data = vec![0.0; rows * cols];
            let nf = cols as f64;
            for r in 0..rows {
                let base = r * cols;
                let mean: f64 = a.data[base..base + cols].iter().sum::<f64>() / nf;
                let var: f64 =
                    a.data[base..base + cols].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
                let inv_std = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    data[base + c] =
                        gaind.data[c] * (a.data[base + c] - mean) * inv_std + biasd.data[c];
                }
            }
            Tensor { shape: a.shape.clone(), data }
        };
        self.unary(v, Op::LayerNormRows { x: self.idx, gain: gain.idx, bias: bias.idx, eps })
    }

    pub fn concat_rows(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let v = {
            let inner = tape.inner.borrow();
            let cols = inner.values[parts[0].idx].rc().1;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &inner.values[p.idx];
                assert_eq!(t.rc().1, cols, "concat_rows column mismatch");
                rows += t.rc().0;
                data.extend_from_slice(&t.data);
            }
            Tensor { shape: vec![rows, cols], data }
        };
        tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.idx).collect()))
    }

    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let v = {
            let inner = tape.inner.borrow();
            let rows = inner.values[parts[0].idx].rc().0;
            let cols: usize = parts.iter().map(|p| inner.values[p.idx].rc().1).sum();
            let mut data = vec![0.0; rows * cols];
            let mut offset = 0;
            for p in parts {
                let t = &inner.values[p.idx];
                let (pr, pc) = t.rc();
                assert_eq!(pr, rows, "concat_cols row mismatch");
                for r in 0..rows {
                    for c in 0..pc {
                        data[r * cols + offset + c] = t.data[r * pc + c];
                    }
                }
                offset += pc;
            }
            let shape = if parts.iter().all(|p| inner.values[p.idx].shape.len() <= 1) {
                vec![cols]
            } else {
                vec![rows, cols]
            };
            Tensor { shape, data }
        };
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let (_, cols) = a.rc();
            Tensor {
                shape: vec![end - start, cols],
                data: a.data[start * cols..end * cols].to_vec(),
            }
        };
        self.unary(v, Op::SliceRows { x: self.idx, start, end })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            let (rows, cols) = a.rc();
            let w = end - start;
            let mut data = vec![0.0; rows * w];
            for r in 0..rows {
                for c in 0..w {
                    data[r * w + c] = a.data[r * cols + start + c];
                }
            }
            let shape = if a.shape.len() == 1 { vec![w] } else { vec![rows, w] };
            Tensor { shape, data }
        };
        self.unary(v, Op::SliceCols { x: self.idx, start, end })
    }

    pub fn sum(&self) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            Tensor::scalar(inner.values[self.idx].data.iter().sum())
        };
        self.unary(v, Op::Sum(self.idx))
    }

    pub fn mean(&self) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
        };
        self.unary(v, Op::Mean(self.idx))
    }

    /// Hard threshold in the forward pass, identity in the backward
    /// pass (straight-through estimator).
    pub fn ste_threshold(&self, tau: f64) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|x| if *x >= tau { 1.0 } else { 0.0 }).collect(),
            }
        };
        self.unary(v, Op::SteThreshold { x: self.idx })
    }

    /// Reinterpret a vector as a 1-row matrix or vice versa.
    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.idx];
            assert_eq!(shape.iter().product::<usize>(), a.len());
            Tensor { shape: shape.to_vec(), data: a.data.clone() }
        };
        self.unary(v, Op::Reshape(self.idx))
    }

    /// Sum of elementwise product with a constant tensor. Used to inject
    /// externally computed gradients (e.g. from the renderer backward)
    /// into the tape as a pseudo-loss term.
    pub fn inner_with(&self, weights: &Tensor) -> Var {
        let w = self.tape.constant(weights.clone());
        self.mul(&w).sum()
    }
}

/// Central finite-difference gradient of `f` with respect to `params`.
///
/// `f` must be a pure function of the parameter values. This is the
/// independent oracle used by gradient tests; it never touches the
/// reverse-mode path.
pub fn finite_diff_grad(params: &mut [Tensor], f: &mut dyn FnMut(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(&params[pi].shape);
        for k in 0..params[pi].len() {
            let orig = params[pi].data[k];
            let h = 1e-5 * orig.abs().max(1.0);
            params[pi].data[k] = orig + h;
            let fp = f(params);
            params[pi].data[k] = orig - h;
            let fm = f(params);
            params[pi].data[k] = orig;
            g.data[k] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Max relative error between two gradient sets.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data.iter().zip(&n.data) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
