//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A forward pass records primitive operations on a [`Tape`]; calling
//! [`Var::backward`] on a scalar output replays the tape once in reverse
//! insertion order (which is a reverse topological order, since parents
//! always precede children) and accumulates adjoints. Gradients are then
//! queried per variable from the returned [`Gradients`].
//!
//! A tape is confined to one logical thread; parallelism happens across
//! independent tapes.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVariable,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Tanh(usize),
    Relu(usize),
    Recip(usize),
    Sum(usize),
    Norm(usize),
    LogSoftmaxRows(usize),
    MulScalarVar(usize, usize),
    ShiftRows(usize, isize),
    BroadcastRows(usize),
    ConcatCols(usize, usize),
    FromScalars(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    last_backward_visits: usize,
}

/// Records a computation for one backward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                last_backward_visits: 0,
            })),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op });
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a constant. Identical to a leaf; the adjoint is simply
    /// never queried.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes visited by the most recent backward pass.
    pub fn last_backward_visits(&self) -> usize {
        self.inner.borrow().last_backward_visits
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Builds a tensor from scalar variables; adjoints route back to each.
    pub fn from_scalars(&self, shape: &[usize], parts: &[Var]) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, parts.len(), "from_scalars shape/parts mismatch");
        let inner = self.inner.borrow();
        let mut data = Vec::with_capacity(parts.len());
        let mut parents = Vec::with_capacity(parts.len());
        for p in parts {
            assert!(self.same_tape(&p.tape), "from_scalars across tapes");
            let v = &inner.nodes[p.idx].value;
            assert_eq!(v.numel(), 1, "from_scalars needs scalar parts");
            data.push(v.data()[0]);
            parents.push(p.idx);
        }
        drop(inner);
        self.push(Tensor::from_vec(shape, data), Op::FromScalars(parents))
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].value.shape().to_vec()
    }

    fn value_ref<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    fn binary(&self, other: &Var, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var {
        assert!(self.tape.same_tape(&other.tape), "variables from different tapes");
        let value = {
            let inner = self.tape.inner.borrow();
            f(&inner.nodes[self.idx].value, &inner.nodes[other.idx].value)
        };
        self.tape.push(value, op)
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var {
        let value = self.value_ref(f);
        self.tape.push(value, op)
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a.add(b), Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a.sub(b), Op::Sub(self.idx, other.idx))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a.mul(b), Op::Mul(self.idx, other.idx))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(|a| a.scale(c), Op::Scale(self.idx, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(|a| a.map(|v| v + c), Op::AddScalar(self.idx))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a.matmul(b), Op::Matmul(self.idx, other.idx))
    }

    pub fn tanh(&self) -> Var {
        self.unary(|a| a.map(f64::tanh), Op::Tanh(self.idx))
    }

    pub fn relu(&self) -> Var {
        self.unary(|a| a.map(|v| if v > 0.0 { v } else { 0.0 }), Op::Relu(self.idx))
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Var {
        self.unary(|a| a.map(|v| 1.0 / v), Op::Recip(self.idx))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self) -> Var {
        self.unary(|a| Tensor::scalar(a.sum()), Op::Sum(self.idx))
    }

    /// Global L2 norm, as a `[1]` tensor.
    pub fn norm(&self) -> Var {
        self.unary(|a| Tensor::scalar(a.l2_norm()), Op::Norm(self.idx))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&self) -> Var {
        self.unary(
            |a| {
                let (rows, cols) = (a.rows(), a.cols());
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let row = a.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    out.extend(row.iter().map(|v| v - lse));
                }
                Tensor::from_vec(&[rows, cols], out)
            },
            Op::LogSoftmaxRows(self.idx),
        )
    }

    /// Product with a scalar variable (broadcast over all entries).
    pub fn mul_scalar_var(&self, s: &Var) -> Var {
        assert_eq!(s.value_ref(|t| t.numel()), 1, "mul_scalar_var needs scalar");
        self.binary(
            s,
            |a, b| a.scale(b.data()[0]),
            Op::MulScalarVar(self.idx, s.idx),
        )
    }

    /// Division by a scalar variable.
    pub fn div_scalar_var(&self, s: &Var) -> Var {
        self.mul_scalar_var(&s.recip())
    }

    /// Rows shifted by `offset` with zero fill (see [`Tensor::shift_rows`]).
    pub fn shift_rows(&self, offset: isize) -> Var {
        self.unary(|a| a.shift_rows(offset), Op::ShiftRows(self.idx, offset))
    }

    /// Broadcast a single row to `rows` rows.
    pub fn broadcast_rows(&self, rows: usize) -> Var {
        self.unary(|a| a.broadcast_rows(rows), Op::BroadcastRows(self.idx))
    }

    pub fn concat_cols(&self, other: &Var) -> Var {
        self.binary(
            other,
            |a, b| a.concat_cols(b),
            Op::ConcatCols(self.idx, other.idx),
        )
    }

    /// Elementwise square.
    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// Runs the backward pass from this (scalar) variable.
    pub fn backward(&self) -> Result<Gradients, TapeError> {
        let mut inner = self.tape.inner.borrow_mut();
        let root = self.idx;
        {
            let out = &inner.nodes[root].value;
            if out.numel() != 1 {
                return Err(TapeError::NonScalarOutput(out.shape().to_vec()));
            }
        }
        let n = inner.nodes.len();
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[root] = Some(Tensor::scalar(1.0).reshape(inner.nodes[root].value.shape()));
        let mut visits = 0usize;
        for i in (0..=root).rev() {
            visits += 1;
            let Some(g) = adj[i].take() else { continue };
            {
                let nodes = &inner.nodes;
                match &nodes[i].op {
                    Op::Leaf => {}
                    Op::Add(a, b) => {
                        accumulate(&mut adj, *a, g.clone());
                        accumulate(&mut adj, *b, g.clone());
                    }
                    Op::Sub(a, b) => {
                        accumulate(&mut adj, *a, g.clone());
                        accumulate(&mut adj, *b, g.scale(-1.0));
                    }
                    Op::Mul(a, b) => {
                        accumulate(&mut adj, *a, g.mul(&nodes[*b].value));
                        accumulate(&mut adj, *b, g.mul(&nodes[*a].value));
                    }
                    Op::Scale(a, c) => accumulate(&mut adj, *a, g.scale(*c)),
                    Op::AddScalar(a) => accumulate(&mut adj, *a, g.clone()),
                    Op::Matmul(a, b) => {
                        accumulate(&mut adj, *a, g.matmul_nt(&nodes[*b].value));
                        accumulate(&mut adj, *b, nodes[*a].value.matmul_tn(&g));
                    }
                    Op::Tanh(a) => {
                        let y = &nodes[i].value;
                        accumulate(&mut adj, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
                    }
                    Op::Relu(a) => {
                        let x = &nodes[*a].value;
                        accumulate(
                            &mut adj,
                            *a,
                            g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
                        );
                    }
                    Op::Recip(a) => {
                        let y = &nodes[i].value;
                        accumulate(&mut adj, *a, g.zip_map(y, |gi, yi| -gi * yi * yi));
                    }
                    Op::Sum(a) => {
                        let shape = nodes[*a].value.shape().to_vec();
                        accumulate(&mut adj, *a, Tensor::full(&shape, g.data()[0]));
                    }
                    Op::Norm(a) => {
                        let x = &nodes[*a].value;
                        let n = nodes[i].value.data()[0];
                        let d = if n > 0.0 {
                            x.scale(g.data()[0] / n)
                        } else {
                            Tensor::zeros_like(x)
                        };
                        accumulate(&mut adj, *a, d);
                    }
                    Op::LogSoftmaxRows(a) => {
                        let y = &nodes[i].value;
                        let (rows, cols) = (y.rows(), y.cols());
                        let mut d = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let grow = g.row(r);
                            let yrow = y.row(r);
                            let gsum: f64 = grow.iter().sum();
                            for c in 0..cols {
                                d.push(grow[c] - yrow[c].exp() * gsum);
                            }
                        }
                        accumulate(&mut adj, *a, Tensor::from_vec(&[rows, cols], d));
                    }
                    Op::MulScalarVar(a, s) => {
                        let sval = nodes[*s].value.data()[0];
                        accumulate(&mut adj, *a, g.scale(sval));
                        let ds = g.dot(&nodes[*a].value);
                        accumulate(&mut adj, *s, Tensor::scalar(ds));
                    }
                    Op::ShiftRows(a, off) => {
                        accumulate(&mut adj, *a, g.shift_rows(-off));
                    }
                    Op::BroadcastRows(a) => {
                        let src_shape = nodes[*a].value.shape().to_vec();
                        accumulate(&mut adj, *a, g.col_sums().reshape(&src_shape));
                    }
                    Op::ConcatCols(a, b) => {
                        let (rows, ca) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                        let cb = nodes[*b].value.cols();
                        let mut da = Vec::with_capacity(rows * ca);
                        let mut db = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            let grow = g.row(r);
                            da.extend_from_slice(&grow[..ca]);
                            db.extend_from_slice(&grow[ca..]);
                        }
                        accumulate(&mut adj, *a, Tensor::from_vec(&[rows, ca], da));
                        accumulate(&mut adj, *b, Tensor::from_vec(&[rows, cb], db));
                    }
                    Op::FromScalars(parents) => {
                        for (j, &p) in parents.iter().enumerate() {
                            accumulate(&mut adj, p, Tensor::scalar(g.data()[j]));
                        }
                    }
                }
            }
            adj[i] = Some(g);
        }
        inner.last_backward_visits = visits;
        Ok(Gradients {
            tape: self.tape.clone(),
            adjoints: adj,
        })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut adj[idx] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    tape: Tape,
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `var`.
    /// Zero tensors are returned for variables the root does not depend on.
    pub fn get(&self, var: &Var) -> Result<Tensor, TapeError> {
        if !self.tape.same_tape(&var.tape) {
            return Err(TapeError::ForeignVariable);
        }
        Ok(match &self.adjoints[var.idx] {
            Some(t) => t.clone(),
            None => var.value_ref(Tensor::zeros_like),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f = sum(x²), x = [1, 2] -> grad [2, 4]
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let f = x.square().sum();
        let grads = f.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -1.0, 0.5]));
        let c = tape.constant(Tensor::scalar(4.0));
        let f = c.scale(2.0).sum();
        let grads = f.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = x.scale(3.0);
        assert!(matches!(y.backward(), Err(TapeError::NonScalarOutput(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let tape_a = Tape::new();
        let tape_b = Tape::new();
        let x = tape_a.leaf(Tensor::scalar(1.0));
        let y = tape_b.leaf(Tensor::scalar(1.0));
        let f = x.square().sum();
        let grads = f.backward().unwrap();
        assert!(matches!(grads.get(&y), Err(TapeError::ForeignVariable)));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]));
        let f = x.tanh().square().sum();
        let ops = tape.len();
        f.backward().unwrap();
        assert_eq!(tape.last_backward_visits(), ops);
    }

    #[test]
    fn diamond_reuse_accumulates() {
        // f = sum(x * x) with both operands the same node.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]));
        let f = x.mul(&x).sum();
        let grads = f.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn log_softmax_rows_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.2, -0.4, 1.1]));
        let lp = x.log_softmax_rows();
        let probs: Vec<f64> = lp.value().data().iter().map(|v| v.exp()).collect();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Sum of log-probs gradient: 1 - K * softmax.
        let f = lp.sum();
        let g = f.backward().unwrap().get(&x).unwrap();
        for (gi, pi) in g.data().iter().zip(&probs) {
            assert!((gi - (1.0 - 3.0 * pi)).abs() < 1e-12);
        }
    }
}
