//! Append-only tape for reverse-mode differentiation.
//!
//! Every vector-Jacobian product is itself written with tape operations, so a
//! gradient requested with [`Tape::gradients_graph`] can be differentiated
//! again. A tape lives for one training step and is then dropped.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    SumRows(usize),
    RowSums(usize),
    BroadcastRows(usize, usize),
    BroadcastCols(usize, usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Pick(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>, usize),
    Sum(usize),
    Fill(usize, Rc<[usize]>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![a, b],
            Transpose(a) | Scale(a, _) | SumRows(a) | RowSums(a) | BroadcastRows(a, _)
            | BroadcastCols(a, _) | Relu(a) | Softmax(a) | LogSoftmax(a) | Pick(a, _)
            | Scatter(a, _, _) | Sum(a) | Fill(a, _) => vec![a],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn apply(&self, op: Op) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let value = eval(&op, &nodes)?;
            let rg = op.parents().iter().any(|&p| nodes[p].requires_grad);
            (value, rg)
        };
        Ok(self.push(op, value, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Recomputes every non-leaf node from its parents and checks that the
    /// stored value is reproduced bit for bit.
    pub fn replay_matches(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().all(|(i, node)| {
            if node.op.parents().iter().any(|&p| p >= i) {
                return false;
            }
            match node.op {
                Op::Leaf => true,
                ref op => match eval(op, &nodes) {
                    Ok(v) => {
                        v.shape() == node.value.shape()
                            && v.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                    }
                    Err(_) => false,
                },
            }
        })
    }

    /// First-order gradients of `loss` with respect to `wrt`. Nodes created
    /// while differentiating are discarded before returning.
    pub fn gradients(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let grads = self.backward(loss, wrt)?;
        let out = grads
            .iter()
            .zip(wrt)
            .map(|(g, w)| match g {
                Some(id) => (*self.value(*id)).clone(),
                None => Tensor::zeros(w.value().shape()),
            })
            .collect();
        self.nodes.borrow_mut().truncate(mark);
        Ok(out)
    }

    /// Gradients kept on the tape, so they can be differentiated again.
    pub fn gradients_graph<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let grads = self.backward(loss, wrt)?;
        Ok(grads
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| match g {
                Some(id) => self.var(id),
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }

    fn backward(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Option<usize>>> {
        debug_assert!(std::ptr::eq(loss.tape, self));
        let loss_value = loss.value();
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let end = loss.id + 1;
        let mut grads: Vec<Option<usize>> = vec![None; end];
        if self.nodes.borrow()[loss.id].requires_grad {
            grads[loss.id] = Some(self.constant(Tensor::full(loss_value.shape(), 1.0)).id);
        }

        for id in (0..end).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, requires) = {
                let nodes = self.nodes.borrow();
                let parents = nodes[id].op.parents();
                let requires: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
                (nodes[id].op.clone(), requires)
            };
            if !requires.iter().any(|&r| r) {
                continue;
            }
            let contribs = self.vjp(&op, id, self.var(g), &requires)?;
            for (parent, contrib) in contribs {
                grads[parent] = Some(match grads[parent] {
                    None => contrib.id,
                    Some(prev) => self.var(prev).add(contrib)?.id,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| if w.id < end { grads[w.id] } else { None })
            .collect())
    }

    /// Vector-Jacobian product of one node, written in tape operations.
    fn vjp<'t>(&'t self, op: &Op, out: usize, g: Var<'t>, requires: &[bool]) -> Result<Vec<(usize, Var<'t>)>> {
        use Op::*;
        let want = |i: usize| requires.get(i).copied().unwrap_or(false);
        let mut res = Vec::with_capacity(2);
        match *op {
            Leaf => {}
            MatMul(a, b) => {
                if want(0) {
                    res.push((a, g.matmul(self.var(b).t()?)?));
                }
                if want(1) {
                    res.push((b, self.var(a).t()?.matmul(g)?));
                }
            }
            Transpose(a) => res.push((a, g.t()?)),
            Add(a, b) => {
                if want(0) {
                    res.push((a, g));
                }
                if want(1) {
                    res.push((b, g));
                }
            }
            Sub(a, b) => {
                if want(0) {
                    res.push((a, g));
                }
                if want(1) {
                    res.push((b, g.scale(-1.0)?));
                }
            }
            Mul(a, b) => {
                if want(0) {
                    res.push((a, g.mul(self.var(b))?));
                }
                if want(1) {
                    res.push((b, g.mul(self.var(a))?));
                }
            }
            Scale(a, c) => res.push((a, g.scale(c)?)),
            AddRow(a, r) => {
                if want(0) {
                    res.push((a, g));
                }
                if want(1) {
                    res.push((r, g.sum_rows()?));
                }
            }
            SumRows(a) => {
                let n = self.value(a).rows();
                res.push((a, g.broadcast_rows(n)?));
            }
            RowSums(a) => {
                let m = self.value(a).cols();
                res.push((a, g.broadcast_cols(m)?));
            }
            BroadcastRows(v, _) => res.push((v, g.sum_rows()?)),
            BroadcastCols(v, _) => res.push((v, g.row_sums()?)),
            Relu(a) => {
                let mask = self.constant(self.value(a).relu_mask());
                res.push((a, g.mul(mask)?));
            }
            Softmax(a) => {
                let s = self.var(out);
                let sg = s.mul(g)?;
                let m = self.value(out).cols();
                let inner = s.mul(sg.row_sums()?.broadcast_cols(m)?)?;
                res.push((a, sg.sub(inner)?));
            }
            LogSoftmax(a) => {
                let s = self.var(a).softmax()?;
                let m = self.value(a).cols();
                let inner = s.mul(g.row_sums()?.broadcast_cols(m)?)?;
                res.push((a, g.sub(inner)?));
            }
            Pick(a, ref labels) => {
                let m = self.value(a).cols();
                res.push((a, g.scatter(labels, m)?));
            }
            Scatter(v, ref labels, _) => res.push((v, g.pick(labels)?)),
            Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                res.push((a, g.fill(&shape)?));
            }
            Fill(s, _) => res.push((s, g.sum()?)),
        }
        Ok(res)
    }
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    use Op::*;
    let v = |i: usize| &*nodes[i].value;
    Ok(match *op {
        Leaf => unreachable!("leaves are never recomputed"),
        MatMul(a, b) => v(a).matmul(v(b))?,
        Transpose(a) => v(a).transpose()?,
        Add(a, b) => v(a).add(v(b))?,
        Sub(a, b) => v(a).sub(v(b))?,
        Mul(a, b) => v(a).mul(v(b))?,
        Scale(a, c) => v(a).scale(c),
        AddRow(a, r) => v(a).add_row(v(r))?,
        SumRows(a) => v(a).sum_rows()?,
        RowSums(a) => v(a).row_sums()?,
        BroadcastRows(a, n) => v(a).broadcast_rows(n)?,
        BroadcastCols(a, m) => v(a).broadcast_cols(m)?,
        Relu(a) => v(a).relu(),
        Softmax(a) => require_matrix(v(a), "softmax")?.softmax_rows(),
        LogSoftmax(a) => require_matrix(v(a), "log_softmax")?.log_softmax_rows(),
        Pick(a, ref labels) => v(a).pick(labels)?,
        Scatter(a, ref labels, m) => v(a).scatter(labels, m)?,
        Sum(a) => v(a).sum(),
        Fill(a, ref shape) => {
            let s = v(a);
            if !s.is_scalar() {
                return Err(Error::NotScalar(s.shape().to_vec()));
            }
            Tensor::full(shape, s.item())
        }
    })
}

fn require_matrix<'a>(t: &'a Tensor, op: &'static str) -> Result<&'a Tensor> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(t)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// Whether gradients can flow from this node back to a leaf.
    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(&other);
        self.tape.apply(Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        self.tape.apply(Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(&other);
        self.tape.apply(Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(&other);
        self.tape.apply(Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(&other);
        self.tape.apply(Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.apply(Op::Scale(self.id, c))
    }

    /// Broadcast add of a bias vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check(&row);
        self.tape.apply(Op::AddRow(self.id, row.id))
    }

    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.tape.apply(Op::SumRows(self.id))
    }

    pub fn row_sums(self) -> Result<Var<'t>> {
        self.tape.apply(Op::RowSums(self.id))
    }

    pub fn broadcast_rows(self, n: usize) -> Result<Var<'t>> {
        self.tape.apply(Op::BroadcastRows(self.id, n))
    }

    pub fn broadcast_cols(self, m: usize) -> Result<Var<'t>> {
        self.tape.apply(Op::BroadcastCols(self.id, m))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.apply(Op::Relu(self.id))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.tape.apply(Op::Softmax(self.id))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.tape.apply(Op::LogSoftmax(self.id))
    }

    pub fn pick(self, labels: &[usize]) -> Result<Var<'t>> {
        self.tape.apply(Op::Pick(self.id, labels.into()))
    }

    pub fn scatter(self, labels: &[usize], m: usize) -> Result<Var<'t>> {
        self.tape.apply(Op::Scatter(self.id, labels.into(), m))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.apply(Op::Sum(self.id))
    }

    pub fn fill(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.apply(Op::Fill(self.id, shape.into()))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(Error::EmptyBatch("mean over zero elements"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll(self, labels: &[usize]) -> Result<Var<'t>> {
        self.pick(labels)?.mean()?.scale(-1.0)
    }

    /// Mean softmax cross-entropy of logits against labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        self.log_softmax()?.nll(labels)
    }

    /// Sum of squared differences.
    pub fn squared_error(self, target: Var<'t>) -> Result<Var<'t>> {
        let d = self.sub(target)?;
        d.mul(d)?.sum()
    }

    /// Mean of squared differences over all elements.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(Error::EmptyBatch("mse over zero elements"));
        }
        self.squared_error(target)?.scale(1.0 / n as f64)
    }
}
