//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Constants never receive gradients and their
//! parents are skipped during the reverse pass.

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Square(Var),
    Gather(Var, Vec<usize>),
    BinaryCrossEntropy {
        prob: Var,
        targets: Tensor,
        weights: Tensor,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable #{} is not recorded on this tape ({} nodes)",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = parents.iter().any(|&p| self.needs(p));
        Ok(self.push(value, op, rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        self.record(v, Op::MatMulNt(a, b), &[a, b], "matmul")
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = tensor::add_row(self.value(a), self.value(bias))?;
        self.record(v, Op::AddRow(a, bias), &[a, bias], "add_row")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.record(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        self.record(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.record(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.record(v, Op::Scale(a, s), &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = tensor::relu(self.value(a));
        self.record(v, Op::Relu(a), &[a], "relu")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(a));
        self.record(v, Op::Softmax(a), &[a], "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = tensor::log_softmax_rows(self.value(a));
        self.record(v, Op::LogSoftmax(a), &[a], "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a], "sum")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.record(v, Op::Square(a), &[a], "square")
    }

    /// Picks entry `idx[i]` from row `i`, yielding a vector with one entry per row.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows() {
            return Err(Error::dim("gather rows", t.rows(), idx.len()));
        }
        let cols = t.cols();
        let mut out = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(Error::Index {
                    context: "gather",
                    index: j,
                    limit: cols,
                });
            }
            out.push(t.row(i)[j]);
        }
        self.record(Tensor::vector(out), Op::Gather(a, idx), &[a], "gather")
    }

    /// Weighted binary cross-entropy summed over all entries:
    /// `Σ w·[−y·log ĥ − (1−y)·log(1−ĥ)]` with `ĥ = clamp(prob, eps, 1−eps)`.
    pub fn binary_cross_entropy(&mut self, prob: Var, targets: Tensor, weights: Tensor, eps: f64) -> Result<Var> {
        let p = self.value(prob);
        p.same_shape(&targets, "binary_cross_entropy targets")?;
        p.same_shape(&weights, "binary_cross_entropy weights")?;
        let mut total = 0.0;
        for ((&h, &y), &w) in p.data().iter().zip(targets.data()).zip(weights.data()) {
            if w != 0.0 {
                total += w * bce_term(y, h, eps);
            }
        }
        self.record(
            Tensor::scalar(total),
            Op::BinaryCrossEntropy {
                prob,
                targets,
                weights,
                eps,
            },
            &[prob],
            "binary_cross_entropy",
        )
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    acc(*a, tensor::matmul_nn(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    acc(*b, tensor::matmul_tn(g, self.value(*a))?);
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if self.needs(*bias) {
                    let m = g.cols();
                    let mut col = vec![0.0; m];
                    for row in g.data().chunks_exact(m) {
                        for (c, v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), col)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(g, vb, |x, y| x * y));
                acc(*b, zip_map(g, va, |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Relu(a) => acc(*a, zip_map(g, out, |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = g.clone();
                for ((di, yi), gi) in d
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(g.data().chunks_exact(c))
                {
                    let inner = tensor::dot(gi, yi);
                    for ((dv, &y), &gv) in di.iter_mut().zip(yi).zip(gi) {
                        *dv = y * (gv - inner);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut d = g.clone();
                for ((di, yi), gi) in d
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(g.data().chunks_exact(c))
                {
                    let total: f64 = gi.iter().sum();
                    for ((dv, &y), &gv) in di.iter_mut().zip(yi).zip(gi) {
                        *dv = gv - y.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Tensor::filled(self.value(*a).shape(), g.data()[0])),
            Op::Square(a) => acc(*a, zip_map(g, self.value(*a), |x, y| 2.0 * x * y)),
            Op::Gather(a, idx) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.shape());
                for (i, (&j, &gv)) in idx.iter().zip(g.data()).enumerate() {
                    d.row_mut(i)[j] += gv;
                }
                acc(*a, d);
            }
            Op::BinaryCrossEntropy {
                prob,
                targets,
                weights,
                eps,
            } => {
                let gs = g.data()[0];
                let p = self.value(*prob);
                let mut d = Tensor::zeros(p.shape());
                for (((dv, &h), &y), &w) in d
                    .data_mut()
                    .iter_mut()
                    .zip(p.data())
                    .zip(targets.data())
                    .zip(weights.data())
                {
                    if w == 0.0 || h < *eps || h > 1.0 - eps {
                        continue;
                    }
                    *dv = gs * w * (-y / h + (1.0 - y) / (1.0 - h));
                }
                acc(*prob, d);
            }
        }
        Ok(())
    }
}

pub(crate) fn bce_term(target: f64, prob: f64, eps: f64) -> f64 {
    let h = prob.clamp(eps, 1.0 - eps);
    -target * h.ln() - (1.0 - target) * (1.0 - h).ln()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked on record")
}

/// Runs the reverse pass; free-function form of [`Tape::backward`].
pub fn backward(tape: &mut Tape, loss: Var) -> Result<()> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(p).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_squared_norm_has_gradient_equal_to_params() {
        let values = vec![0.3, -1.2, 4.0, 0.0];
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(values.clone()));
        let sq = tape.square(p).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), values.as_slice());
    }

    #[test]
    fn backward_on_empty_tape_is_usage_error() {
        let mut recorded = Tape::new();
        let v = recorded.param(Tensor::scalar(1.0));
        let mut empty = Tape::new();
        assert!(matches!(empty.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = tape.param(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = tape.matmul_nt(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0]);
    }
}
