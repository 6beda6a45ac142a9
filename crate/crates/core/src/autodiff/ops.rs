//! Primitive catalogue and the composites built from it.

use super::{NodeId, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// tanh-approximated GELU and its first two derivatives.
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let k = S::lit(GELU_K);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    half * x * (S::one() + t)
}

pub(crate) fn gelu_deriv<S: Scalar>(x: S) -> S {
    let k = S::lit(GELU_K);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    let du = k * (S::one() + S::lit(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

pub(crate) fn gelu_second<S: Scalar>(x: S) -> S {
    let k = S::lit(GELU_K);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    let sech2 = S::one() - t * t;
    let du = k * (S::one() + S::lit(3.0) * a * x * x);
    let ddu = S::lit(6.0) * k * a * x;
    sech2 * du + half * x * sech2 * (ddu - S::lit(2.0) * t * du * du)
}

fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = x.require_matrix("row_softmax")?;
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

impl<'t, S: Scalar> Var<'t, S> {
    fn unary(
        self,
        name: &'static str,
        op: Op<S>,
        f: impl FnOnce(&Tensor<S>) -> Result<Tensor<S>>,
    ) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let value = self.tape.with_values(&[self.id], |v| f(v[0]))?;
        self.tape.push(name, op, vec![self.id], value)
    }

    fn binary(
        self,
        other: Var<'t, S>,
        name: &'static str,
        op: Op<S>,
        f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> Result<Tensor<S>>,
    ) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let value = self
            .tape
            .with_values(&[self.id, other.id], |v| f(v[0], v[1]))?;
        self.tape.push(name, op, vec![self.id, other.id], value)
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "add", Op::Add, |a, b| a.add(b))
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "sub", Op::Sub, |a, b| a.sub(b))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "mul", Op::Mul, |a, b| a.zip_map(b, "mul", |x, y| x * y))
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(self, c: S) -> Result<Var<'t, S>> {
        self.unary("scale", Op::Scale(c), |a| Ok(a.scale(c)))
    }

    pub fn neg(self) -> Result<Var<'t, S>> {
        self.scale(-S::one())
    }

    /// Multiplies by a recorded single-element node.
    pub fn scale_by(self, s: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(s, "scale_by", Op::ScaleBy, |a, s| {
            if s.numel() != 1 {
                return Err(Error::shape(
                    "scale_by",
                    format!("scale factor has shape {:?}", s.shape()),
                ));
            }
            Ok(a.scale(s.item()))
        })
    }

    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "matmul", Op::MatMul, |a, b| a.matmul(b))
    }

    pub fn t(self) -> Result<Var<'t, S>> {
        self.unary("transpose", Op::Transpose, |a| a.transpose())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        self.unary("reshape", Op::Reshape, |a| a.reshape(shape))
    }

    pub fn row_slice(self, start: usize, end: usize) -> Result<Var<'t, S>> {
        self.unary("row_slice", Op::RowSlice { start, end }, |a| {
            a.row_slice(start, end)
        })
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(self) -> Result<Var<'t, S>> {
        self.unary("sum", Op::Sum, |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn mean(self) -> Result<Var<'t, S>> {
        let n = S::lit(self.value_numel() as f64);
        self.sum()?.scale(S::one() / n)
    }

    pub fn row_softmax(self) -> Result<Var<'t, S>> {
        self.unary("row_softmax", Op::RowSoftmax, softmax_rows)
    }

    pub fn relu(self) -> Result<Var<'t, S>> {
        self.unary("relu", Op::Relu, |a| Ok(a.map(|v| v.max(S::zero()))))
    }

    pub fn gelu(self) -> Result<Var<'t, S>> {
        self.unary("gelu", Op::Gelu, |a| Ok(a.map(gelu)))
    }

    pub(crate) fn gelu_deriv(self) -> Result<Var<'t, S>> {
        self.unary("gelu_deriv", Op::GeluDeriv, |a| Ok(a.map(gelu_deriv)))
    }

    pub fn exp(self) -> Result<Var<'t, S>> {
        self.unary("exp", Op::Exp, |a| Ok(a.map(S::exp)))
    }

    pub fn log(self) -> Result<Var<'t, S>> {
        self.unary("log", Op::Log, |a| Ok(a.map(S::ln)))
    }

    pub fn sqrt(self) -> Result<Var<'t, S>> {
        self.unary("sqrt", Op::Sqrt, |a| Ok(a.map(S::sqrt)))
    }

    pub fn square(self) -> Result<Var<'t, S>> {
        self.unary("square", Op::Square, |a| Ok(a.map(|v| v * v)))
    }

    pub fn recip(self) -> Result<Var<'t, S>> {
        self.unary("recip", Op::Recip, |a| Ok(a.map(S::recip)))
    }

    pub fn abs(self) -> Result<Var<'t, S>> {
        self.unary("abs", Op::Abs, |a| Ok(a.map(S::abs)))
    }

    fn value_numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        self.tape.nodes.borrow()[self.id].value.require_matrix(op)
    }

    // ---- composites -------------------------------------------------------

    /// Squared Frobenius norm.
    pub fn frobenius_sq(self) -> Result<Var<'t, S>> {
        self.square()?.sum()
    }

    pub fn l1_norm(self) -> Result<Var<'t, S>> {
        self.abs()?.sum()
    }

    /// Inner product of two equally shaped nodes.
    pub fn dot(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.mul(other)?.sum()
    }

    pub fn cosine_similarity(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let num = self.dot(other)?;
        let den = self.frobenius_sq()?.mul(other.frobenius_sq()?)?.sqrt()?;
        num.mul(den.recip()?)
    }

    /// Repeats an `m x 1` column across `n` columns.
    pub fn broadcast_cols(self, n: usize) -> Result<Var<'t, S>> {
        let ones = self.tape.constant(Tensor::ones(&[1, n]));
        self.matmul(ones)
    }

    /// Repeats a `1 x n` row across `m` rows.
    pub fn broadcast_rows(self, m: usize) -> Result<Var<'t, S>> {
        let ones = self.tape.constant(Tensor::ones(&[m, 1]));
        ones.matmul(self)
    }

    /// Mean of each row as an `m x 1` column.
    pub fn row_means(self) -> Result<Var<'t, S>> {
        let (_, n) = self.matrix_dims("row_means")?;
        let avg = self
            .tape
            .constant(Tensor::full(&[n, 1], S::one() / S::lit(n as f64)));
        self.matmul(avg)
    }

    /// Normalizes each row to zero mean and unit (population) variance.
    pub fn row_layernorm(self, eps: S) -> Result<Var<'t, S>> {
        let (m, n) = self.matrix_dims("row_layernorm")?;
        let centered = self.sub(self.row_means()?.broadcast_cols(n)?)?;
        let var = centered.square()?.row_means()?;
        let eps = self.tape.constant(Tensor::full(&[m, 1], eps));
        let inv_std = var.add(eps)?.sqrt()?.recip()?;
        centered.mul(inv_std.broadcast_cols(n)?)
    }
}

/// Stacks matrices vertically.
pub fn row_concat<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("row_concat", "no inputs"))?;
    let tape = first.tape;
    for p in parts {
        tape.check(*p)?;
    }
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let value = tape.with_values(&ids, |vals| Tensor::row_concat(vals))?;
    tape.push("row_concat", Op::RowConcat, ids, value)
}

/// `-log softmax(logits)[label]` for a `k x 1` logit column, evaluated through
/// log-sum-exp so large margins neither overflow nor underflow.
pub fn cross_entropy_softmax<'t, S: Scalar>(logits: Var<'t, S>, label: usize) -> Result<Var<'t, S>> {
    let value = logits.value();
    let k = value.numel();
    if label >= k {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let tape = logits.tape;
    let shape = value.shape().to_vec();
    let peak = value.data().iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let shifted = logits.sub(tape.constant(Tensor::full(&shape, peak)))?;
    let lse = shifted.exp()?.sum()?.log()?;
    let mut onehot = Tensor::zeros(&shape);
    onehot.data_mut()[label] = S::one();
    let picked = shifted.dot(tape.constant(onehot))?;
    lse.sub(picked)
}

impl<S: Scalar> Tape<S> {
    pub(crate) fn zeros_like(&self, id: NodeId) -> Var<'_, S> {
        let shape = self.nodes.borrow()[id].value.shape().to_vec();
        self.constant(Tensor::zeros(&shape))
    }
}
