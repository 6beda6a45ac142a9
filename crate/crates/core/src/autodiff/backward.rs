use super::ops::{gelu_second, row_concat};
use super::{NodeId, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Tape<S> {
    /// Gradients of the scalar `output` with respect to each of `wrt`, as plain
    /// tensors. Nothing is left on the tape afterwards.
    pub fn grad(&self, output: Var<'_, S>, wrt: &[Var<'_, S>]) -> Result<Vec<Tensor<S>>> {
        let mark = self.len();
        let result = self.backward_ids(output, wrt).map(|ids| {
            let nodes = self.nodes.borrow();
            ids.iter().map(|&i| nodes[i].value.clone()).collect()
        });
        self.truncate(mark);
        result
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`, recorded
    /// on the tape so they can be differentiated again.
    pub fn grad_graph<'t>(&'t self, output: Var<'t, S>, wrt: &[Var<'t, S>]) -> Result<Vec<Var<'t, S>>> {
        let ids = self.backward_ids(output, wrt)?;
        Ok(ids.into_iter().map(|id| Var { tape: self, id }).collect())
    }

    fn backward_ids(&self, output: Var<'_, S>, wrt: &[Var<'_, S>]) -> Result<Vec<NodeId>> {
        self.check(output)?;
        for w in wrt {
            self.check(*w)?;
        }
        let out_shape = output.shape();
        if output.value().numel() != 1 {
            return Err(Error::NotScalar(out_shape));
        }

        let n = output.id + 1;
        let mut needs = vec![false; n];
        for w in wrt {
            if w.id < n {
                needs[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !needs[i] && nodes[i].inputs.iter().any(|&j| needs[j]) {
                    needs[i] = true;
                }
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        if needs[output.id] {
            adjoint[output.id] = Some(self.constant(Tensor::ones(&out_shape)).id);
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !needs[i] {
                continue;
            }
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].inputs.clone())
            };
            if inputs.is_empty() {
                continue;
            }
            let wanted: Vec<bool> = inputs.iter().map(|&j| needs[j]).collect();
            let g = Var { tape: self, id: g };
            let contribs = self.vjp(&op, i, &inputs, &wanted, g)?;
            for ((&j, want), c) in inputs.iter().zip(&wanted).zip(contribs) {
                let (true, Some(c)) = (*want, c) else { continue };
                adjoint[j] = Some(match adjoint[j] {
                    None => c.id,
                    Some(prev) => Var { tape: self, id: prev }.add(c)?.id,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(id) => id,
                None => self.zeros_like(w.id).id,
            })
            .collect())
    }

    /// Vector-Jacobian products of node `id` for each input flagged in `wanted`.
    fn vjp<'t>(
        &'t self,
        op: &Op<S>,
        id: NodeId,
        inputs: &[NodeId],
        wanted: &[bool],
        g: Var<'t, S>,
    ) -> Result<Vec<Option<Var<'t, S>>>> {
        let var = |i: NodeId| Var { tape: self, id: i };
        let input_shape = |k: usize| self.nodes.borrow()[inputs[k]].value.shape().to_vec();
        let out = var(id);
        let x = var(inputs[0]);
        let want = |k: usize| wanted.get(k).copied().unwrap_or(false);

        let single = |v: Result<Var<'t, S>>| -> Result<Vec<Option<Var<'t, S>>>> { Ok(vec![Some(v?)]) };

        match op {
            Op::Leaf | Op::Constant => Ok(Vec::new()),
            Op::Add => Ok(vec![Some(g), Some(g)]),
            Op::Sub => Ok(vec![Some(g), if want(1) { Some(g.neg()?) } else { None }]),
            Op::Mul => {
                let b = var(inputs[1]);
                Ok(vec![
                    if want(0) { Some(g.mul(b)?) } else { None },
                    if want(1) { Some(g.mul(x)?) } else { None },
                ])
            }
            Op::Scale(c) => single(g.scale(*c)),
            Op::ScaleBy => {
                let s = var(inputs[1]);
                let ds = if want(1) {
                    Some(g.dot(x)?.reshape(&input_shape(1))?)
                } else {
                    None
                };
                Ok(vec![if want(0) { Some(g.scale_by(s)?) } else { None }, ds])
            }
            Op::MatMul => {
                let b = var(inputs[1]);
                Ok(vec![
                    if want(0) { Some(g.matmul(b.t()?)?) } else { None },
                    if want(1) { Some(x.t()?.matmul(g)?) } else { None },
                ])
            }
            Op::Transpose => single(g.t()),
            Op::Reshape => single(g.reshape(&input_shape(0))),
            Op::RowConcat => {
                let mut start = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for k in 0..inputs.len() {
                    let rows = input_shape(k)[0];
                    res.push(if want(k) {
                        Some(g.row_slice(start, start + rows)?)
                    } else {
                        None
                    });
                    start += rows;
                }
                Ok(res)
            }
            Op::RowSlice { start, end } => {
                let shape = input_shape(0);
                let (rows, cols) = (shape[0], shape[1]);
                let mut parts = Vec::with_capacity(3);
                if *start > 0 {
                    parts.push(self.constant(Tensor::zeros(&[*start, cols])));
                }
                parts.push(g);
                if *end < rows {
                    parts.push(self.constant(Tensor::zeros(&[rows - end, cols])));
                }
                single(row_concat(&parts))
            }
            Op::Sum => {
                let ones = self.constant(Tensor::ones(&input_shape(0)));
                single(ones.scale_by(g))
            }
            Op::RowSoftmax => {
                // dx = y * (g - rowsum(g * y))
                let cols = input_shape(0)[1];
                let ones = self.constant(Tensor::ones(&[cols, 1]));
                let s = g.mul(out)?.matmul(ones)?.broadcast_cols(cols)?;
                single(out.mul(g.sub(s)?))
            }
            Op::Relu => {
                let mask = x.value().map(|v| if v > S::zero() { S::one() } else { S::zero() });
                single(g.mul(self.constant(mask)))
            }
            Op::Gelu => single(g.mul(x.gelu_deriv()?)),
            Op::GeluDeriv => {
                // Exact through second order, which is all the attacks need.
                let second = x.value().map(gelu_second);
                single(g.mul(self.constant(second)))
            }
            Op::Exp => single(g.mul(out)),
            Op::Log => single(g.mul(x.recip()?)),
            Op::Sqrt => single(g.mul(out.recip()?.scale(S::lit(0.5))?)),
            Op::Square => single(g.mul(x.scale(S::lit(2.0))?)),
            Op::Recip => single(g.mul(out.square()?)?.neg()),
            Op::Abs => {
                let sign = x.value().map(|v| {
                    if v > S::zero() {
                        S::one()
                    } else if v < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                });
                single(g.mul(self.constant(sign)))
            }
        }
    }
}
