//! Dense projection over the last axis.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// `x[..., in] -> x W^T + b` with `weight[out, in]` and `bias[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let fan_in = *xs.last().ok_or_else(|| dim_err!("linear on rank-0 input"))?;
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(dim_err!("linear: weight {ws:?} does not accept inputs {xs:?}"));
        }
        let fan_out = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return Err(dim_err!("linear: bias shape {:?}, expected [{fan_out}]", self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut data = vec![T::zero(); rows * fan_out];
        gemm(
            T::one(),
            MatRef::row_major(self.value(x).data(), rows, fan_in),
            MatRef::row_major_t(self.value(weight).data(), fan_out, fan_in),
            T::zero(),
            MatMut::row_major(&mut data, rows, fan_out),
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in data.chunks_mut(fan_out) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = fan_out;
        let out = Tensor::from_parts(out_shape, data);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.op(
            out,
            &inputs,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gm = MatRef::row_major(g, rows, fan_out);
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * fan_in];
                    gemm(
                        T::one(),
                        gm,
                        MatRef::row_major(ctx.inputs[1].data(), fan_out, fan_in),
                        T::zero(),
                        MatMut::row_major(&mut d, rows, fan_in),
                    );
                    Tensor::from_parts(xs.clone(), d)
                });
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); fan_out * fan_in];
                    gemm(
                        T::one(),
                        MatRef::row_major_t(g, rows, fan_out),
                        MatRef::row_major(ctx.inputs[0].data(), rows, fan_in),
                        T::zero(),
                        MatMut::row_major(&mut d, fan_out, fan_in),
                    );
                    Tensor::from_parts(vec![fan_out, fan_in], d)
                });
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let mut d = vec![T::zero(); fan_out];
                        for row in g.chunks(fan_out) {
                            d.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                        }
                        Tensor::from_parts(vec![fan_out], d)
                    }));
                }
                grads
            }),
        ))
    }
}
