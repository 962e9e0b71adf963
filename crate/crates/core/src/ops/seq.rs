//! Sequence primitives on `[N, L, C]` tensors.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Causal depthwise convolution along the sequence axis:
    /// `y[n, t, c] = b[c] + sum_j w[c, j] * x[n, t - (k - 1) + j, c]`,
    /// with zeros before the sequence start.
    pub fn depthwise_conv1d_causal(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || self.shape(bias) != [xs[2]] {
            return Err(dim_err!(
                "depthwise_conv1d_causal: input {xs:?}, weight {ws:?}, bias {:?} are incompatible",
                self.shape(bias)
            ));
        }
        let (n, len, ch, k) = (xs[0], xs[1], xs[2], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut data = vec![T::zero(); xv.len()];
        for_each_chunk_mut(&mut data, len * ch, |b, out| {
            let xb = &xv[b * len * ch..(b + 1) * len * ch];
            for t in 0..len {
                for c in 0..ch {
                    let mut acc = bv[c];
                    for j in 0..k {
                        if let Some(s) = (t + j).checked_sub(k - 1) {
                            acc += wv[c * k + j] * xb[s * ch + c];
                        }
                    }
                    out[t * ch + c] = acc;
                }
            }
        });
        let out = Tensor::from_parts(xs.clone(), data);
        Ok(self.op(
            out,
            &[x, weight, bias],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xv = ctx.inputs[0].data();
                let wv = ctx.inputs[1].data();
                let mut gx = ctx.needs[0].then(|| vec![T::zero(); g.len()]);
                let mut gw = vec![T::zero(); ch * k];
                let mut gb = vec![T::zero(); ch];
                for b in 0..n {
                    for t in 0..len {
                        for c in 0..ch {
                            let gv = g[(b * len + t) * ch + c];
                            gb[c] += gv;
                            for j in 0..k {
                                if let Some(s) = (t + j).checked_sub(k - 1) {
                                    let xi = (b * len + s) * ch + c;
                                    gw[c * k + j] += gv * xv[xi];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] += gv * wv[c * k + j];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    gx.map(|d| Tensor::from_parts(xs.clone(), d)),
                    ctx.needs[1].then(|| Tensor::from_parts(vec![ch, k], gw)),
                    ctx.needs[2].then(|| Tensor::from_parts(vec![ch], gb)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_window() {
        let mut g = Graph::<f64>::new();
        // one channel, sequence 1..=4, kernel [1, 10]: y_t = 10 x_t + x_{t-1}
        let x = g.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 2], vec![1.0, 10.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.depthwise_conv1d_causal(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 21.0, 32.0, 43.0]);
    }
}
