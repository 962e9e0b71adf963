//! Elementwise arithmetic, reductions and layout primitives.

use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ncs, Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.op(out, &[a, b], Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.op(out, &[a, b], Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-T::one()))])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.op(
            out,
            &[a, b],
            Box::new(|ctx| {
                let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y));
                let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x));
                vec![ga, gb]
            }),
        ))
    }

    /// `s * a` for a constant `s`.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).scale(s);
        self.op(out, &[a], Box::new(move |ctx| vec![Some(ctx.grad.scale(s))]))
    }

    /// `a + s` for a constant `s`.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|v| v + s);
        self.op(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        self.op(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y))]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.op(
            out,
            &[a],
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.op(
            out,
            &[a],
            Box::new(|ctx| {
                let g = Tensor::from_parts(ctx.inputs[0].shape().to_vec(), ctx.grad.data().to_vec());
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates `[N, C_i, ...]` tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(dim_err!("concat_channels needs rank >= 2, got {first:?}"));
        }
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(dim_err!("concat_channels: {s:?} incompatible with {first:?}"));
            }
            channels.push(s[1]);
        }
        let (n, _, sp) = ncs(&first);
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * total * sp);
        for b in 0..n {
            for (&p, &ch) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * ch * sp..(b + 1) * ch * sp]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.op(
            out,
            parts,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(channels.len());
                for (i, &ch) in channels.iter().enumerate() {
                    if !ctx.needs[i] {
                        grads.push(None);
                        offset += ch;
                        continue;
                    }
                    let mut d = Vec::with_capacity(n * ch * sp);
                    for b in 0..n {
                        let start = (b * total + offset) * sp;
                        d.extend_from_slice(&g[start..start + ch * sp]);
                    }
                    grads.push(Some(Tensor::from_parts(ctx.inputs[i].shape().to_vec(), d)));
                    offset += ch;
                }
                grads
            }),
        ))
    }

    /// `gate[N, 1, S...] * x[N, C, S...]`, broadcasting the gate over channels.
    pub fn mul_channel_broadcast(&mut self, gate: Var, x: Var) -> Result<Var> {
        let gs = self.shape(gate).to_vec();
        let xs = self.shape(x).to_vec();
        if gs.len() != xs.len() || gs.len() < 2 || gs[1] != 1 || gs[0] != xs[0] || gs[2..] != xs[2..] {
            return Err(dim_err!("mul_channel_broadcast: gate {gs:?} does not broadcast over {xs:?}"));
        }
        let (n, ch, sp) = ncs(&xs);
        let gv = self.value(gate).data();
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        for b in 0..n {
            for c in 0..ch {
                let base = (b * ch + c) * sp;
                for s in 0..sp {
                    data[base + s] = gv[b * sp + s] * xv[base + s];
                }
            }
        }
        let out = Tensor::from_parts(xs, data);
        Ok(self.op(
            out,
            &[gate, x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gv = ctx.inputs[0].data();
                let xv = ctx.inputs[1].data();
                let ggate = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); n * sp];
                    for b in 0..n {
                        for c in 0..ch {
                            let base = (b * ch + c) * sp;
                            for s in 0..sp {
                                d[b * sp + s] += g[base + s] * xv[base + s];
                            }
                        }
                    }
                    Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)
                });
                let gx = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for c in 0..ch {
                            let base = (b * ch + c) * sp;
                            for s in 0..sp {
                                d[base + s] = g[base + s] * gv[b * sp + s];
                            }
                        }
                    }
                    Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)
                });
                vec![ggate, gx]
            }),
        ))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or_else(|| dim_err!("slice_last on rank-0 tensor"))?;
        if len == 0 || start + len > last {
            return Err(dim_err!("slice_last [{start}, {}) out of range for extent {last}", start + len));
        }
        let rows = self.value(a).numel() / last;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * last + start..r * last + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.op(
            out,
            &[a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); rows * last];
                for r in 0..rows {
                    d[r * last + start..r * last + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// `out[i] = a[index[i]]` with `out` of the given shape.
    ///
    /// Covers permutations, flips and flattening orders. Backward scatters
    /// with accumulation, so non-injective index maps are also handled.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(dim_err!("gather: shape {shape:?} does not hold {} indices", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(dim_err!("gather: index {bad} out of range for {} elements", src.len()));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.op(
            out,
            &[a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); ctx.inputs[0].numel()];
                for (o, &i) in index.iter().enumerate() {
                    d[i] += g[o];
                }
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
            }),
        ))
    }

    /// Mean over all spatial axes: `[N, C, S...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 3 {
            return Err(dim_err!("global_avg_pool needs [N, C, spatial...], got {shape:?}"));
        }
        let (n, ch, sp) = ncs(&shape);
        let inv = T::one() / T::from_f64(sp as f64);
        let src = self.value(a).data();
        let data = (0..n * ch).map(|i| src[i * sp..(i + 1) * sp].iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_parts(vec![n, ch], data);
        Ok(self.op(
            out,
            &[a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); n * ch * sp];
                for (i, chunk) in d.chunks_mut(sp).enumerate() {
                    chunk.fill(g[i] * inv);
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }
}
