//! Instance normalization (per sample and channel, over space) and channel
//! normalization (per position, over the last axis).

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::parallel::{for_each_chunk_mut, map_range};
use crate::tensor::{ncs, Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Mean and `1 / sqrt(var + eps)` of one group (biased variance).
fn moments<T: Scalar>(x: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Input gradient of one standardized group given `g_hat = d loss / d xhat`.
fn standardize_backward<T: Scalar>(g_hat: &[T], xhat: &[T], inv: T, gx: &mut [T]) {
    let n = T::from_f64(g_hat.len() as f64);
    let mean_g = g_hat.iter().copied().sum::<T>() / n;
    let mean_gx = g_hat.iter().zip(xhat).map(|(&g, &h)| g * h).sum::<T>() / n;
    for ((o, &g), &h) in gx.iter_mut().zip(g_hat).zip(xhat) {
        *o = inv * (g - mean_g - h * mean_gx);
    }
}

impl<T: Scalar> Graph<T> {
    /// `gamma * (x - mean) / sqrt(var + eps) + beta` per `(n, c)` slice of
    /// `[N, C, spatial...]`.
    ///
    /// A single-voxel slice normalizes to zero, so its output is `beta`.
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 3 {
            return Err(dim_err!("instance_norm expects [N, C, spatial...], got {shape:?}"));
        }
        let (n, ch, sp) = ncs(&shape);
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(dim_err!("instance_norm: affine parameter shape {:?}, expected [{ch}]", self.shape(p)));
            }
        }
        let eps = T::from_f64(eps);
        let x = self.value(input).data();
        let stats = map_range(n * ch, |s| moments(&x[s * sp..(s + 1) * sp], eps));
        let mut xhat = vec![T::zero(); x.len()];
        for_each_chunk_mut(&mut xhat, sp, |s, h| {
            let (mean, inv) = stats[s];
            for (o, &v) in h.iter_mut().zip(&x[s * sp..(s + 1) * sp]) {
                *o = (v - mean) * inv;
            }
        });
        let inv: Vec<T> = stats.iter().map(|s| s.1).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = xhat.clone();
        for (s, chunk) in data.chunks_mut(sp).enumerate() {
            let c = s % ch;
            chunk.iter_mut().for_each(|v| *v = gm[c] * *v + bt[c]);
        }
        let out = Tensor::from_parts(shape.clone(), data);
        Ok(self.op(
            out,
            &[input, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gm = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for_each_chunk_mut(&mut gx, sp, |s, o| {
                        let c = s % ch;
                        let g_hat: Vec<T> = g[s * sp..(s + 1) * sp].iter().map(|&v| v * gm[c]).collect();
                        standardize_backward(&g_hat, &xhat[s * sp..(s + 1) * sp], inv[s], o);
                    });
                    Tensor::from_parts(shape.clone(), gx)
                });
                let mut ggamma = vec![T::zero(); ch];
                let mut gbeta = vec![T::zero(); ch];
                for s in 0..n * ch {
                    let c = s % ch;
                    for i in s * sp..(s + 1) * sp {
                        ggamma[c] += g[i] * xhat[i];
                        gbeta[c] += g[i];
                    }
                }
                vec![
                    gx,
                    ctx.needs[1].then(|| Tensor::from_parts(vec![ch], ggamma)),
                    ctx.needs[2].then(|| Tensor::from_parts(vec![ch], gbeta)),
                ]
            }),
        ))
    }

    /// Normalizes over the last axis at every position: `[..., C]`.
    pub fn channel_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let ch = *shape.last().ok_or_else(|| dim_err!("channel_norm on rank-0 tensor"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(dim_err!("channel_norm: affine parameter shape {:?}, expected [{ch}]", self.shape(p)));
            }
        }
        let eps = T::from_f64(eps);
        let x = self.value(input).data();
        let rows = x.len() / ch;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv = vec![T::zero(); rows];
        for r in 0..rows {
            let xs = &x[r * ch..(r + 1) * ch];
            let (mean, scale) = moments(xs, eps);
            inv[r] = scale;
            for (o, &v) in xhat[r * ch..(r + 1) * ch].iter_mut().zip(xs) {
                *o = (v - mean) * scale;
            }
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat.iter().enumerate().map(|(i, &h)| gm[i % ch] * h + bt[i % ch]).collect();
        let out = Tensor::from_parts(shape.clone(), data);
        Ok(self.op(
            out,
            &[input, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gm = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    let mut g_hat = vec![T::zero(); ch];
                    for r in 0..rows {
                        for c in 0..ch {
                            g_hat[c] = g[r * ch + c] * gm[c];
                        }
                        standardize_backward(
                            &g_hat,
                            &xhat[r * ch..(r + 1) * ch],
                            inv[r],
                            &mut gx[r * ch..(r + 1) * ch],
                        );
                    }
                    Tensor::from_parts(shape.clone(), gx)
                });
                let mut ggamma = vec![T::zero(); ch];
                let mut gbeta = vec![T::zero(); ch];
                for (i, (&gv, &h)) in g.iter().zip(&xhat).enumerate() {
                    ggamma[i % ch] += gv * h;
                    gbeta[i % ch] += gv;
                }
                vec![
                    gx,
                    ctx.needs[1].then(|| Tensor::from_parts(vec![ch], ggamma)),
                    ctx.needs[2].then(|| Tensor::from_parts(vec![ch], gbeta)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm_of(values: &[f64], gamma: f64, beta: f64, eps: f64) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, values.len()], values.to_vec()).unwrap());
        let gm = g.constant(Tensor::full(vec![1], gamma));
        let bt = g.constant(Tensor::full(vec![1], beta));
        let y = g.instance_norm(x, gm, bt, eps).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn constant_slice_normalizes_to_zero() {
        assert!(norm_of(&[3.0; 8], 1.0, 0.0, DEFAULT_EPS).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_slice() {
        let out = norm_of(&[1.0, 3.0], 1.0, 0.0, 1e-300);
        assert_eq!(out, vec![-1.0, 1.0]);
    }

    #[test]
    fn affine_collapse() {
        assert!(norm_of(&[0.3, -2.0, 5.0], 0.0, 7.0, DEFAULT_EPS).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn per_slice_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 2, 2, 2], |i| ((i * 7) % 11) as f64));
        let gm = g.constant(Tensor::ones(vec![3]));
        let bt = g.constant(Tensor::zeros(vec![3]));
        let y = g.instance_norm(x, gm, bt, 0.0).unwrap();
        for s in g.value(y).data().chunks(8) {
            let mean: f64 = s.iter().sum::<f64>() / 8.0;
            let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_norm_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 3.0, 10.0, 10.0]).unwrap());
        let gm = g.constant(Tensor::ones(vec![2]));
        let bt = g.constant(Tensor::zeros(vec![2]));
        let y = g.channel_norm(x, gm, bt, 1e-300).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0, 0.0, 0.0]);
    }
}
