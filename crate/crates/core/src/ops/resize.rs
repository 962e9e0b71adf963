//! Trilinear resampling with the half-pixel (align-corners = false) convention.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{Scalar, Tensor};

/// Per-output-index source taps along one axis: `(i0, i1, w1)` with
/// value = `(1 - w1) * v[i0] + w1 * v[i1]`.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|t| {
            let s = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

struct Taps<T> {
    z: Vec<(usize, usize, T)>,
    y: Vec<(usize, usize, T)>,
    x: Vec<(usize, usize, T)>,
}

impl<T: Scalar> Taps<T> {
    fn new(src: [usize; 3], dst: [usize; 3]) -> Self {
        let conv = |v: Vec<(usize, usize, f64)>| v.into_iter().map(|(a, b, w)| (a, b, T::from_f64(w))).collect();
        Self {
            z: conv(axis_taps(src[0], dst[0])),
            y: conv(axis_taps(src[1], dst[1])),
            x: conv(axis_taps(src[2], dst[2])),
        }
    }

    /// Calls `f(dst_index, src_index, weight)` for all eight corner taps of every output voxel.
    #[inline]
    fn for_each(&self, src: [usize; 3], mut f: impl FnMut(usize, usize, T)) {
        let one = T::one();
        let (sh, sw) = (src[1], src[2]);
        let (oh, ow) = (self.y.len(), self.x.len());
        for (oz, &(z0, z1, wz)) in self.z.iter().enumerate() {
            for (oy, &(y0, y1, wy)) in self.y.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in self.x.iter().enumerate() {
                    let o = (oz * oh + oy) * ow + ox;
                    for (zi, zw) in [(z0, one - wz), (z1, wz)] {
                        for (yi, yw) in [(y0, one - wy), (y1, wy)] {
                            for (xi, xw) in [(x0, one - wx), (x1, wx)] {
                                f(o, (zi * sh + yi) * sw + xi, zw * yw * xw);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Resamples every `[D, H, W]` slice of `data` (`slices` of them) to `dst`.
pub fn trilinear_resize_raw<T: Scalar>(data: &[T], slices: usize, src: [usize; 3], dst: [usize; 3]) -> Vec<T> {
    let (sv, dv) = (src.iter().product::<usize>(), dst.iter().product::<usize>());
    debug_assert_eq!(data.len(), slices * sv);
    if src == dst {
        return data.to_vec();
    }
    let taps = Taps::<T>::new(src, dst);
    let mut out = vec![T::zero(); slices * dv];
    for_each_chunk_mut(&mut out, dv, |s, o| {
        let input = &data[s * sv..(s + 1) * sv];
        taps.for_each(src, |di, si, w| o[di] += w * input[si]);
    });
    out
}

fn trilinear_resize_backward<T: Scalar>(grad: &[T], slices: usize, src: [usize; 3], dst: [usize; 3]) -> Vec<T> {
    let (sv, dv) = (src.iter().product::<usize>(), dst.iter().product::<usize>());
    if src == dst {
        return grad.to_vec();
    }
    let taps = Taps::<T>::new(src, dst);
    let mut out = vec![T::zero(); slices * sv];
    for_each_chunk_mut(&mut out, sv, |s, gi| {
        let g = &grad[s * dv..(s + 1) * dv];
        taps.for_each(src, |di, si, w| gi[si] += w * g[di]);
    });
    out
}

impl<T: Scalar> Graph<T> {
    /// Resizes `[N, C, D, H, W]` to `[N, C, D2, H2, W2]`.
    pub fn trilinear_resize(&mut self, input: Var, target: [usize; 3]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 5 {
            return Err(dim_err!("trilinear_resize expects [N, C, D, H, W], got {shape:?}"));
        }
        if target.contains(&0) {
            return Err(dim_err!("trilinear_resize: target extents must be >= 1, got {target:?}"));
        }
        let src = [shape[2], shape[3], shape[4]];
        let slices = shape[0] * shape[1];
        let data = trilinear_resize_raw(self.value(input).data(), slices, src, target);
        let out = Tensor::from_parts(vec![shape[0], shape[1], target[0], target[1], target[2]], data);
        Ok(self.op(
            out,
            &[input],
            Box::new(move |ctx| {
                let g = trilinear_resize_backward(ctx.grad.data(), slices, src, target);
                vec![Some(Tensor::from_parts(shape.clone(), g))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.3).collect();
        assert_eq!(trilinear_resize_raw(&data, 1, [2, 3, 4], [2, 3, 4]), data);
    }

    #[test]
    fn constant_preserved() {
        let data = vec![2.5f64; 2 * 27];
        let out = trilinear_resize_raw(&data, 2, [3, 3, 3], [5, 2, 7]);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn half_pixel_upsample_of_two_samples() {
        // Source positions 0 and 1 hold 0 and 1. Output t maps to
        // s = (t + 0.5) * 0.5 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1].
        let out = trilinear_resize_raw(&[0.0f64, 1.0], 1, [1, 1, 2], [1, 1, 4]);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        // s = (t + 0.5) * 2 - 0.5 = 0.5 and 2.5
        let out = trilinear_resize_raw(&[1.0f64, 3.0, 5.0, 9.0], 1, [1, 1, 4], [1, 1, 2]);
        assert_eq!(out, vec![2.0, 7.0]);
    }

    #[test]
    fn rejects_zero_target() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 2, 2, 2]));
        assert!(g.trilinear_resize(x, [0, 2, 2]).is_err());
    }
}
