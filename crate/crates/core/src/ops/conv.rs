//! 3D convolution, NCDHW layout.
//!
//! Two kernels compute the same map: a direct loop nest (any kernel size)
//! and an im2col + GEMM path used for kernels up to 3 on every axis.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::parallel::{for_each_chunk_mut, map_range};
use crate::tensor::{Scalar, Tensor};

/// Columns per GEMM block. Fixed so results do not depend on thread count.
const COL_BLOCK: usize = 4096;

/// Resolved extents of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 {
            return Err(dim_err!("conv3d expects rank-5 input and weight, got {input:?} and {weight:?}"));
        }
        if input[1] != weight[1] {
            return Err(dim_err!("conv3d: input has {} channels but weight expects {}", input[1], weight[1]));
        }
        if stride == 0 {
            return Err(dim_err!("conv3d: stride must be >= 1"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let (len, k) = (input[2 + a] + 2 * padding, weight[2 + a]);
            if k == 0 || len < k {
                return Err(dim_err!("conv3d: padded extent {len} smaller than kernel {k} on spatial axis {a}"));
            }
            output[a] = (len - k) / stride + 1;
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[0],
            input: [input[2], input[3], input[4]],
            kernel: [weight[2], weight[3], weight[4]],
            output,
            stride,
            padding,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// True when im2col is the identity (pointwise, unstrided, unpadded).
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.padding == 0
    }

    /// Whether the GEMM path applies.
    pub fn uses_im2col(&self) -> bool {
        self.kernel.iter().all(|&k| k <= 3)
    }

    /// Input coordinate for output coordinate `o` and kernel tap `k` on axis `a`.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < self.input[a]).then_some(i as usize)
    }
}

// ---------------------------------------------------------------------------
// Direct loops

/// Direct forward convolution. Returns the flat output.
pub fn conv3d_direct<T: Scalar>(geo: &Conv3dGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cin, cout) = (geo.in_channels, geo.out_channels);
    let (iv, ov, kv) = (geo.in_volume(), geo.out_volume(), geo.kernel_volume());
    let [_, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let [kd, kh, kw] = geo.kernel;
    let mut out = vec![T::zero(); geo.batch * cout * ov];
    for_each_chunk_mut(&mut out, ov, |slice, o| {
        let (n, co) = (slice / cout, slice % cout);
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        for ci in 0..cin {
            let xs = &x[(n * cin + ci) * iv..(n * cin + ci + 1) * iv];
            let ws = &w[(co * cin + ci) * kv..(co * cin + ci + 1) * kv];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = ws[(kz * kh + ky) * kw + kx];
                        for oz in 0..od {
                            let Some(iz) = geo.source(0, oz, kz) else { continue };
                            for oy in 0..oh {
                                let Some(iy) = geo.source(1, oy, ky) else { continue };
                                let row = (iz * ih + iy) * iw;
                                let orow = (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    if let Some(ix) = geo.source(2, ox, kx) {
                                        o[orow + ox] += wv * xs[row + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Direct backward. Returns gradients for input and weight when requested.
pub fn conv3d_backward_direct<T: Scalar>(
    geo: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (cin, cout) = (geo.in_channels, geo.out_channels);
    let (iv, ov, kv) = (geo.in_volume(), geo.out_volume(), geo.kernel_volume());
    let [_, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let [kd, kh, kw] = geo.kernel;

    // Visits every (kernel tap, output voxel, input voxel) triple of one
    // (input channel, output channel) pair.
    let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = (kz * kh + ky) * kw + kx;
                    for oz in 0..od {
                        let Some(iz) = geo.source(0, oz, kz) else { continue };
                        for oy in 0..oh {
                            let Some(iy) = geo.source(1, oy, ky) else { continue };
                            for ox in 0..ow {
                                if let Some(ix) = geo.source(2, ox, kx) {
                                    f(k, (oz * oh + oy) * ow + ox, (iz * ih + iy) * iw + ix);
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    let gx = need_input.then(|| {
        let mut gx = vec![T::zero(); geo.batch * cin * iv];
        for_each_chunk_mut(&mut gx, iv, |slice, gxs| {
            let (n, ci) = (slice / cin, slice % cin);
            for co in 0..cout {
                let ws = &w[(co * cin + ci) * kv..(co * cin + ci + 1) * kv];
                let gs = &gout[(n * cout + co) * ov..(n * cout + co + 1) * ov];
                visit(&mut |k, o, i| gxs[i] += ws[k] * gs[o]);
            }
        });
        gx
    });

    let gw = need_weight.then(|| {
        let mut gw = vec![T::zero(); cout * cin * kv];
        for_each_chunk_mut(&mut gw, cin * kv, |co, gws| {
            for n in 0..geo.batch {
                let gs = &gout[(n * cout + co) * ov..(n * cout + co + 1) * ov];
                for ci in 0..cin {
                    let xs = &x[(n * cin + ci) * iv..(n * cin + ci + 1) * iv];
                    let gwk = &mut gws[ci * kv..(ci + 1) * kv];
                    visit(&mut |k, o, i| gwk[k] += gs[o] * xs[i]);
                }
            }
        });
        gw
    });

    (gx, gw)
}

// ---------------------------------------------------------------------------
// im2col + GEMM

/// Unfolds one sample `[Cin, D, H, W]` into `[Cin * K, P]` columns.
fn im2col<T: Scalar>(geo: &Conv3dGeometry, xs: &[T]) -> Vec<T> {
    let (iv, ov, kv) = (geo.in_volume(), geo.out_volume(), geo.kernel_volume());
    let [_, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let [_, kh, kw] = geo.kernel;
    let mut cols = vec![T::zero(); geo.in_channels * kv * ov];
    for_each_chunk_mut(&mut cols, ov, |row, dst| {
        let (ci, k) = (row / kv, row % kv);
        let (kz, ky, kx) = (k / (kh * kw), (k / kw) % kh, k % kw);
        let src = &xs[ci * iv..(ci + 1) * iv];
        for oz in 0..od {
            let Some(iz) = geo.source(0, oz, kz) else { continue };
            for oy in 0..oh {
                let Some(iy) = geo.source(1, oy, ky) else { continue };
                let base = (iz * ih + iy) * iw;
                let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                for (ox, d) in drow.iter_mut().enumerate() {
                    if let Some(ix) = geo.source(2, ox, kx) {
                        *d = src[base + ix];
                    }
                }
            }
        }
    });
    cols
}

/// Folds `[Cin * K, P]` column gradients back onto `[Cin, D, H, W]`.
fn col2im<T: Scalar>(geo: &Conv3dGeometry, cols: &[T], gx: &mut [T]) {
    let (iv, ov, kv) = (geo.in_volume(), geo.out_volume(), geo.kernel_volume());
    let [_, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let [_, kh, kw] = geo.kernel;
    for_each_chunk_mut(gx, iv, |ci, dst| {
        for k in 0..kv {
            let (kz, ky, kx) = (k / (kh * kw), (k / kw) % kh, k % kw);
            let src = &cols[(ci * kv + k) * ov..(ci * kv + k + 1) * ov];
            for oz in 0..od {
                let Some(iz) = geo.source(0, oz, kz) else { continue };
                for oy in 0..oh {
                    let Some(iy) = geo.source(1, oy, ky) else { continue };
                    let base = (iz * ih + iy) * iw;
                    let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                    for (ox, &g) in srow.iter().enumerate() {
                        if let Some(ix) = geo.source(2, ox, kx) {
                            dst[base + ix] += g;
                        }
                    }
                }
            }
        }
    });
}

fn col_blocks(p: usize) -> usize {
    p.div_ceil(COL_BLOCK)
}

/// `a[m, k] * b[k, p]`, computed in fixed column blocks, written row-major into `out[m, p]`.
fn blocked_product<T: Scalar>(a: MatRef<T>, b: MatRef<T>, out: &mut [T]) {
    let (m, p) = (a.rows, b.cols);
    let blocks = map_range(col_blocks(p), |blk| {
        let c0 = blk * COL_BLOCK;
        let width = COL_BLOCK.min(p - c0);
        let mut buf = vec![T::zero(); m * width];
        gemm(T::one(), a, b.cols(c0, width), T::zero(), MatMut::row_major(&mut buf, m, width));
        buf
    });
    for (blk, buf) in blocks.iter().enumerate() {
        let c0 = blk * COL_BLOCK;
        let width = COL_BLOCK.min(p - c0);
        for r in 0..m {
            out[r * p + c0..r * p + c0 + width].copy_from_slice(&buf[r * width..(r + 1) * width]);
        }
    }
}

/// GEMM forward convolution.
pub fn conv3d_im2col<T: Scalar>(geo: &Conv3dGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cin, cout) = (geo.in_channels, geo.out_channels);
    let (iv, ov, kv) = (geo.in_volume(), geo.out_volume(), geo.kernel_volume());
    let mut out = vec![T::zero(); geo.batch * cout * ov];
    let wm = MatRef::row_major(w, cout, cin * kv);
    for n in 0..geo.batch {
        let xs = &x[n * cin * iv..(n + 1) * cin * iv];
        let owned;
        let cols: &[T] = if geo.is_pointwise() {
            xs
        } else {
            owned = im2col(geo, xs);
            &owned
        };
        let os = &mut out[n * cout * ov..(n + 1) * cout * ov];
        blocked_product(wm, MatRef::row_major(cols, cin * kv, ov), os);
        if let Some(b) = bias {
            for (co, row) in os.chunks_mut(ov).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

/// GEMM backward. Returns gradients for input and weight when requested.
pub fn conv3d_backward_im2col<T: Scalar>(
    geo: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (cin, cout) = (geo.in_channels, geo.out_channels);
    let (iv, ov, kv) = (geo.in_volume(), geo.out_volume(), geo.kernel_volume());
    let rows = cin * kv;
    let mut gx = need_input.then(|| vec![T::zero(); geo.batch * cin * iv]);
    let mut gw = need_weight.then(|| vec![T::zero(); cout * rows]);

    for n in 0..geo.batch {
        let gs = &gout[n * cout * ov..(n + 1) * cout * ov];
        let gm = MatRef::row_major(gs, cout, ov);

        if let Some(gw) = gw.as_mut() {
            let xs = &x[n * cin * iv..(n + 1) * cin * iv];
            let owned;
            let cols: &[T] = if geo.is_pointwise() {
                xs
            } else {
                owned = im2col(geo, xs);
                &owned
            };
            // gw += gout * cols^T, reduced over fixed column blocks in order.
            let partials = map_range(col_blocks(ov), |blk| {
                let c0 = blk * COL_BLOCK;
                let width = COL_BLOCK.min(ov - c0);
                let mut buf = vec![T::zero(); cout * rows];
                gemm(
                    T::one(),
                    gm.cols(c0, width),
                    MatRef::row_major_t(cols, rows, ov).rows(c0, width),
                    T::zero(),
                    MatMut::row_major(&mut buf, cout, rows),
                );
                buf
            });
            for part in partials {
                for (a, b) in gw.iter_mut().zip(part) {
                    *a += b;
                }
            }
        }

        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx[n * cin * iv..(n + 1) * cin * iv];
            let wt = MatRef::row_major_t(w, cout, rows);
            if geo.is_pointwise() {
                blocked_product(wt, gm, gxs);
            } else {
                let mut gcols = vec![T::zero(); rows * ov];
                blocked_product(wt, gm, &mut gcols);
                col2im(geo, &gcols, gxs);
            }
        }
    }
    (gx, gw)
}

fn bias_grad<T: Scalar>(geo: &Conv3dGeometry, gout: &[T]) -> Vec<T> {
    let ov = geo.out_volume();
    let mut gb = vec![T::zero(); geo.out_channels];
    for (slice, row) in gout.chunks(ov).enumerate() {
        gb[slice % geo.out_channels] += row.iter().copied().sum::<T>();
    }
    gb
}

impl<T: Scalar> Graph<T> {
    /// `conv3d(input[N, Cin, D, H, W], weight[Cout, Cin, kd, kh, kw], bias[Cout])`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geo = Conv3dGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.out_channels] {
                return Err(dim_err!("conv3d: bias shape {:?}, expected [{}]", self.shape(b), geo.out_channels));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = bias.map(|b| self.value(b).data());
        let data = if geo.uses_im2col() { conv3d_im2col(&geo, x, w, b) } else { conv3d_direct(&geo, x, w, b) };
        let out = Tensor::from_parts(geo.output_shape(), data);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.op(
            out,
            &inputs,
            Box::new(move |ctx| {
                let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let (gx, gw) = if geo.uses_im2col() {
                    conv3d_backward_im2col(&geo, x, w, g, ctx.needs[0], ctx.needs[1])
                } else {
                    conv3d_backward_direct(&geo, x, w, g, ctx.needs[0], ctx.needs[1])
                };
                let mut grads = vec![
                    gx.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                    gw.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
                ];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| Tensor::from_parts(vec![geo.out_channels], bias_grad(&geo, g))));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 1, 3, 4, 5], |i| (i as f32).sin()));
        let w = g.constant(Tensor::ones(vec![1, 1, 1, 1, 1]));
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn all_ones_window_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 4, 4, 4]));
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3, 3]));
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 27.0));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![1, 2, 3, 3, 3], |i| i as f64));
        let w = g.constant(Tensor::zeros(vec![1, 2, 3, 3, 3]));
        let b = g.constant(Tensor::full(vec![1], 5.0));
        let y = g.conv3d(x, w, Some(b), 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 2, 4, 4, 4]));
        let w = g.constant(Tensor::ones(vec![1, 3, 3, 3, 3]));
        assert!(matches!(g.conv3d(x, w, None, 1, 0), Err(crate::Error::Dimension(_))));
        let w = g.constant(Tensor::ones(vec![1, 2, 5, 5, 5]));
        assert!(matches!(g.conv3d(x, w, None, 1, 0), Err(crate::Error::Dimension(_))));
        let w = g.constant(Tensor::ones(vec![1, 2, 3, 3, 3]));
        assert!(g.conv3d(x, w, None, 0, 0).is_err());
    }

    #[test]
    fn output_extent_formula() {
        let geo = Conv3dGeometry::new(&[1, 1, 32, 17, 9], &[4, 1, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(geo.output, [16, 9, 5]);
    }

    #[test]
    fn im2col_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad, k) in &[(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 3), (3, 1, 2)] {
            let geo = Conv3dGeometry::new(&[2, 3, 7, 6, 5], &[4, 3, k, k, k], stride, pad).unwrap();
            let x = random(&mut rng, 2 * 3 * 7 * 6 * 5);
            let w = random(&mut rng, 4 * 3 * k * k * k);
            let b = random(&mut rng, 4);
            let a = conv3d_direct(&geo, &x, &w, Some(&b));
            let c = conv3d_im2col(&geo, &x, &w, Some(&b));
            let diff = a.iter().zip(&c).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "forward stride {stride} pad {pad} k {k}: {diff}");

            let gout = random(&mut rng, a.len());
            let (gx1, gw1) = conv3d_backward_direct(&geo, &x, &w, &gout, true, true);
            let (gx2, gw2) = conv3d_backward_im2col(&geo, &x, &w, &gout, true, true);
            for (p, q) in gx1.unwrap().iter().zip(gx2.unwrap()).chain(gw1.unwrap().iter().zip(gw2.unwrap())) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geo = Conv3dGeometry::new(&[1, 2, 5, 5, 5], &[3, 2, 3, 3, 3], 1, 1).unwrap();
        let x1 = random(&mut rng, 250);
        let x2 = random(&mut rng, 250);
        let w = random(&mut rng, 3 * 2 * 27);
        let (a, b) = (1.7, -0.4);
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv3d_im2col(&geo, &mix, &w, None);
        let y1 = conv3d_im2col(&geo, &x1, &w, None);
        let y2 = conv3d_im2col(&geo, &x2, &w, None);
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a * y1[i] + b * y2[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn large_kernel_uses_direct_path() {
        let geo = Conv3dGeometry::new(&[1, 1, 6, 6, 6], &[1, 1, 5, 5, 5], 1, 0).unwrap();
        assert!(!geo.uses_im2col());
        let x = vec![1.0f64; 216];
        let w = vec![1.0f64; 125];
        assert!(conv3d_direct(&geo, &x, &w, None).iter().all(|&v| v == 125.0));
    }
}
