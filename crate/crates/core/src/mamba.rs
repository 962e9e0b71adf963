//! Mamba mixing layer over 3D feature volumes.
//!
//! The volume is flattened to a voxel sequence, pre-normalized per voxel,
//! projected to value and gate paths, mixed by a causal depthwise conv and
//! the selective scan, gated, projected back and added to the input.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::ops::activation::softplus;
use crate::ops::NORM_EPS;
use crate::params::{Bound, Init, ParamStore};
use crate::scan::{ScanMode, DEFAULT_STATE_SIZE};
use crate::tensor::{Scalar, Tensor};

/// Initial step size produced by the `dt_proj` bias.
pub const INIT_DELTA: f64 = 0.1;

/// Voxel visiting order when a volume becomes a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    /// Sequence index `(d * H + h) * W + w`.
    #[default]
    RasterDhw,
    /// Sequence index `(w * H + h) * D + d`.
    RasterWhd,
}

impl std::str::FromStr for ScanOrder {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster_dhw" | "dhw" => Ok(ScanOrder::RasterDhw),
            "raster_whd" | "whd" => Ok(ScanOrder::RasterWhd),
            _ => Err(contract_err!("unknown scan order {s:?}")),
        }
    }
}

/// Source index in `[N, C, D, H, W]` for every element of `[N, L, C]`.
fn flatten_index(n: usize, c: usize, dims: [usize; 3], order: ScanOrder) -> Vec<usize> {
    let [d, h, w] = dims;
    let sp = d * h * w;
    let mut idx = Vec::with_capacity(n * sp * c);
    for b in 0..n {
        for l in 0..sp {
            let (z, y, x) = match order {
                ScanOrder::RasterDhw => (l / (h * w), (l / w) % h, l % w),
                ScanOrder::RasterWhd => (l % d, (l / d) % h, l / (h * d)),
            };
            let voxel = (z * h + y) * w + x;
            for ch in 0..c {
                idx.push((b * c + ch) * sp + voxel);
            }
        }
    }
    idx
}

/// Inverse permutation of [`flatten_index`].
fn unflatten_index(n: usize, c: usize, dims: [usize; 3], order: ScanOrder) -> Vec<usize> {
    let fwd = flatten_index(n, c, dims, order);
    let mut inv = vec![0; fwd.len()];
    for (seq_pos, &vol_pos) in fwd.iter().enumerate() {
        inv[vol_pos] = seq_pos;
    }
    inv
}

/// `[N, C, D, H, W] -> [N, D*H*W, C]` on plain tensors.
pub fn flatten_volume<T: Scalar>(x: &Tensor<T>, order: ScanOrder) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(dim_err!("flatten_volume expects [N, C, D, H, W], got {s:?}"));
    }
    let idx = flatten_index(s[0], s[1], [s[2], s[3], s[4]], order);
    Ok(Tensor::from_parts(vec![s[0], s[2] * s[3] * s[4], s[1]], idx.iter().map(|&i| x.data()[i]).collect()))
}

/// `[N, L, C] -> [N, C, D, H, W]`; requires `L == D*H*W`.
pub fn unflatten_volume<T: Scalar>(seq: &Tensor<T>, dims: [usize; 3], order: ScanOrder) -> Result<Tensor<T>> {
    let s = seq.shape();
    check_unflatten(s, dims)?;
    let idx = unflatten_index(s[0], s[2], dims, order);
    Ok(Tensor::from_parts(vec![s[0], s[2], dims[0], dims[1], dims[2]], idx.iter().map(|&i| seq.data()[i]).collect()))
}

fn check_unflatten(s: &[usize], dims: [usize; 3]) -> Result<()> {
    if s.len() != 3 {
        return Err(dim_err!("unflatten_volume expects [N, L, C], got {s:?}"));
    }
    if s[1] != dims.iter().product::<usize>() {
        return Err(contract_err!("unflatten_volume: sequence length {} != {dims:?} voxels", s[1]));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn flatten_volume(&mut self, x: Var, order: ScanOrder) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(dim_err!("flatten_volume expects [N, C, D, H, W], got {s:?}"));
        }
        let idx = flatten_index(s[0], s[1], [s[2], s[3], s[4]], order);
        self.gather(x, Arc::new(idx), &[s[0], s[2] * s[3] * s[4], s[1]])
    }

    pub fn unflatten_volume(&mut self, seq: Var, dims: [usize; 3], order: ScanOrder) -> Result<Var> {
        let s = self.shape(seq).to_vec();
        check_unflatten(&s, dims)?;
        let idx = unflatten_index(s[0], s[2], dims, order);
        self.gather(seq, Arc::new(idx), &[s[0], s[2], dims[0], dims[1], dims[2]])
    }

    /// Reverses the sequence axis of `[N, L, C]`.
    fn reverse_sequence(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, l, c) = (s[0], s[1], s[2]);
        let idx = (0..n * l * c).map(|i| {
            let (b, t, ch) = (i / (l * c), (i / c) % l, i % c);
            (b * l + (l - 1 - t)) * c + ch
        });
        self.gather(x, Arc::new(idx.collect()), &s)
    }
}

/// Hyperparameters of one Mamba layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MambaConfig {
    /// Input and output channels `C`.
    pub channels: usize,
    /// Inner width is `expand * C`.
    pub expand: usize,
    pub conv_kernel: usize,
    pub state_size: usize,
    /// Rank of the step-size projection, `ceil(C / 16)` by default.
    pub dt_rank: usize,
    /// Adds a reversed-sequence pass averaged with the forward one.
    pub bidirectional: bool,
    pub order: ScanOrder,
}

impl MambaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            expand: 2,
            conv_kernel: 4,
            state_size: DEFAULT_STATE_SIZE,
            dt_rank: channels.div_ceil(16),
            bidirectional: false,
            order: ScanOrder::RasterDhw,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.expand == 0 || self.conv_kernel == 0 || self.state_size == 0 || self.dt_rank == 0
        {
            return Err(contract_err!("mamba: all sizes must be >= 1, got {self:?}"));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (c, e, k, n, r) = (self.channels, self.inner(), self.conv_kernel, self.state_size, self.dt_rank);
        2 * c           // norm
            + c * 2 * e // in_proj
            + e * k + e // conv1d
            + e * (r + 2 * n) // x_proj
            + r * e + e // dt_proj
            + e * n     // A_log
            + e         // D
            + e * c // out_proj
    }

    /// Adds the layer's parameters under `prefix` (for example `enc1.mamba`).
    pub fn init_params<T: Scalar>(&self, prefix: &str, init: &Init, store: &mut ParamStore<T>) -> Result<()> {
        self.validate()?;
        let (c, e, k, n, r) = (self.channels, self.inner(), self.conv_kernel, self.state_size, self.dt_rank);
        let name = |s: &str| format!("{prefix}.{s}");
        store.insert(name("norm.weight"), Tensor::ones(vec![c]))?;
        store.insert(name("norm.bias"), Tensor::zeros(vec![c]))?;
        store.insert(name("in_proj.weight"), init.fan_in_uniform(&name("in_proj.weight"), vec![2 * e, c], c))?;
        store.insert(name("conv1d.weight"), init.fan_in_uniform(&name("conv1d.weight"), vec![e, k], k))?;
        store.insert(name("conv1d.bias"), init.fan_in_uniform(&name("conv1d.bias"), vec![e], k))?;
        store.insert(name("x_proj.weight"), init.fan_in_uniform(&name("x_proj.weight"), vec![r + 2 * n, e], e))?;
        store.insert(name("dt_proj.weight"), init.fan_in_uniform(&name("dt_proj.weight"), vec![e, r], r))?;
        let dt_bias = INIT_DELTA.exp_m1().ln();
        debug_assert!((softplus(dt_bias) - INIT_DELTA).abs() < 1e-12);
        store.insert(name("dt_proj.bias"), Tensor::full(vec![e], T::from_f64(dt_bias)))?;
        store.insert(name("A_log"), Tensor::from_fn(vec![e, n], |i| T::from_f64(((i % n) as f64 + 1.0).ln())))?;
        store.insert(name("D"), Tensor::ones(vec![e]))?;
        store.insert(name("out_proj.weight"), Tensor::zeros(vec![c, e]))?;
        Ok(())
    }
}

/// Value path, gate path and scan of an already normalized sequence `u`.
fn mix<T: Scalar>(g: &mut Graph<T>, cfg: &MambaConfig, p: &LayerVars, u: Var, mode: ScanMode) -> Result<Var> {
    let (e, r, n) = (cfg.inner(), cfg.dt_rank, cfg.state_size);
    let proj = g.linear(u, p.in_proj, None)?;
    let value = g.slice_last(proj, 0, e)?;
    let gate = g.slice_last(proj, e, e)?;
    let conv = g.depthwise_conv1d_causal(value, p.conv_w, p.conv_b)?;
    let xs = g.silu(conv);
    let xdbl = g.linear(xs, p.x_proj, None)?;
    let dt_low = g.slice_last(xdbl, 0, r)?;
    let bmat = g.slice_last(xdbl, r, n)?;
    let cmat = g.slice_last(xdbl, r + n, n)?;
    let dt = g.linear(dt_low, p.dt_w, Some(p.dt_b))?;
    let delta = g.softplus(dt);
    let a_pos = g.exp(p.a_log);
    let a = g.scale(a_pos, -1.0);
    let y = g.selective_scan(xs, delta, a, bmat, cmat, p.d, mode)?;
    let gate = g.silu(gate);
    g.mul(y, gate)
}

struct LayerVars {
    norm_w: Var,
    norm_b: Var,
    in_proj: Var,
    conv_w: Var,
    conv_b: Var,
    x_proj: Var,
    dt_w: Var,
    dt_b: Var,
    a_log: Var,
    d: Var,
    out_proj: Var,
}

impl LayerVars {
    fn new(prefix: &str, bound: &Bound) -> Result<Self> {
        let v = |s: &str| bound.get(&format!("{prefix}.{s}"));
        Ok(Self {
            norm_w: v("norm.weight")?,
            norm_b: v("norm.bias")?,
            in_proj: v("in_proj.weight")?,
            conv_w: v("conv1d.weight")?,
            conv_b: v("conv1d.bias")?,
            x_proj: v("x_proj.weight")?,
            dt_w: v("dt_proj.weight")?,
            dt_b: v("dt_proj.bias")?,
            a_log: v("A_log")?,
            d: v("D")?,
            out_proj: v("out_proj.weight")?,
        })
    }
}

/// `x + out_proj(silu(gate) ⊙ scan(silu(conv(value))))` on `[N, C, D, H, W]`.
pub fn mamba_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &MambaConfig,
    prefix: &str,
    bound: &Bound,
    mode: ScanMode,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 || s[1] != cfg.channels {
        return Err(contract_err!("mamba_layer {prefix}: input {s:?} does not have {} channels", cfg.channels));
    }
    let p = LayerVars::new(prefix, bound)?;
    let dims = [s[2], s[3], s[4]];
    let seq = g.flatten_volume(x, cfg.order)?;
    let u = g.channel_norm(seq, p.norm_w, p.norm_b, NORM_EPS)?;
    let mut z = mix(g, cfg, &p, u, mode)?;
    if cfg.bidirectional {
        let ur = g.reverse_sequence(u)?;
        let zr = mix(g, cfg, &p, ur, mode)?;
        let back = g.reverse_sequence(zr)?;
        let sum = g.add(z, back)?;
        z = g.scale(sum, 0.5);
    }
    let o = g.linear(z, p.out_proj, None)?;
    let vol = g.unflatten_volume(o, dims, cfg.order)?;
    g.add(x, vol)
}
