//! The full network: hybrid conv + Mamba encoder, position decoder and the
//! slope-coupled prediction (SCP) branch.
//!
//! Parameter names follow the module tree, for example `enc2.conv1.weight`,
//! `enc1.mamba.out_proj.weight`, `dec3.up.bias`, `head.weight`,
//! `scp.fc2.bias`.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::geometry::{heatmap_from_endpoints, heatmap_generate, Endpoints, Heatmap};
use crate::graph::{Graph, Var};
use crate::mamba::{mamba_layer, MambaConfig};
use crate::ops::NORM_EPS;
use crate::params::{Bound, Init, ParamStore};
use crate::scan::{ScanMode, DEFAULT_CHUNK, DEFAULT_STATE_SIZE};
use crate::tensor::{Scalar, Tensor};

/// Binarization threshold for heatmaps and evaluation.
pub const THRESHOLD: f64 = 0.5;
/// Smoothing constant of the training Dice loss.
pub const DICE_EPS: f64 = 1e-5;
/// Hidden channels of the attention network.
pub const ATTENTION_HIDDEN: usize = 8;
/// Hidden width of the slope MLP.
pub const MLP_HIDDEN: usize = 32;

const STAGES: usize = 4;

fn default_state_size() -> usize {
    DEFAULT_STATE_SIZE
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK
}

/// Architecture hyperparameters; the `mamba_enabled` and `scp_enabled`
/// fields are the ablation axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stage widths are `base_channels * [1, 2, 4, 8]`.
    pub base_channels: usize,
    pub mamba_enabled: [bool; 4],
    pub scp_enabled: bool,
    pub scp_channels: usize,
    /// Gaussian std of heatmap peaks, in stride-8 grid voxels.
    pub heatmap_sigma: f64,
    pub lambda_slope: f64,
    /// Side of the cubic input volume.
    pub input_extent: usize,
    #[serde(default = "default_state_size")]
    pub state_size: usize,
    #[serde(default)]
    pub bidirectional_scan: bool,
    #[serde(default = "default_chunk")]
    pub scan_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale default: 32³, base 8, Mamba in stage 1, SCP on.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            mamba_enabled: [true, false, false, false],
            scp_enabled: true,
            scp_channels: 16,
            heatmap_sigma: 2.0,
            lambda_slope: 1.0,
            input_extent: 32,
            state_size: DEFAULT_STATE_SIZE,
            bidirectional_scan: false,
            scan_chunk: DEFAULT_CHUNK,
        }
    }

    /// 128³ input, every stage with a Mamba layer, SCP on.
    pub fn full_scale() -> Self {
        Self {
            base_channels: 36,
            mamba_enabled: [true; 4],
            scp_enabled: true,
            scp_channels: 64,
            input_extent: 128,
            ..Self::tiny()
        }
    }

    /// Same widths with no Mamba layers and no SCP branch.
    pub fn cnn_baseline(&self) -> Self {
        Self { mamba_enabled: [false; 4], scp_enabled: false, ..self.clone() }
    }

    pub fn widths(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(contract_err!("base_channels must be >= 4, got {}", self.base_channels));
        }
        if self.input_extent == 0 || !self.input_extent.is_multiple_of(16) {
            return Err(contract_err!("input_extent must be a positive multiple of 16, got {}", self.input_extent));
        }
        if self.scp_channels == 0 || self.state_size == 0 || self.scan_chunk == 0 {
            return Err(contract_err!("scp_channels, state_size and scan_chunk must be >= 1"));
        }
        if !(self.heatmap_sigma > 0.0) || !(self.lambda_slope >= 0.0) {
            return Err(contract_err!("heatmap_sigma must be > 0 and lambda_slope >= 0"));
        }
        Ok(())
    }

    pub fn mamba_config(&self, stage: usize) -> MambaConfig {
        MambaConfig {
            state_size: self.state_size,
            bidirectional: self.bidirectional_scan,
            ..MambaConfig::new(self.widths()[stage])
        }
    }

    pub fn scan_mode(&self) -> ScanMode {
        ScanMode::Chunked(self.scan_chunk)
    }

    /// Closed-form trainable-scalar count.
    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k * k;
        let mut total = 0;
        for i in 0..STAGES {
            let cin = if i == 0 { 1 } else { w[i - 1] };
            total += conv(w[i], cin, 3) + 2 * w[i] + conv(w[i], w[i], 3) + 2 * w[i];
            if self.mamba_enabled[i] {
                total += self.mamba_config(i).param_count();
            }
        }
        for (from, out, skip) in decoder_plan(w) {
            total += conv(out, from, 1) + out + conv(out, out + skip, 3) + 2 * out;
        }
        total += w[0] + 1;
        if self.scp_enabled {
            let c = self.scp_channels;
            let h = ATTENTION_HIDDEN;
            total += w.iter().map(|&wi| c * wi).sum::<usize>() + 2 * c;
            total += conv(h, 1, 3) + h + conv(1, h, 3) + 1;
            total += MLP_HIDDEN * c + MLP_HIDDEN + 3 * MLP_HIDDEN + 3;
        }
        total
    }
}

/// `(input channels, output channels, skip channels)` of each decoder stage.
/// The last stage's skip is the single-channel input volume.
fn decoder_plan(w: [usize; 4]) -> [(usize, usize, usize); 4] {
    [(w[3], w[2], w[2]), (w[2], w[1], w[1]), (w[1], w[0], w[0]), (w[0], w[0], 1)]
}

/// Encoder outputs at strides 2, 4, 8 and 16.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub m: [Var; 4],
}

/// Which heatmap conditions the SCP branch.
#[derive(Debug, Clone, Copy)]
pub enum HeatmapSource<'a, T: Scalar> {
    /// Derived from the current prediction.
    Predicted,
    /// Rendered from known full-resolution endpoints, one per sample.
    GroundTruth(&'a [Endpoints]),
    /// A given `[N, 1, D', H', W']` map.
    Fixed(&'a Tensor<T>),
}

#[derive(Debug)]
pub struct ForwardOutput<T: Scalar> {
    /// Probability map `[N, 1, D, H, W]`.
    pub prob: Var,
    /// Un-normalized slope prediction `[N, 3]` when SCP is enabled.
    pub slope: Option<Var>,
    pub pyramid: FeaturePyramid,
    pub heatmap: Option<Heatmap<T>>,
}

/// Loss components of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dice_loss: f64,
    pub slope_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(dice_loss: f64, slope_loss: f64, lambda: f64) -> Self {
        Self { dice_loss, slope_loss, total: dice_loss + lambda * slope_loss }
    }
}

#[derive(Debug, Clone)]
pub struct ImplantNet {
    pub config: ModelConfig,
}

impl ImplantNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let cfg = &self.config;
        let init = Init { seed };
        let w = cfg.widths();
        let mut s = ParamStore::new();
        let conv = |s: &mut ParamStore<T>, name: String, cout: usize, cin: usize, k: usize| {
            let fan = cin * k * k * k;
            let t = init.fan_in_uniform(&name, vec![cout, cin, k, k, k], fan);
            s.insert(name, t)
        };
        let norm = |s: &mut ParamStore<T>, prefix: String, c: usize| -> Result<()> {
            s.insert(format!("{prefix}.weight"), Tensor::ones(vec![c]))?;
            s.insert(format!("{prefix}.bias"), Tensor::zeros(vec![c]))
        };
        for i in 0..STAGES {
            let cin = if i == 0 { 1 } else { w[i - 1] };
            let p = format!("enc{}", i + 1);
            conv(&mut s, format!("{p}.conv1.weight"), w[i], cin, 3)?;
            norm(&mut s, format!("{p}.norm1"), w[i])?;
            conv(&mut s, format!("{p}.conv2.weight"), w[i], w[i], 3)?;
            norm(&mut s, format!("{p}.norm2"), w[i])?;
            if cfg.mamba_enabled[i] {
                cfg.mamba_config(i).init_params(&format!("{p}.mamba"), &init, &mut s)?;
            }
        }
        for (j, (from, out, skip)) in decoder_plan(w).into_iter().enumerate() {
            let p = format!("dec{}", j + 1);
            conv(&mut s, format!("{p}.up.weight"), out, from, 1)?;
            s.insert(format!("{p}.up.bias"), init.fan_in_uniform(&format!("{p}.up.bias"), vec![out], from))?;
            conv(&mut s, format!("{p}.conv.weight"), out, out + skip, 3)?;
            norm(&mut s, format!("{p}.norm"), out)?;
        }
        conv(&mut s, "head.weight".into(), 1, w[0], 1)?;
        s.insert("head.bias", Tensor::zeros(vec![1]))?;
        if cfg.scp_enabled {
            let c = cfg.scp_channels;
            for (i, &wi) in w.iter().enumerate() {
                conv(&mut s, format!("scp.proj{}.weight", i + 1), c, wi, 1)?;
            }
            norm(&mut s, "scp.norm".into(), c)?;
            conv(&mut s, "scp.att1.weight".into(), ATTENTION_HIDDEN, 1, 3)?;
            s.insert("scp.att1.bias", Tensor::zeros(vec![ATTENTION_HIDDEN]))?;
            conv(&mut s, "scp.att2.weight".into(), 1, ATTENTION_HIDDEN, 3)?;
            s.insert("scp.att2.bias", Tensor::zeros(vec![1]))?;
            s.insert("scp.fc1.weight", init.fan_in_uniform("scp.fc1.weight", vec![MLP_HIDDEN, c], c))?;
            s.insert("scp.fc1.bias", Tensor::zeros(vec![MLP_HIDDEN]))?;
            s.insert("scp.fc2.weight", init.fan_in_uniform("scp.fc2.weight", vec![3, MLP_HIDDEN], MLP_HIDDEN))?;
            s.insert("scp.fc2.bias", Tensor::zeros(vec![3]))?;
        }
        Ok(s)
    }

    fn conv_norm_relu<T: Scalar>(
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        conv: &str,
        norm: &str,
        stride: usize,
    ) -> Result<Var> {
        let y = g.conv3d(x, p.get(conv)?, None, stride, 1)?;
        let y = g.instance_norm(y, p.get(&format!("{norm}.weight"))?, p.get(&format!("{norm}.bias"))?, NORM_EPS)?;
        Ok(g.relu(y))
    }

    /// Four stages of stride-2 conv, conv, optional Mamba layer.
    pub fn encoder_forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, volume: Var) -> Result<FeaturePyramid> {
        let s = g.shape(volume).to_vec();
        if s.len() != 5 || s[1] != 1 {
            return Err(dim_err!("encoder expects [N, 1, D, H, W], got {s:?}"));
        }
        if s[2..].iter().any(|&e| e % 16 != 0) {
            return Err(contract_err!("encoder: spatial extents {:?} must be divisible by 16", &s[2..]));
        }
        let mut x = volume;
        let mut m = [volume; 4];
        for (i, slot) in m.iter_mut().enumerate() {
            let pre = format!("enc{}", i + 1);
            x = Self::conv_norm_relu(g, p, x, &format!("{pre}.conv1.weight"), &format!("{pre}.norm1"), 2)?;
            x = Self::conv_norm_relu(g, p, x, &format!("{pre}.conv2.weight"), &format!("{pre}.norm2"), 1)?;
            if self.config.mamba_enabled[i] {
                x = mamba_layer(
                    g,
                    x,
                    &self.config.mamba_config(i),
                    &format!("{pre}.mamba"),
                    p,
                    self.config.scan_mode(),
                )?;
            }
            *slot = x;
        }
        Ok(FeaturePyramid { m })
    }

    /// Decoder from `m4` back to input resolution, then the sigmoid head.
    pub fn position_branch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyr: &FeaturePyramid,
        volume: Var,
    ) -> Result<Var> {
        let skips = [pyr.m[2], pyr.m[1], pyr.m[0], volume];
        let mut x = pyr.m[3];
        for (j, skip) in skips.into_iter().enumerate() {
            let pre = format!("dec{}", j + 1);
            let ss = g.shape(skip).to_vec();
            let xs = g.shape(x).to_vec();
            if ss[2..].iter().zip(&xs[2..]).any(|(&a, &b)| a != 2 * b) {
                return Err(contract_err!("decoder stage {}: skip {ss:?} is not twice {xs:?}", j + 1));
            }
            let up = g.trilinear_resize(x, [ss[2], ss[3], ss[4]])?;
            let up =
                g.conv3d(up, p.get(&format!("{pre}.up.weight"))?, Some(p.get(&format!("{pre}.up.bias"))?), 1, 0)?;
            let cat = g.concat_channels(&[up, skip])?;
            x = Self::conv_norm_relu(g, p, cat, &format!("{pre}.conv.weight"), &format!("{pre}.norm"), 1)?;
        }
        let logits = g.conv3d(x, p.get("head.weight")?, Some(p.get("head.bias")?), 1, 0)?;
        Ok(g.sigmoid(logits))
    }

    /// Projects every pyramid level to `C'` channels on the stride-8 grid,
    /// sums, normalizes.
    pub fn scp_fuse<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pyr: &FeaturePyramid) -> Result<Var> {
        let gs = g.shape(pyr.m[2]).to_vec();
        let grid = [gs[2], gs[3], gs[4]];
        let mut acc: Option<Var> = None;
        for (i, &m) in pyr.m.iter().enumerate() {
            let proj = g.conv3d(m, p.get(&format!("scp.proj{}.weight", i + 1))?, None, 1, 0)?;
            let r = g.trilinear_resize(proj, grid)?;
            acc = Some(match acc {
                None => r,
                Some(a) => g.add(a, r)?,
            });
        }
        let ms = g.instance_norm(acc.unwrap(), p.get("scp.norm.weight")?, p.get("scp.norm.bias")?, NORM_EPS)?;
        Ok(g.relu(ms))
    }

    /// Heatmap-conditioned attention over `ms`, pooled, then a 2-layer MLP
    /// to an un-normalized 3-vector per sample.
    pub fn scp_slope_head<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, ms: Var, heat: &Tensor<T>) -> Result<Var> {
        let (hs, msh) = (heat.shape(), g.shape(ms));
        if hs.len() != 5 || hs[1] != 1 || hs[0] != msh[0] || hs[2..] != msh[2..] {
            return Err(contract_err!("scp: heatmap {hs:?} is not on the feature grid {msh:?}"));
        }
        let h = g.constant(heat.clone());
        let a = g.conv3d(h, p.get("scp.att1.weight")?, Some(p.get("scp.att1.bias")?), 1, 1)?;
        let a = g.relu(a);
        let a = g.conv3d(a, p.get("scp.att2.weight")?, Some(p.get("scp.att2.bias")?), 1, 1)?;
        let a = g.sigmoid(a);
        let att = g.mul_channel_broadcast(a, ms)?;
        let pooled = g.global_avg_pool(att)?;
        let z = g.linear(pooled, p.get("scp.fc1.weight")?, Some(p.get("scp.fc1.bias")?))?;
        let z = g.relu(z);
        g.linear(z, p.get("scp.fc2.weight")?, Some(p.get("scp.fc2.bias")?))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        volume: Var,
        source: HeatmapSource<'_, T>,
    ) -> Result<ForwardOutput<T>> {
        let pyramid = self.encoder_forward(g, p, volume)?;
        let prob = self.position_branch(g, p, &pyramid, volume)?;
        if !self.config.scp_enabled {
            return Ok(ForwardOutput { prob, slope: None, pyramid, heatmap: None });
        }
        let ms = self.scp_fuse(g, p, &pyramid)?;
        let ms_shape = g.shape(ms).to_vec();
        let grid = [ms_shape[2], ms_shape[3], ms_shape[4]];
        let vs = g.shape(volume).to_vec();
        let full = [vs[2], vs[3], vs[4]];
        let sigma = self.config.heatmap_sigma;
        let heat = match source {
            HeatmapSource::Predicted => heatmap_generate(g.value(prob), THRESHOLD, sigma, grid),
            HeatmapSource::GroundTruth(ends) => {
                if ends.len() != vs[0] {
                    return Err(contract_err!("{} endpoint pairs for a batch of {}", ends.len(), vs[0]));
                }
                heatmap_from_endpoints(ends, full, grid, sigma)
            }
            HeatmapSource::Fixed(h) => Heatmap { h: h.clone(), peaks: Vec::new(), degenerate: vec![false; vs[0]] },
        };
        let slope = self.scp_slope_head(g, p, ms, &heat.h)?;
        Ok(ForwardOutput { prob, slope: Some(slope), pyramid, heatmap: Some(heat) })
    }

    /// `dice + lambda * L1(slope)`; the slope term is zero without SCP.
    ///
    /// `mask` is `[N, 1, D, H, W]` and `slopes` holds one unit vector per sample.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        out: &ForwardOutput<T>,
        mask: &Tensor<T>,
        slopes: &[[f64; 3]],
    ) -> Result<(Var, LossReport)> {
        let target = g.constant(mask.clone());
        let dice = g.dice_loss(out.prob, target, DICE_EPS)?;
        let dice_v = g.value(dice).item().as_f64();
        let Some(pred) = out.slope else {
            return Ok((dice, LossReport::new(dice_v, 0.0, self.config.lambda_slope)));
        };
        let truth = Tensor::from_f64_slice(vec![slopes.len(), 3], &slopes.concat())?;
        let truth = g.constant(truth);
        let l1 = g.l1_loss(pred, truth)?;
        let slope_v = g.value(l1).item().as_f64();
        let weighted = g.scale(l1, self.config.lambda_slope);
        let total = g.add(dice, weighted)?;
        Ok((total, LossReport::new(dice_v, slope_v, self.config.lambda_slope)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(extent: usize, base: usize) -> ModelConfig {
        ModelConfig { input_extent: extent, base_channels: base, scp_channels: 4, state_size: 4, ..ModelConfig::tiny() }
    }

    fn volume(extent: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![1, 1, extent, extent, extent], |i| ((i * 31) % 17) as f64 / 17.0)
    }

    #[test]
    fn pyramid_shapes() {
        let net = ImplantNet::new(ModelConfig::tiny()).unwrap();
        let store = net.init_params::<f32>(0).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![1, 1, 32, 32, 32]));
        let pyr = net.encoder_forward(&mut g, &p, x).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.m.iter().map(|&m| g.shape(m).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 8, 16, 16, 16], vec![1, 16, 8, 8, 8], vec![1, 32, 4, 4, 4], vec![1, 64, 2, 2, 2]]
        );
        // zero input with zero norm biases gives an all-zero pyramid
        assert!(pyr.m.iter().all(|&m| g.value(m).data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn indivisible_extent_rejected() {
        let net = ImplantNet::new(small(16, 4)).unwrap();
        let store = net.init_params::<f64>(0).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![1, 1, 16, 16, 24]));
        assert!(matches!(net.encoder_forward(&mut g, &p, x), Err(crate::Error::Contract(_))));
        assert!(ImplantNet::new(small(24, 4)).is_err());
    }

    #[test]
    fn store_matches_closed_form() {
        for cfg in [ModelConfig::tiny(), small(16, 4), ModelConfig::tiny().cnn_baseline(), ModelConfig::full_scale()] {
            let net = ImplantNet::new(cfg.clone()).unwrap();
            assert_eq!(net.init_params::<f32>(1).unwrap().count(), cfg.param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn head_zero_gives_half() {
        let net = ImplantNet::new(small(16, 4)).unwrap();
        let mut store = net.init_params::<f64>(0).unwrap();
        *store.get_mut("head.weight").unwrap() = Tensor::zeros(vec![1, 4, 1, 1, 1]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(volume(16));
        let out = net.forward(&mut g, &p, x, HeatmapSource::Predicted).unwrap();
        assert_eq!(g.shape(out.prob), &[1, 1, 16, 16, 16]);
        assert!(g.value(out.prob).data().iter().all(|&v| v == 0.5));
        assert_eq!(g.shape(out.slope.unwrap()), &[1, 3]);
    }

    #[test]
    fn scp_gradients_reach_every_level() {
        // at 16³ the stride-16 level is a single voxel, which instance norm maps to its bias
        let net = ImplantNet::new(small(32, 4)).unwrap();
        let store = net.init_params::<f64>(2).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(volume(32));
        let pyr = net.encoder_forward(&mut g, &p, x).unwrap();
        let ms = net.scp_fuse(&mut g, &p, &pyr).unwrap();
        assert_eq!(g.shape(ms)[2..], g.shape(pyr.m[2])[2..]);
        let heat = Tensor::full(vec![1, 1, 4, 4, 4], 0.5);
        let s = net.scp_slope_head(&mut g, &p, ms, &heat).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        for i in 1..=4 {
            let grad = g.grad(p.get(&format!("scp.proj{i}.weight")).unwrap()).unwrap();
            assert!(grad.max_abs() > 0.0, "level {i}");
        }
        let bad = Tensor::full(vec![1, 1, 2, 2, 2], 0.5);
        assert!(net.scp_slope_head(&mut g, &p, ms, &bad).is_err());
    }

    #[test]
    fn zero_attention_and_mlp_collapse() {
        let net = ImplantNet::new(small(16, 4)).unwrap();
        let mut store = net.init_params::<f64>(2).unwrap();
        *store.get_mut("scp.fc2.weight").unwrap() = Tensor::zeros(vec![3, MLP_HIDDEN]);
        *store.get_mut("scp.fc2.bias").unwrap() = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(volume(16));
        let out = net.forward(&mut g, &p, x, HeatmapSource::Predicted).unwrap();
        assert_eq!(g.value(out.slope.unwrap()).data(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn loss_report_gating() {
        let mask = Tensor::from_fn(vec![1, 1, 16, 16, 16], |i| if i % 7 == 0 { 1.0 } else { 0.0 });
        for scp in [true, false] {
            let cfg = ModelConfig { scp_enabled: scp, ..small(16, 4) };
            let net = ImplantNet::new(cfg).unwrap();
            let store = net.init_params::<f64>(0).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(volume(16));
            let out = net.forward(&mut g, &p, x, HeatmapSource::Predicted).unwrap();
            let (total, rep) = net.loss(&mut g, &out, &mask, &[[0.0, 0.0, 1.0]]).unwrap();
            assert!((g.value(total).item() - rep.total).abs() < 1e-12);
            assert_eq!(rep.total, rep.dice_loss + rep.slope_loss);
            assert!(rep.dice_loss <= 1.0 && rep.dice_loss >= 0.0);
            if !scp {
                assert_eq!(rep.slope_loss, 0.0);
            }
        }
        assert_eq!(LossReport::new(0.5, 0.2, 1.0).total, 0.7);
        assert_eq!(LossReport::new(0.5, 0.2, 0.0).total, 0.5);
    }

    #[test]
    fn config_json_field_names() {
        let json = serde_json::to_value(ModelConfig::tiny()).unwrap();
        for key in [
            "base_channels",
            "mamba_enabled",
            "scp_enabled",
            "scp_channels",
            "heatmap_sigma",
            "lambda_slope",
            "input_extent",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let minimal = r#"{"base_channels":4,"mamba_enabled":[false,false,false,false],"scp_enabled":false,
            "scp_channels":8,"heatmap_sigma":2.0,"lambda_slope":1.0,"input_extent":16}"#;
        let cfg: ModelConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(cfg.state_size, DEFAULT_STATE_SIZE);
    }
}
