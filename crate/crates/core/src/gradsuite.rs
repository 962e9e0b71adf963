//! The finite-difference check suite run by `implantmamba gradcheck`.
//!
//! Every check reduces its output to a scalar with fixed random weights so
//! that no gradient direction cancels by symmetry.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{grad_check, CoordCheck, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::mamba::{mamba_layer, MambaConfig};
use crate::net::{HeatmapSource, ImplantNet, ModelConfig};
use crate::ops::NORM_EPS;
use crate::params::{Init, ParamStore};
use crate::scan::{random_inputs, scan_backward, scan_sequential, ScanDims, ScanGrads, ScanInputs, ScanMode};
use crate::tensor::Tensor;

/// Backward kernel of the selective scan, swappable for mutation testing.
pub type ScanBackwardKernel = fn(&ScanInputs<f64>, &Tensor<f64>, ScanMode) -> Result<ScanGrads<f64>>;

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub checked: usize,
    pub masked: usize,
    pub unresolved: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    /// `(coordinate, analytic, numeric, rel_err)` of every failure.
    pub failures: Vec<(usize, f64, f64, f64)>,
    pub error: Option<String>,
}

impl SuiteEntry {
    fn from_report(name: String, r: Result<GradCheckReport>) -> Self {
        match r {
            Ok(r) => Self {
                name,
                checked: r.checked,
                masked: r.masked.len(),
                unresolved: r.unresolved.len(),
                max_rel_err: r.max_rel_err,
                pass: r.pass,
                failures: r.failures.iter().map(|c: &CoordCheck| (c.index, c.analytic, c.numeric, c.rel_err)).collect(),
                error: None,
            },
            Err(e) => Self {
                name,
                checked: 0,
                masked: 0,
                unresolved: 0,
                max_rel_err: f64::INFINITY,
                pass: false,
                failures: Vec::new(),
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(w ⊙ v)` with fixed weights in `[-1, 1]`.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = uniform(g.shape(v).to_vec(), -1.0, 1.0, seed ^ 0xabcd);
    let w = g.constant(w);
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

struct Suite {
    cfg: GradCheckConfig,
    entries: Vec<SuiteEntry>,
}

impl Suite {
    /// Checks `f` with respect to `x` after projecting its output.
    fn check<F>(&mut self, name: &str, x: Tensor<f64>, cfg: &GradCheckConfig, f: F)
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let r = grad_check(
            |g, v| {
                let out = f(g, v)?;
                if g.shape(out).is_empty() || g.value(out).numel() == 1 {
                    Ok(out)
                } else {
                    project(g, out, 7)
                }
            },
            &x,
            cfg,
        );
        self.entries.push(SuiteEntry::from_report(name.to_string(), r));
    }

    /// Checks each input of a multi-input op in turn, holding the others
    /// constant.
    fn check_each<F>(&mut self, name: &str, inputs: &[Tensor<f64>], cfg: &GradCheckConfig, f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        for k in 0..inputs.len() {
            let others = inputs.to_vec();
            self.check(&format!("{name}[{k}]"), inputs[k].clone(), cfg, |g, v| {
                let vars: Vec<Var> =
                    others.iter().enumerate().map(|(j, t)| if j == k { v } else { g.constant(t.clone()) }).collect();
                f(g, &vars)
            });
        }
    }
}

fn primitives(s: &mut Suite) {
    let cfg = s.cfg.clone();
    let relu_cfg = cfg.clone().with_relu_mask();
    let a = uniform(vec![2, 3, 4], -1.0, 1.0, 1);
    let b = uniform(vec![2, 3, 4], -1.0, 1.0, 2);
    s.check_each("add", &[a.clone(), b.clone()], &cfg, |g, v| g.add(v[0], v[1]));
    s.check_each("sub", &[a.clone(), b.clone()], &cfg, |g, v| g.sub(v[0], v[1]));
    s.check_each("mul", &[a.clone(), b.clone()], &cfg, |g, v| g.mul(v[0], v[1]));
    s.check("scale", a.clone(), &cfg, |g, v| Ok(g.scale(v, -1.7)));
    s.check("add_scalar", a.clone(), &cfg, |g, v| Ok(g.add_scalar(v, 0.3)));
    s.check("exp", a.clone(), &cfg, |g, v| Ok(g.exp(v)));
    s.check("sum", a.clone(), &cfg, |g, v| Ok(g.sum(v)));
    s.check("mean", a.clone(), &cfg, |g, v| Ok(g.mean(v)));
    s.check("reshape", a.clone(), &cfg, |g, v| g.reshape(v, &[6, 4]));
    s.check("slice_last", a.clone(), &cfg, |g, v| g.slice_last(v, 1, 2));
    let perm: Vec<usize> = (0..24).rev().chain([3, 3, 5]).collect();
    s.check("gather", a.clone(), &cfg, |g, v| g.gather(v, Arc::new(perm.clone()), &[27]));
    s.check("relu", a.clone(), &relu_cfg, |g, v| Ok(g.relu(v)));
    s.check("sigmoid", a.clone(), &cfg, |g, v| Ok(g.sigmoid(v)));
    s.check("silu", a.clone(), &cfg, |g, v| Ok(g.silu(v)));
    s.check("softplus", uniform(vec![2, 3, 4], -3.0, 3.0, 3), &cfg, |g, v| Ok(g.softplus(v)));

    let vol = uniform(vec![2, 3, 4, 3, 2], -1.0, 1.0, 4);
    let vol2 = uniform(vec![2, 2, 4, 3, 2], -1.0, 1.0, 5);
    s.check_each("concat_channels", &[vol.clone(), vol2], &cfg, |g, v| g.concat_channels(v));
    let gate = uniform(vec![2, 1, 4, 3, 2], 0.0, 1.0, 6);
    s.check_each("mul_channel_broadcast", &[gate, vol.clone()], &cfg, |g, v| g.mul_channel_broadcast(v[0], v[1]));
    s.check("global_avg_pool", vol.clone(), &cfg, |g, v| g.global_avg_pool(v));
    let gamma = uniform(vec![3], 0.5, 1.5, 7);
    let beta = uniform(vec![3], -0.5, 0.5, 8);
    s.check_each("instance_norm", &[vol.clone(), gamma.clone(), beta.clone()], &cfg, |g, v| {
        g.instance_norm(v[0], v[1], v[2], NORM_EPS)
    });
    s.check("trilinear_resize(up)", vol.clone(), &cfg, |g, v| g.trilinear_resize(v, [8, 6, 4]));
    s.check("trilinear_resize(mixed)", vol.clone(), &cfg, |g, v| g.trilinear_resize(v, [2, 5, 3]));

    let cin = uniform(vec![1, 2, 5, 4, 6], -1.0, 1.0, 9);
    let w = uniform(vec![3, 2, 3, 3, 3], -0.5, 0.5, 10);
    let bias = uniform(vec![3], -0.5, 0.5, 11);
    s.check_each("conv3d(s1,p1)", &[cin.clone(), w.clone(), bias.clone()], &cfg, |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), 1, 1)
    });
    s.check_each("conv3d(s2,p1)", &[cin.clone(), w.clone()], &cfg, |g, v| g.conv3d(v[0], v[1], None, 2, 1));
    let w1 = uniform(vec![3, 2, 1, 1, 1], -0.5, 0.5, 12);
    s.check_each("conv3d(1x1)", &[cin, w1, bias], &cfg, |g, v| g.conv3d(v[0], v[1], Some(v[2]), 1, 0));

    let x = uniform(vec![2, 5, 4], -1.0, 1.0, 13);
    let lw = uniform(vec![3, 4], -1.0, 1.0, 14);
    let lb = uniform(vec![3], -1.0, 1.0, 15);
    s.check_each("linear", &[x.clone(), lw, lb], &cfg, |g, v| g.linear(v[0], v[1], Some(v[2])));
    let cg = uniform(vec![4], 0.5, 1.5, 16);
    let cb = uniform(vec![4], -0.5, 0.5, 17);
    s.check_each("channel_norm", &[x.clone(), cg, cb], &cfg, |g, v| g.channel_norm(v[0], v[1], v[2], NORM_EPS));
    let dw = uniform(vec![4, 3], -1.0, 1.0, 18);
    let db = uniform(vec![4], -1.0, 1.0, 19);
    s.check_each("depthwise_conv1d_causal", &[x, dw, db], &cfg, |g, v| g.depthwise_conv1d_causal(v[0], v[1], v[2]));

    let p = uniform(vec![2, 1, 2, 3, 2], 0.05, 0.95, 20);
    let t = uniform(vec![2, 1, 2, 3, 2], 0.0, 1.0, 21).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    s.check_each("dice_loss", &[p.clone(), t], &cfg, |g, v| g.dice_loss(v[0], v[1], 1e-5));
    let q = uniform(vec![2, 1, 2, 3, 2], 0.0, 1.0, 22);
    s.check_each("l1_loss", &[p, q], &cfg, |g, v| g.l1_loss(v[0], v[1]));

    let vol = uniform(vec![1, 2, 2, 3, 2], -1.0, 1.0, 23);
    for order in [crate::mamba::ScanOrder::RasterDhw, crate::mamba::ScanOrder::RasterWhd] {
        s.check(&format!("flatten_volume({order:?})"), vol.clone(), &cfg, |g, v| g.flatten_volume(v, order));
        let seq = uniform(vec![1, 12, 2], -1.0, 1.0, 24);
        s.check(&format!("unflatten_volume({order:?})"), seq, &cfg, |g, v| g.unflatten_volume(v, [2, 3, 2], order));
    }
}

fn scan_dims() -> ScanDims {
    ScanDims { batch: 2, len: 7, din: 3, state: 4 }
}

fn scan_tensors(inp: &ScanInputs<f64>) -> [Tensor<f64>; 6] {
    [inp.x.clone(), inp.delta.clone(), inp.a.clone(), inp.b.clone(), inp.c.clone(), inp.d.clone()]
}

fn scan(s: &mut Suite) {
    let cfg = s.cfg.clone();
    let inp = random_inputs::<f64>(scan_dims(), 31);
    let ts = scan_tensors(&inp);
    for mode in [ScanMode::Sequential, ScanMode::Chunked(3)] {
        s.check_each(&format!("selective_scan({mode:?})"), &ts, &cfg, |g, v| {
            g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], mode)
        });
    }
    let zoh = [inp.delta.clone(), inp.a.clone(), inp.b.clone()];
    s.check_each("discretize_zoh(Abar)", &zoh, &cfg, |g, v| Ok(g.discretize_zoh(v[0], v[1], v[2])?.0));
    s.check_each("discretize_zoh(Bbar)", &zoh, &cfg, |g, v| Ok(g.discretize_zoh(v[0], v[1], v[2])?.1));
    for entry in check_scan_kernel(scan_backward, &cfg) {
        s.entries.push(entry);
    }
}

/// Checks a scan backward kernel against finite differences of
/// [`scan_sequential`], for both evaluation modes.
pub fn check_scan_kernel(kernel: ScanBackwardKernel, cfg: &GradCheckConfig) -> Vec<SuiteEntry> {
    let inp = random_inputs::<f64>(scan_dims(), 37);
    let ts = scan_tensors(&inp);
    let mut s = Suite { cfg: cfg.clone(), entries: Vec::new() };
    for mode in [ScanMode::Sequential, ScanMode::Chunked(2)] {
        s.check_each(&format!("scan_backward({mode:?})"), &ts, cfg, |g, v| {
            let get = |g: &Graph<f64>, i: usize| g.value(v[i]).clone();
            let inputs =
                ScanInputs { x: get(g, 0), delta: get(g, 1), a: get(g, 2), b: get(g, 3), c: get(g, 4), d: get(g, 5) };
            let y = scan_sequential(&inputs)?;
            Ok(g.custom_op(
                y,
                v,
                Box::new(move |ctx| match kernel(&inputs, ctx.grad, mode) {
                    Ok(gr) => vec![Some(gr.x), Some(gr.delta), Some(gr.a), Some(gr.b), Some(gr.c), Some(gr.d)],
                    Err(_) => vec![None; 6],
                }),
            ))
        });
    }
    s.entries
}

/// Moves a Mamba layer away from its initialization: out_proj is zero
/// there, which hides every inner gradient, and the small initial step size
/// leaves the decay rates with gradients below finite-difference resolution.
fn randomize_mamba(store: &mut ParamStore<f64>, prefix: &str, seed: u64) {
    let ranges = [("out_proj.weight", -0.5, 0.5), ("dt_proj.bias", -0.5, 1.0), ("A_log", -0.7, 0.7)];
    for (k, (name, lo, hi)) in ranges.into_iter().enumerate() {
        let full = format!("{prefix}.{name}");
        let t = store.get_mut(&full).expect("mamba parameter");
        *t = uniform(t.shape().to_vec(), lo, hi, seed * 16 + k as u64);
    }
}

fn mamba(s: &mut Suite) {
    let cfg = s.cfg.clone();
    for bidirectional in [false, true] {
        let mc = MambaConfig { state_size: 4, bidirectional, ..MambaConfig::new(4) };
        let mut store = ParamStore::<f64>::new();
        let init = Init { seed: 41 };
        mc.init_params("m", &init, &mut store).expect("valid mamba config");
        randomize_mamba(&mut store, "m", 42);
        let x = uniform(vec![1, 4, 2, 3, 2], -1.0, 1.0, 43);
        let tag = if bidirectional { "bi" } else { "uni" };
        let run = |g: &mut Graph<f64>, xv: Var, b: &crate::params::Bound| {
            mamba_layer(g, xv, &mc, "m", b, ScanMode::Chunked(5))
        };
        s.check(&format!("mamba_layer({tag}).x"), x.clone(), &cfg, |g, v| {
            let b = store.bind_replacing(g, "", v);
            run(g, v, &b)
        });
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let value = store.get(&name).expect("listed").clone();
            let xc = x.clone();
            s.check(&format!("mamba_layer({tag}).{name}"), value, &cfg, |g, v| {
                let b = store.bind_replacing(g, &name, v);
                let xv = g.constant(xc.clone());
                run(g, xv, &b)
            });
        }
    }
}

/// Configuration of the whole-network check: 16³ input, base width 4.
pub fn network_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        mamba_enabled: [true, true, false, false],
        scp_channels: 4,
        state_size: 4,
        input_extent: 16,
        scan_chunk: 16,
        ..ModelConfig::tiny()
    }
}

fn network(s: &mut Suite, coords: usize) {
    let cfg = s.cfg.clone().sampled(coords, 5);
    let mc = network_config();
    let net = ImplantNet::new(mc.clone()).expect("valid network config");
    let mut store = net.init_params::<f64>(51).expect("init");
    for (i, enabled) in mc.mamba_enabled.iter().enumerate() {
        if *enabled {
            randomize_mamba(&mut store, &format!("enc{}.mamba", i + 1), 52 + i as u64);
        }
    }
    let e = mc.input_extent;
    let volume = uniform(vec![1, 1, e, e, e], 0.0, 1.0, 53);
    let heat = uniform(vec![1, 1, e / 8, e / 8, e / 8], 0.0, 1.0, 55);
    // A random projection of both outputs rather than the training loss: the
    // loss is O(1) while most parameter gradients through it are far below
    // 1e-5, under what central differences resolve in f64. The loss
    // primitives are checked on their own.
    let loss = |g: &mut Graph<f64>, b: &crate::params::Bound, x: Var| -> Result<Var> {
        let out = net.forward(g, b, x, HeatmapSource::Fixed(&heat))?;
        let p = project(g, out.prob, 56)?;
        let slope = out.slope.expect("network check enables the slope head");
        let q = project(g, slope, 57)?;
        g.add(p, q)
    };
    s.check("network.volume", volume.clone(), &cfg, |g, v| {
        let b = store.bind_replacing(g, "", v);
        loss(g, &b, v)
    });
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let value = store.get(&name).expect("listed").clone();
        s.check(&format!("network.{name}"), value, &cfg, |g, v| {
            let b = store.bind_replacing(g, &name, v);
            let x = g.constant(volume.clone());
            loss(g, &b, x)
        });
    }
}

/// Which groups to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteSelection {
    pub primitives: bool,
    pub scan: bool,
    pub mamba: bool,
    pub network: bool,
    /// Coordinates sampled per network tensor.
    pub network_coords: usize,
}

impl Default for SuiteSelection {
    fn default() -> Self {
        Self { primitives: true, scan: true, mamba: true, network: true, network_coords: 24 }
    }
}

/// Runs the selected checks at f64 with the given tolerance settings.
pub fn run_suite(sel: SuiteSelection, cfg: &GradCheckConfig) -> SuiteReport {
    let start = Instant::now();
    let mut s = Suite { cfg: cfg.clone(), entries: Vec::new() };
    if sel.primitives {
        primitives(&mut s);
    }
    if sel.scan {
        scan(&mut s);
    }
    if sel.mamba {
        mamba(&mut s);
    }
    if sel.network {
        network(&mut s, sel.network_coords);
    }
    SuiteReport { entries: s.entries, seconds: start.elapsed().as_secs_f64() }
}

/// The full suite at the default step and tolerance.
pub fn cmd_gradcheck() -> SuiteReport {
    run_suite(SuiteSelection::default(), &GradCheckConfig::default())
}
