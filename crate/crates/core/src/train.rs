//! Optimization loop: Adam, warmup + cosine schedule, per-epoch evaluation
//! and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::geometry::Endpoints;
use crate::graph::Graph;
use crate::metrics::{EvalSummary, SampleMetrics};
use crate::net::{HeatmapSource, ImplantNet, LossReport, ModelConfig};
use crate::parallel::map_range;
use crate::params::{splitmix64, ParamStore};
use crate::phantom::{random_crop, read_manifest, ManifestRecord, Phantom, Split};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_BEST: &str = "checkpoint_best.imtn";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.imtn";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const STEPS_CSV: &str = "steps.csv";

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    2
}
fn default_warmup() -> f64 {
    0.1
}
fn default_min_lr() -> f64 {
    0.01
}
fn default_teacher() -> usize {
    5
}
fn default_eval_every() -> usize {
    1
}
fn default_eval_split() -> Split {
    Split::Test
}

/// Everything a training run depends on; the JSON form mirrors the field
/// names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr_frac: f64,
    pub seed: u64,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    /// Epochs that condition the slope head on ground-truth endpoints.
    #[serde(default = "default_teacher")]
    pub teacher_forcing_epochs: usize,
    /// Use only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Split evaluated after each epoch; `train` evaluates held-in samples.
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    #[serde(default)]
    pub eval_limit: Option<usize>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl RunConfig {
    pub fn new(model: ModelConfig, manifest: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            model,
            epochs: 50,
            batch: default_batch(),
            lr: default_lr(),
            warmup_frac: default_warmup(),
            min_lr_frac: default_min_lr(),
            seed: 0,
            manifest,
            output_dir,
            teacher_forcing_epochs: default_teacher(),
            train_limit: None,
            eval_split: Split::Test,
            eval_limit: None,
            eval_every: 1,
            max_steps: None,
        }
    }

    /// Memorization run on four held-in samples without cropping.
    ///
    /// The learning rate is raised from the default so that 300 epochs of
    /// two steps each suffice.
    pub fn overfit(manifest: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            epochs: 300,
            lr: 3e-3,
            train_limit: Some(4),
            eval_split: Split::Train,
            eval_limit: Some(4),
            eval_every: 25,
            ..Self::new(ModelConfig::tiny(), manifest, output_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(contract_err!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(contract_err!("warmup_frac must lie in [0, 1), got {}", self.warmup_frac));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(contract_err!("min_lr_frac must lie in [0, 1], got {}", self.min_lr_frac));
        }
        if self.epochs == 0 || self.batch == 0 || self.eval_every == 0 {
            return Err(contract_err!("epochs, batch and eval_every must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Total optimizer steps for `n` training samples.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * n.div_ceil(self.batch);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to `min_lr_frac * lr`
/// at step `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_steps: f64,
    pub total: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn new(lr: f64, warmup_frac: f64, min_lr_frac: f64, total: usize) -> Self {
        let total = total as f64;
        Self { lr, warmup_steps: warmup_frac * total, total, min_lr: min_lr_frac * lr }
    }

    pub fn at(&self, t: f64) -> f64 {
        if t < self.warmup_steps {
            return self.lr * t / self.warmup_steps;
        }
        let span = self.total - self.warmup_steps;
        let progress = if span > 0.0 { ((t - self.warmup_steps) / span).clamp(0.0, 1.0) } else { 1.0 };
        self.min_lr + (self.lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = T::from_f64(p[i].as_f64() - update);
            }
        }
    }
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub dice_loss: f64,
    pub slope_loss: f64,
    pub total: f64,
}

/// One evaluated epoch. Column order is the CSV schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub dice_loss: f64,
    pub slope_loss: f64,
    pub total: f64,
    pub eval_dice: f64,
    pub eval_iou: f64,
    /// Empty without a slope head.
    pub eval_slope_mae: Option<f64>,
    pub eval_angular_err_deg: Option<f64>,
    pub degenerate_sample_count: usize,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "epoch",
    "dice_loss",
    "slope_loss",
    "total",
    "eval_dice",
    "eval_iou",
    "eval_slope_mae",
    "eval_angular_err_deg",
    "degenerate_sample_count",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: MetricsReport,
    pub steps: Vec<StepRecord>,
    pub params: ParamStore<f32>,
    pub best_params: ParamStore<f32>,
    pub best_dice: f64,
}

/// Network input `[1, 1, D, H, W]` and mask `[1, 1, D, H, W]` of a phantom.
pub fn sample_tensors<T: Scalar>(ph: &Phantom) -> Result<(Tensor<T>, Tensor<T>)> {
    let [d, h, w] = ph.dims();
    Ok((ph.volume.cast().reshape(vec![1, 1, d, h, w])?, ph.mask.cast().reshape(vec![1, 1, d, h, w])?))
}

fn sample_grads(
    net: &ImplantNet,
    params: &ParamStore<f32>,
    ph: &Phantom,
    teacher: bool,
) -> Result<(Vec<Tensor<f32>>, LossReport)> {
    let (vol, mask) = sample_tensors::<f32>(ph)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(vol);
    let ends = [Endpoints { apex: ph.apex, base: ph.base, degenerate: false }];
    let source = if teacher { HeatmapSource::GroundTruth(&ends) } else { HeatmapSource::Predicted };
    let out = net.forward(&mut g, &bound, x, source)?;
    let (loss, report) = net.loss(&mut g, &out, &mask, &[ph.slope.0])?;
    g.backward(loss)?;
    Ok((params.grads(&g, &bound), report))
}

/// Forward pass with predicted heatmaps and per-sample metrics.
pub fn evaluate(
    net: &ImplantNet,
    params: &ParamStore<f32>,
    samples: &[Phantom],
) -> Result<(Vec<SampleMetrics>, EvalSummary)> {
    let per: Vec<Result<SampleMetrics>> = map_range(samples.len(), |i| {
        let ph = &samples[i];
        let (vol, mask) = sample_tensors::<f32>(ph)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(vol);
        let out = net.forward(&mut g, &bound, x, HeatmapSource::Predicted)?;
        let slope = out.slope.map(|s| {
            let d = g.value(s).data();
            [d[0] as f64, d[1] as f64, d[2] as f64]
        });
        Ok(SampleMetrics::compute(g.value(out.prob).data(), mask.data(), slope, &ph.slope))
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = EvalSummary::from_samples(&per);
    Ok((per, summary))
}

/// Generates the phantoms of `records`, cropped to `extent` with a window
/// fixed by each sample's seed.
pub fn materialize(records: &[ManifestRecord], extent: usize) -> Result<Vec<Phantom>> {
    map_range(records.len(), |i| {
        let ph = records[i].generate()?;
        random_crop(&ph, extent, records[i].seed)
    })
    .into_iter()
    .collect()
}

/// Training and evaluation records selected by `cfg`.
pub fn select_records(cfg: &RunConfig, records: &[ManifestRecord]) -> (Vec<ManifestRecord>, Vec<ManifestRecord>) {
    let pick = |split: Split, limit: Option<usize>| -> Vec<ManifestRecord> {
        let it = records.iter().filter(|r| r.split == split).cloned();
        match limit {
            Some(n) => it.take(n).collect(),
            None => it.collect(),
        }
    };
    (pick(Split::Train, cfg.train_limit), pick(cfg.eval_split, cfg.eval_limit))
}

fn mean_reports(reports: &[LossReport], lambda: f64) -> LossReport {
    let n = reports.len().max(1) as f64;
    let dice = reports.iter().map(|r| r.dice_loss).sum::<f64>() / n;
    let slope = reports.iter().map(|r| r.slope_loss).sum::<f64>() / n;
    LossReport::new(dice, slope, lambda)
}

/// Trains on already materialized samples. `train` phantoms are cropped
/// again every epoch; when `checkpoint_dir` is set the best and final
/// parameters are written there.
pub fn train_on(
    cfg: &RunConfig,
    train: &[Phantom],
    eval: &[Phantom],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(contract_err!("no training samples"));
    }
    let net = ImplantNet::new(cfg.model.clone())?;
    let mut params = net.init_params::<f32>(cfg.seed)?;
    let mut adam = Adam::new(&params);
    let total = cfg.total_steps(train.len());
    let schedule = Schedule::new(cfg.lr, cfg.warmup_frac, cfg.min_lr_frac, total);
    let lambda = cfg.model.lambda_slope;
    let extent = cfg.model.input_extent;

    let mut steps = Vec::with_capacity(total);
    let mut report = MetricsReport::default();
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(epoch as u64))));
        let teacher = epoch < cfg.teacher_forcing_epochs;
        let first_step = steps.len();
        for batch in order.chunks(cfg.batch) {
            if step >= total {
                break;
            }
            let lr = schedule.at(step as f64);
            let results: Vec<Result<(Vec<Tensor<f32>>, LossReport)>> = map_range(batch.len(), |j| {
                let i = batch[j];
                let crop_seed = splitmix64(cfg.seed ^ splitmix64((epoch * train.len() + i) as u64 ^ 0x5eed));
                let ph = random_crop(&train[i], extent, crop_seed)?;
                sample_grads(&net, &params, &ph, teacher)
            });
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            let mut reports = Vec::with_capacity(batch.len());
            for r in results {
                let (g, rep) = r?;
                reports.push(rep);
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let grads: Vec<Tensor<f32>> = grads.unwrap_or_default().iter().map(|g| g.scale(scale)).collect();
            let rep = mean_reports(&reports, lambda);
            if !rep.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step, param_norms: params.norms() });
            }
            adam.step(&mut params, &grads, lr);
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                dice_loss: rep.dice_loss,
                slope_loss: rep.slope_loss,
                total: rep.total,
            });
            step += 1;
        }
        let done = step >= total || epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.eval_every == 0 || done {
            let epoch_steps: Vec<LossReport> = steps[first_step..]
                .iter()
                .map(|s| LossReport { dice_loss: s.dice_loss, slope_loss: s.slope_loss, total: s.total })
                .collect();
            let loss = mean_reports(&epoch_steps, lambda);
            let summary =
                if eval.is_empty() { EvalSummary::from_samples(&[]) } else { evaluate(&net, &params, eval)?.1 };
            report.rows.push(MetricsRow {
                epoch,
                dice_loss: loss.dice_loss,
                slope_loss: loss.slope_loss,
                total: loss.total,
                eval_dice: summary.dice,
                eval_iou: summary.iou,
                eval_slope_mae: summary.slope_mae,
                eval_angular_err_deg: summary.angular_err_deg,
                degenerate_sample_count: summary.degenerate_count,
            });
            if summary.dice > best_dice {
                best_dice = summary.dice;
                best_params = params.clone();
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(&dir.join(CHECKPOINT_BEST), &params, &cfg.model)?;
                }
            }
        }
        if done {
            break 'epochs;
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join(CHECKPOINT_FINAL), &params, &cfg.model)?;
    }
    Ok(TrainOutcome { report, steps, params, best_params, best_dice })
}

/// Reads the manifest, trains, and writes checkpoints plus metrics files
/// into `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let records = read_manifest(&cfg.manifest)?;
    let (train_recs, eval_recs) = select_records(cfg, &records);
    let train = map_range(train_recs.len(), |i| train_recs[i].generate()).into_iter().collect::<Result<Vec<_>>>()?;
    let eval = materialize(&eval_recs, cfg.model.input_extent)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("run_config.json"), serde_json::to_vec_pretty(cfg)?)?;
    let outcome = train_on(cfg, &train, &eval, Some(&cfg.output_dir))?;
    outcome.report.write_csv(&cfg.output_dir.join(METRICS_CSV))?;
    outcome.report.write_json(&cfg.output_dir.join(METRICS_JSON))?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join(STEPS_CSV))?;
    for s in &outcome.steps {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(outcome)
}

/// Sidecar describing the model a checkpoint belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, model: &ModelConfig) -> Result<()> {
    params.save(path)?;
    fs::write(
        crate::phantom::sidecar_path(path),
        serde_json::to_vec_pretty(&CheckpointMeta { model: model.clone() })?,
    )?;
    Ok(())
}

/// Loads a checkpoint and its model config. When `expected` is given it
/// must equal the stored config.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(ImplantNet, ParamStore<f32>)> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(crate::phantom::sidecar_path(path))?)?;
    if let Some(want) = expected {
        if *want != meta.model {
            return Err(Error::Integrity(format!("checkpoint was written for {:?}, expected {:?}", meta.model, want)));
        }
    }
    let net = ImplantNet::new(meta.model)?;
    let mut params = net.init_params::<f32>(0)?;
    params.load_into(path)?;
    Ok((net, params))
}
