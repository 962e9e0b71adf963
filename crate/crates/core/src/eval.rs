//! Checkpoint evaluation over a manifest split.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{EvalSummary, SampleMetrics};
use crate::net::ModelConfig;
use crate::phantom::{read_manifest, Split};
use crate::train::{evaluate, load_checkpoint, materialize};

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SAMPLES_CSV: &str = "eval_samples.csv";
pub const EVAL_JSON: &str = "eval.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub summary: EvalSummary,
    /// `(manifest index, metrics)` per sample.
    pub samples: Vec<(usize, SampleMetrics)>,
}

#[derive(Serialize)]
struct SummaryRow {
    split: Split,
    samples: usize,
    dice: f64,
    iou: f64,
    slope_mae: Option<f64>,
    angular_err_deg: Option<f64>,
    degenerate_sample_count: usize,
}

#[derive(Serialize)]
struct SampleRow {
    index: usize,
    dice: f64,
    iou: f64,
    slope_mae: Option<f64>,
    angular_err_deg: Option<f64>,
    degenerate: bool,
}

impl EvalReport {
    /// Writes `eval.csv`, `eval_samples.csv` and `eval.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let s = &self.summary;
        let mut w = csv::Writer::from_path(dir.join(EVAL_CSV))?;
        w.serialize(SummaryRow {
            split: self.split,
            samples: s.samples,
            dice: s.dice,
            iou: s.iou,
            slope_mae: s.slope_mae,
            angular_err_deg: s.angular_err_deg,
            degenerate_sample_count: s.degenerate_count,
        })?;
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join(EVAL_SAMPLES_CSV))?;
        for (index, m) in &self.samples {
            w.serialize(SampleRow {
                index: *index,
                dice: m.dice,
                iou: m.iou,
                slope_mae: m.slope_mae,
                angular_err_deg: m.angular_err_deg,
                degenerate: m.degenerate,
            })?;
        }
        w.flush()?;
        fs::write(dir.join(EVAL_JSON), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Evaluates `checkpoint` on every `split` sample of the manifest, cropped
/// to the model's input extent. `expected` guards against evaluating with
/// the wrong architecture.
pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
    expected: Option<&ModelConfig>,
) -> Result<EvalReport> {
    let (net, params) = load_checkpoint(checkpoint, expected)?;
    let records: Vec<_> = read_manifest(manifest)?.into_iter().filter(|r| r.split == split).collect();
    let samples = materialize(&records, net.config.input_extent)?;
    let (per, summary) = evaluate(&net, &params, &samples)?;
    Ok(EvalReport { split, summary, samples: records.iter().map(|r| r.index).zip(per).collect() })
}
