//! The Conv-Mamba placement by SCP ablation grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::net::ModelConfig;
use crate::phantom::read_manifest;
use crate::train::{materialize, select_records, train_on, RunConfig};

pub const ABLATION_CSV: &str = "ablation.csv";

/// `(Mamba block in stages 1..4, SCP)` of the nine ablation rows, in table
/// order: cumulative block placements without SCP, then with SCP.
pub const GRID: [([bool; 4], bool); 9] = [
    ([false, false, false, false], false),
    ([true, false, false, false], false),
    ([true, true, false, false], false),
    ([true, true, true, false], false),
    ([true, true, true, true], false),
    ([true, false, false, false], true),
    ([true, true, false, false], true),
    ([true, true, true, false], true),
    ([true, true, true, true], true),
];

/// One table row; column order is the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub layer1: bool,
    pub layer2: bool,
    pub layer3: bool,
    pub layer4: bool,
    pub scp: bool,
    pub params: usize,
    pub dice: f64,
    pub iou: f64,
}

/// `base` with the ablation flags of a grid row.
pub fn row_config(base: &ModelConfig, layers: [bool; 4], scp: bool) -> ModelConfig {
    ModelConfig { mamba_enabled: layers, scp_enabled: scp, ..base.clone() }
}

/// Trains and evaluates every grid row with the same seed and data.
pub fn cmd_ablate(base: &RunConfig) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let records = read_manifest(&base.manifest)?;
    let (train_recs, eval_recs) = select_records(base, &records);
    let train = crate::parallel::map_range(train_recs.len(), |i| train_recs[i].generate())
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let eval = materialize(&eval_recs, base.model.input_extent)?;
    let mut rows = Vec::with_capacity(GRID.len());
    for (i, (layers, scp)) in GRID.into_iter().enumerate() {
        let cfg = RunConfig { model: row_config(&base.model, layers, scp), ..base.clone() };
        let outcome = train_on(&cfg, &train, &eval, None)?;
        let last = outcome.report.last().copied();
        rows.push(AblationRow {
            row: i + 1,
            layer1: layers[0],
            layer2: layers[1],
            layer3: layers[2],
            layer4: layers[3],
            scp,
            params: cfg.model.param_count(),
            dice: last.map_or(f64::NAN, |r| r.eval_dice),
            iou: last.map_or(f64::NAN, |r| r.eval_iou),
        });
    }
    Ok(rows)
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_cumulative_placement_times_scp() {
        let distinct: std::collections::BTreeSet<_> = GRID.iter().collect();
        assert_eq!(distinct.len(), 9);
        for (layers, _) in GRID {
            let k = layers.iter().filter(|&&b| b).count();
            assert!(layers[..k].iter().all(|&b| b), "{layers:?} is not a prefix placement");
        }
        assert_eq!(GRID.iter().filter(|(_, scp)| *scp).count(), 4);
    }

    #[test]
    fn first_row_is_the_plain_cnn() {
        let base = ModelConfig::tiny();
        let (layers, scp) = GRID[0];
        let cfg = row_config(&base, layers, scp);
        assert_eq!(cfg, ModelConfig { scp_enabled: false, ..base.cnn_baseline() });
    }
}
