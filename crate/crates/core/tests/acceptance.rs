//! Acceptance criteria. Runs as a plain binary so that every criterion
//! prints one `[PASS]` or `[FAIL]` line regardless of output capture.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use implantmamba::ablate::{cmd_ablate, write_csv, GRID};
use implantmamba::bench::{bench_scan, slopes, Variant};
use implantmamba::error::Error;
use implantmamba::geometry::{slope_from_endpoints, voxel_point, Point};
use implantmamba::gradsuite::cmd_gradcheck;
use implantmamba::graph::Graph;
use implantmamba::metrics::{dice, iou};
use implantmamba::net::{HeatmapSource, ImplantNet, ModelConfig};
use implantmamba::ops::loss::dice_loss_value;
use implantmamba::phantom::{generate, make_dataset, write_manifest, PhantomParams, TRAIN_FRACTION};
use implantmamba::scan::{random_inputs, scan_chunked, scan_sequential, ScanDims, DEFAULT_CHUNK};
use implantmamba::train::{cmd_train, train_on, RunConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_integrity() -> Outcome {
    let r = cmd_gradcheck();
    let checked: usize = r.entries.iter().map(|e| e.checked).sum();
    let worst = r.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<String> =
        r.failures().map(|e| format!("{} {:?} {:?}", e.name, e.error, e.failures.first())).collect();
    check(
        failed.is_empty() && r.seconds < 120.0,
        format!(
            "{} checks over {} coordinates, worst rel err {worst:.2e}, {:.1} s{}",
            r.entries.len(),
            checked,
            r.seconds,
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

fn scan_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let (mut compared, mut rejected) = (0, 0);
    for len in [1, 7, 64] {
        for chunk in [1, 3, len] {
            for seed in 0..5 {
                let dims = ScanDims { batch: 2, len, din: 3, state: 4 };
                let inputs = random_inputs::<f64>(dims, seed);
                let seq = scan_sequential(&inputs).map_err(|e| e.to_string())?;
                if chunk > len {
                    match scan_chunked(&inputs, chunk) {
                        Err(Error::Contract(_)) => rejected += 1,
                        other => return Err(format!("chunk {chunk} > L {len} was not rejected: {other:?}")),
                    }
                    continue;
                }
                let chk = scan_chunked(&inputs, chunk).map_err(|e| e.to_string())?;
                for (a, b) in seq.data().iter().zip(chk.data()) {
                    worst = worst.max((a - b).abs());
                }
                compared += 1;
            }
        }
    }
    check(
        worst < 1e-6,
        format!("max abs diff {worst:.3e} over {compared} cases, {rejected} out-of-range chunk cases rejected"),
    )
}

fn bits(m: u8) -> Vec<bool> {
    (0..8).map(|k| m >> k & 1 == 1).collect()
}

fn metric_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for a in 0..=255u8 {
        for b in 0..=255u8 {
            let inter = (a & b).count_ones();
            let union = (a | b).count_ones();
            let sizes = a.count_ones() + b.count_ones();
            let want_dice = if sizes == 0 { 1.0 } else { 2.0 * inter as f64 / sizes as f64 };
            let want_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            let (pa, pb) = (bits(a), bits(b));
            if dice(&pa, &pb) != want_dice || iou(&pa, &pb) != want_iou {
                mismatches += 1;
            }
            let fa: Vec<f64> = pa.iter().map(|&v| v as u8 as f64).collect();
            let fb: Vec<f64> = pb.iter().map(|&v| v as u8 as f64).collect();
            let soft = 1.0 - dice_loss_value(&fa, &fb, f64::MIN_POSITIVE);
            worst = worst.max((soft - 2.0 * want_iou / (1.0 + want_iou)).abs());
        }
    }
    check(
        mismatches == 0 && worst <= 1e-12,
        format!("{mismatches} dice/iou mismatches over 65536 pairs, soft dice identity max err {worst:.1e}"),
    )
}

fn identity_at_init() -> Outcome {
    let ph = generate(3, &PhantomParams::default()).map_err(|e| e.to_string())?;
    let [d, h, w] = ph.dims();
    let vol = ph.volume.reshape(vec![1, 1, d, h, w]).map_err(|e| e.to_string())?;
    let run = |cfg: ModelConfig| -> Result<(Vec<u32>, Option<Vec<u32>>), String> {
        let net = ImplantNet::new(cfg).map_err(|e| e.to_string())?;
        let params = net.init_params::<f32>(11).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = g.constant(vol.clone());
        let out = net.forward(&mut g, &b, x, HeatmapSource::Predicted).map_err(|e| e.to_string())?;
        let prob = g.value(out.prob).data().iter().map(|v| v.to_bits()).collect();
        let slope = out.slope.map(|s| g.value(s).data().iter().map(|v| v.to_bits()).collect());
        Ok((prob, slope))
    };
    let mut differing = Vec::new();
    for scp in [false, true] {
        let base = ModelConfig { mamba_enabled: [false; 4], scp_enabled: scp, ..ModelConfig::tiny() };
        let reference = run(base.clone())?;
        for subset in 1..16u8 {
            let flags = [0, 1, 2, 3].map(|k| subset >> k & 1 == 1);
            if run(ModelConfig { mamba_enabled: flags, ..base.clone() })? != reference {
                differing.push((flags, scp));
            }
        }
    }
    check(differing.is_empty(), format!("30 Mamba subsets against the plain CNN, differing: {differing:?}"))
}

fn dataset(dir: &Path, n: usize) -> std::path::PathBuf {
    let records = make_dataset(n, 7, TRAIN_FRACTION, &PhantomParams::default()).expect("dataset");
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &records).expect("manifest");
    path
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::overfit(dataset(dir.path(), 8), dir.path().join("run"));
    let start = Instant::now();
    let out = cmd_train(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let reached = out.report.rows.iter().find(|r| r.eval_dice >= 0.90).map(|r| r.epoch + 1);
    check(
        reached.is_some() && secs < 900.0,
        format!("best eval dice {:.4}, first >= 0.90 at epoch {reached:?}, {secs:.0} s", out.best_dice),
    )
}

/// Distance from `p` to segment `ab` through the cross-product form for
/// interior projections and endpoint distances otherwise.
fn oracle_distance(p: Point, a: Point, b: Point) -> f64 {
    let sub = |u: Point, v: Point| [u[0] - v[0], u[1] - v[1], u[2] - v[2]];
    let dot = |u: Point, v: Point| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let norm = |u: Point| dot(u, u).sqrt();
    let (ab, ap, bp) = (sub(b, a), sub(p, a), sub(p, b));
    if dot(ap, ab) <= 0.0 {
        return norm(ap);
    }
    if dot(bp, ab) >= 0.0 {
        return norm(bp);
    }
    let cross = [ap[1] * ab[2] - ap[2] * ab[1], ap[2] * ab[0] - ap[0] * ab[2], ap[0] * ab[1] - ap[1] * ab[0]];
    norm(cross) / norm(ab)
}

fn geometry_oracle() -> Outcome {
    let mut mask_errors = 0;
    let mut slope_err = 0.0f64;
    for seed in 0..20 {
        let ph = generate(1000 + seed, &PhantomParams::default()).map_err(|e| e.to_string())?;
        let dims = ph.dims();
        for (i, &m) in ph.mask.data().iter().enumerate() {
            let inside = oracle_distance(voxel_point(i, dims), ph.apex, ph.base) <= ph.meta.implant_radius;
            if inside != (m > 0.5) {
                mask_errors += 1;
            }
        }
        let s = slope_from_endpoints(ph.apex, ph.base).map_err(|e| e.to_string())?;
        for k in 0..3 {
            slope_err = slope_err.max((s.0[k] - ph.slope.0[k]).abs());
        }
    }
    check(
        mask_errors == 0 && slope_err <= 1e-9,
        format!("{mask_errors} mask voxels disagree over 20 phantoms, max slope diff {slope_err:.1e}"),
    )
}

/// Trainable scalars of the plain CNN with stage widths `b, 2b, 4b, 8b`,
/// summed by hand per encoder and decoder stage, plus the 1x1 head.
fn cnn_closed_form(b: usize) -> usize {
    let enc = (27 * b + 27 * b * b + 4 * b) + (162 * b * b + 8 * b) + (648 * b * b + 16 * b) + (2592 * b * b + 32 * b);
    let dec = (896 * b * b + 12 * b) + (224 * b * b + 6 * b) + (56 * b * b + 3 * b) + (28 * b * b + 30 * b);
    enc + dec + b + 1
}

fn ablation_grid() -> Outcome {
    const TABLE: [&str; 9] = ["xxxx x", "vxxx x", "vvxx x", "vvvx x", "vvvv x", "vxxx v", "vvxx v", "vvvx v", "vvvv v"];
    let mark = |b: bool| if b { 'v' } else { 'x' };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        epochs: 1,
        train_limit: Some(2),
        eval_limit: Some(2),
        seed: 5,
        ..RunConfig::new(ModelConfig::tiny(), dataset(dir.path(), 8), dir.path().join("ablate"))
    };
    let rows = cmd_ablate(&cfg).map_err(|e| e.to_string())?;
    let patterns: Vec<String> = rows
        .iter()
        .map(|r| format!("{}{}{}{} {}", mark(r.layer1), mark(r.layer2), mark(r.layer3), mark(r.layer4), mark(r.scp)))
        .collect();
    let grid_ok = patterns == TABLE && GRID.len() == 9;
    let b = cfg.model.base_channels;
    let stored = ImplantNet::new(cfg.model.cnn_baseline())
        .and_then(|n| n.init_params::<f32>(0))
        .map_err(|e| e.to_string())?
        .count();
    let row1 = rows.first().map_or(0, |r| r.params);
    let csv_path = dir.path().join("ablation.csv");
    write_csv(&rows, &csv_path).map_err(|e| e.to_string())?;
    let lines = std::fs::read_to_string(&csv_path).map_err(|e| e.to_string())?.lines().count();
    for r in &rows {
        println!("    row {} params {} dice {:.4} iou {:.4}", r.row, r.params, r.dice, r.iou);
    }
    check(
        grid_ok && row1 == cnn_closed_form(b) && stored == row1 && lines == 10,
        format!("rows {patterns:?}, row 1 params {row1} vs closed form {} vs allocated {stored}", cnn_closed_form(b)),
    )
}

fn linear_complexity() -> Outcome {
    let lens = [1 << 10, 1 << 12, 1 << 14, 1 << 16];
    let variants = [Variant::Sequential, Variant::Chunked(DEFAULT_CHUNK)];
    let rows = bench_scan(&lens, &[16], &variants, 3, 0.05).map_err(|e| e.to_string())?;
    let fits = slopes(&rows);
    let at_64k: Vec<String> =
        rows.iter().filter(|r| r.len == 1 << 16).map(|r| format!("{} {:.3e}/s", r.variant, r.elems_per_sec)).collect();
    println!("    throughput at L=65536: {}", at_64k.join(", "));
    let ok = fits.len() == 2 && fits.iter().all(|(_, _, s)| (0.8..=1.2).contains(s));
    let desc: Vec<String> = fits.iter().map(|(v, _, s)| format!("{v} {s:.3}")).collect();
    check(ok, format!("log-log slopes {}", desc.join(", ")))
}

fn param_count() -> Outcome {
    let cfg = ModelConfig::full_scale();
    let closed = cfg.param_count();
    let allocated = ImplantNet::new(cfg).and_then(|n| n.init_params::<f32>(0)).map_err(|e| e.to_string())?.count();
    check(
        closed == allocated && (5_000_000..=10_000_000).contains(&closed),
        format!("full-scale preset has {closed} parameters (allocated {allocated})"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = dataset(dir.path(), 8);
    let cfg = RunConfig {
        epochs: 5,
        train_limit: Some(4),
        eval_limit: Some(2),
        max_steps: Some(10),
        seed: 9,
        ..RunConfig::new(ModelConfig::tiny(), manifest, dir.path().join("det"))
    };
    let records = implantmamba::phantom::read_manifest(&cfg.manifest).map_err(|e| e.to_string())?;
    let (tr, ev) = implantmamba::train::select_records(&cfg, &records);
    let train: Vec<_> = tr.iter().map(|r| r.generate()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let eval = implantmamba::train::materialize(&ev, cfg.model.input_extent).map_err(|e| e.to_string())?;
    let fingerprint = || -> Result<(usize, Vec<u64>), String> {
        let out = train_on(&cfg, &train, &eval, None).map_err(|e| e.to_string())?;
        let mut fp: Vec<u64> = out
            .steps
            .iter()
            .flat_map(|s| {
                [s.step as u64, s.lr.to_bits(), s.dice_loss.to_bits(), s.slope_loss.to_bits(), s.total.to_bits()]
            })
            .collect();
        fp.extend(out.report.rows.iter().flat_map(|r| [r.eval_dice.to_bits(), r.eval_iou.to_bits()]));
        fp.extend(out.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits() as u64).collect::<Vec<_>>()));
        Ok((out.steps.len(), fp))
    };
    let ((steps, a), (_, b)) = (fingerprint()?, fingerprint()?);
    check(a == b && steps == 10, format!("{steps} steps compared, runs identical: {}", a == b))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient integrity", gradient_integrity),
        ("scan equivalence", scan_equivalence),
        ("metric oracle", metric_oracle),
        ("identity at init", identity_at_init),
        ("overfit smoke", overfit),
        ("geometry oracle", geometry_oracle),
        ("ablation grid fidelity", ablation_grid),
        ("linear complexity", linear_complexity),
        ("parameter count", param_count),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
