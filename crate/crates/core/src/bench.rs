//! Scan throughput measurement and the linear-complexity diagnostic.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::error::{contract_err, Error, Result};
use crate::scan::{random_inputs, scan_chunked, scan_sequential, ScanDims, ScanMode, DEFAULT_CHUNK};

/// Channels per benchmarked sequence.
pub const BENCH_DIN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Sequential,
    Chunked(usize),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Sequential => "sequential".into(),
            Variant::Chunked(c) => format!("chunked{c}"),
        }
    }

    pub fn mode(&self) -> ScanMode {
        match *self {
            Variant::Sequential => ScanMode::Sequential,
            Variant::Chunked(c) => ScanMode::Chunked(c),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `sequential`, `chunked` (default chunk) or `chunked<N>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Variant::Sequential),
            "chunked" => Ok(Variant::Chunked(DEFAULT_CHUNK)),
            _ => s
                .strip_prefix("chunked")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(Variant::Chunked)
                .ok_or_else(|| contract_err!("unknown scan variant {s:?}")),
        }
    }
}

/// One CSV row; column order is the schema.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub variant: String,
    #[serde(rename = "L")]
    pub len: usize,
    #[serde(rename = "N")]
    pub state: usize,
    pub elems_per_sec: f64,
    #[serde(skip)]
    pub seconds: f64,
}

/// Best-of-`reps` wall time of one forward scan, each repetition looping
/// until at least `min_secs` have elapsed.
pub fn time_scan(variant: Variant, len: usize, state: usize, reps: usize, min_secs: f64) -> Result<f64> {
    let dims = ScanDims { batch: 1, len, din: BENCH_DIN, state };
    let inputs = random_inputs::<f64>(dims, 7);
    let run = || match variant {
        Variant::Sequential => scan_sequential(&inputs),
        Variant::Chunked(c) => scan_chunked(&inputs, c.min(len)),
    };
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let mut iters = 0u32;
        loop {
            std::hint::black_box(run()?);
            iters += 1;
            if start.elapsed().as_secs_f64() >= min_secs {
                break;
            }
        }
        best = best.min(start.elapsed().as_secs_f64() / iters as f64);
    }
    Ok(best)
}

/// Measures every `(variant, L, N)` combination. Throughput counts state
/// updates: `L * BENCH_DIN * N` per scan.
pub fn bench_scan(
    lens: &[usize],
    states: &[usize],
    variants: &[Variant],
    reps: usize,
    min_secs: f64,
) -> Result<Vec<BenchRow>> {
    if lens.is_empty() || states.is_empty() || variants.is_empty() || lens.contains(&0) || states.contains(&0) {
        return Err(contract_err!("bench-scan needs nonempty, positive L and N lists and at least one variant"));
    }
    let mut rows = Vec::new();
    for &v in variants {
        for &n in states {
            for &l in lens {
                let secs = time_scan(v, l, n, reps, min_secs)?;
                rows.push(BenchRow {
                    variant: v.name(),
                    len: l,
                    state: n,
                    elems_per_sec: (l * BENCH_DIN * n) as f64 / secs,
                    seconds: secs,
                });
            }
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln(seconds)` against `ln(L)`.
pub fn loglog_slope(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Fitted slope per `(variant, N)` group.
pub fn slopes(rows: &[BenchRow]) -> Vec<(String, usize, f64)> {
    let mut keys: Vec<(String, usize)> = rows.iter().map(|r| (r.variant.clone(), r.state)).collect();
    keys.dedup();
    keys.into_iter()
        .filter_map(|(v, n)| {
            let pts: Vec<(usize, f64)> =
                rows.iter().filter(|r| r.variant == v && r.state == n).map(|r| (r.len, r.seconds)).collect();
            loglog_slope(&pts).map(|s| (v, n, s))
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
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
    fn slope_of_exact_power_laws() {
        let lin: Vec<(usize, f64)> = [1000, 4000, 16000].iter().map(|&l| (l, 3e-9 * l as f64)).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-12);
        let quad: Vec<(usize, f64)> = [10, 20, 40].iter().map(|&l| (l, (l * l) as f64)).collect();
        assert!((loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&lin[..1]).is_none());
    }

    #[test]
    fn variants_parse() {
        assert_eq!("sequential".parse::<Variant>().unwrap(), Variant::Sequential);
        assert_eq!("chunked".parse::<Variant>().unwrap(), Variant::Chunked(DEFAULT_CHUNK));
        assert_eq!("chunked16".parse::<Variant>().unwrap(), Variant::Chunked(16));
        assert!("chunked0".parse::<Variant>().is_err());
        assert!("parallel".parse::<Variant>().is_err());
    }

    #[test]
    fn csv_header() {
        let rows = bench_scan(&[8, 16], &[2], &[Variant::Sequential, Variant::Chunked(4)], 1, 0.0).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("variant,L,N,elems_per_sec\n"));
        assert_eq!(text.lines().count(), 5);
        assert_eq!(slopes(&rows).len(), 2);
    }
}
