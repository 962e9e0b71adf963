//! Synthetic dental-arch phantoms with a ground-truth implant axis.
//!
//! Tooth-like bright ellipsoids sit on a circular arc in the axial plane.
//! One interior tooth is missing; the implant is a capsule (all points
//! within `r` of the segment `[base, apex]`) placed in that gap and tilted
//! bucco-lingually. The implant is geometry only: the volume carries no
//! implant intensity, so its position is recoverable only from the
//! neighbouring teeth.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::geometry::{segment_distance, slope_from_endpoints, Point, Slope};
use crate::params::splitmix64;
use crate::serialize::{self, AnyTensor};
use crate::tensor::Tensor;

/// Training share of the split, from 1369 training and 253 test scans.
pub const TRAIN_FRACTION: f64 = 1369.0 / 1622.0;

/// Generation settings. Per-sample randomness comes from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub extent: usize,
    pub teeth: usize,
    /// Tilt is drawn uniformly from `[0, max_tilt_deg]`; at most 30.
    pub max_tilt_deg: f64,
    pub noise_std: f64,
    pub background: f64,
    pub tooth_intensity: f64,
    /// Per-tooth intensity varies uniformly by up to this much.
    pub tooth_jitter: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            extent: 32,
            teeth: 6,
            max_tilt_deg: 30.0,
            noise_std: 0.05,
            background: 0.1,
            tooth_intensity: 0.8,
            tooth_jitter: 0.1,
        }
    }
}

impl PhantomParams {
    pub fn with_extent(extent: usize) -> Self {
        Self { extent, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || !self.extent.is_multiple_of(16) {
            return Err(contract_err!("phantom extent must be a positive multiple of 16, got {}", self.extent));
        }
        if self.teeth < 3 {
            return Err(contract_err!("need at least 3 teeth for an interior gap, got {}", self.teeth));
        }
        if !(0.0..=30.0).contains(&self.max_tilt_deg) {
            return Err(contract_err!("max_tilt_deg must lie in [0, 30], got {}", self.max_tilt_deg));
        }
        if !(self.noise_std >= 0.0) {
            return Err(contract_err!("noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// Realized generation parameters of one phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub arch_radius: f64,
    pub arch_center: [f64; 2],
    pub tooth_count: usize,
    pub gap_index: usize,
    pub implant_radius: f64,
    pub implant_length: f64,
    pub tilt_deg: f64,
    /// The drawn tilt pushed the implant out of the volume and was reduced.
    pub tilt_clamped: bool,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Intensities `[1, D, H, W]` in `[0, 1]`.
    pub volume: Tensor<f32>,
    /// Binary implant mask `[D, H, W]`.
    pub mask: Tensor<f32>,
    pub apex: Point,
    pub base: Point,
    pub slope: Slope,
    pub seed: u64,
    pub meta: PhantomMeta,
    /// Window origin `[x, y, z]` in the uncropped phantom.
    pub crop_offset: [usize; 3],
}

struct Tooth {
    center: [f64; 3],
    /// Unit radial direction in the axial plane.
    radial: [f64; 2],
    semi: [f64; 3],
    intensity: f64,
}

impl Tooth {
    fn contains(&self, p: Point) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (rx, ry) = (self.radial[0], self.radial[1]);
        let r = d[0] * rx + d[1] * ry;
        let t = -d[0] * ry + d[1] * rx;
        (r / self.semi[0]).powi(2) + (t / self.semi[1]).powi(2) + (d[2] / self.semi[2]).powi(2) <= 1.0
    }
}

fn capsule_inside(base: Point, apex: Point, r: f64, extent: usize) -> bool {
    let hi = (extent - 1) as f64;
    (0..3).all(|k| base[k].min(apex[k]) - r >= 0.0 && base[k].max(apex[k]) + r <= hi)
}

fn axis_endpoints(center: Point, radial: [f64; 2], tilt_rad: f64, length: f64) -> (Point, Point) {
    let u = [tilt_rad.sin() * radial[0], tilt_rad.sin() * radial[1], tilt_rad.cos()];
    let h = length / 2.0;
    let apex = [center[0] + h * u[0], center[1] + h * u[1], center[2] + h * u[2]];
    let base = [center[0] - h * u[0], center[1] - h * u[1], center[2] - h * u[2]];
    (apex, base)
}

/// Builds one phantom; a pure function of `(seed, params)`.
pub fn generate(seed: u64, params: &PhantomParams) -> Result<Phantom> {
    params.validate()?;
    let e = params.extent;
    let ef = e as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.teeth;

    let arch_radius = 0.36 * ef * rng.random_range(0.95..1.05);
    let arch_center = [(ef - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * ef, 0.2 * ef];
    let mid_z = (ef - 1.0) / 2.0;
    let spread = 150f64.to_radians();
    let start = 15f64.to_radians();
    let gap_index = rng.random_range(1..k - 1);

    let mut teeth = Vec::with_capacity(k);
    for i in 0..k {
        let ang = start + spread * i as f64 / (k - 1) as f64;
        let radial = [ang.cos(), ang.sin()];
        let jitter = rng.random_range(-params.tooth_jitter..=params.tooth_jitter);
        teeth.push(Tooth {
            center: [arch_center[0] + arch_radius * radial[0], arch_center[1] + arch_radius * radial[1], mid_z],
            radial,
            semi: [0.075 * ef, 0.06 * ef, 0.25 * ef],
            intensity: params.tooth_intensity + jitter,
        });
    }

    let implant_radius = 0.05 * ef;
    let implant_length = 0.4 * ef * rng.random_range(0.9..1.1);
    let gap = &teeth[gap_index];
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let radial = [sign * gap.radial[0], sign * gap.radial[1]];
    let mut tilt_deg = rng.random_range(0.0..=params.max_tilt_deg);
    let mut tilt_clamped = false;
    let (mut apex, mut base) = axis_endpoints(gap.center, radial, tilt_deg.to_radians(), implant_length);
    while !capsule_inside(base, apex, implant_radius, e) {
        tilt_clamped = true;
        tilt_deg = if tilt_deg < 0.5 { 0.0 } else { tilt_deg * 0.5 };
        (apex, base) = axis_endpoints(gap.center, radial, tilt_deg.to_radians(), implant_length);
        if tilt_deg == 0.0 && !capsule_inside(base, apex, implant_radius, e) {
            return Err(contract_err!("implant does not fit an extent-{e} volume"));
        }
    }
    let slope = slope_from_endpoints(apex, base)?;

    let noise = Normal::new(0.0, params.noise_std).map_err(|err| contract_err!("noise: {err}"))?;
    let n = e * e * e;
    let mut volume = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for idx in 0..n {
        let p = [(idx % e) as f64, ((idx / e) % e) as f64, (idx / (e * e)) as f64];
        let mut v = params.background;
        for (i, t) in teeth.iter().enumerate() {
            if i != gap_index && t.contains(p) {
                v = t.intensity;
            }
        }
        if params.noise_std > 0.0 {
            v += noise.sample(&mut rng);
        }
        volume.push(v.clamp(0.0, 1.0) as f32);
        mask.push(if segment_distance(p, base, apex) <= implant_radius { 1.0f32 } else { 0.0 });
    }

    Ok(Phantom {
        volume: Tensor::new(vec![1, e, e, e], volume)?,
        mask: Tensor::new(vec![e, e, e], mask)?,
        apex,
        base,
        slope,
        seed,
        meta: PhantomMeta {
            arch_radius,
            arch_center,
            tooth_count: k,
            gap_index,
            implant_radius,
            implant_length,
            tilt_deg,
            tilt_clamped,
            noise_std: params.noise_std,
        },
        crop_offset: [0; 3],
    })
}

impl Phantom {
    /// `[D, H, W]`.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.mask.shape();
        [s[0], s[1], s[2]]
    }

    /// Inclusive per-axis `[x, y, z]` bounds of the mask, if non-empty.
    pub fn mask_bounds(&self) -> Option<([usize; 3], [usize; 3])> {
        let [_, h, w] = self.dims();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        let mut any = false;
        for (i, &m) in self.mask.data().iter().enumerate() {
            if m > 0.5 {
                any = true;
                let c = [i % w, (i / w) % h, i / (h * w)];
                for k in 0..3 {
                    lo[k] = lo[k].min(c[k]);
                    hi[k] = hi[k].max(c[k]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Cuts the `crop³` window starting at `offset = [x, y, z]`.
    pub fn crop_at(&self, crop: usize, offset: [usize; 3]) -> Result<Phantom> {
        let [d, h, w] = self.dims();
        if offset[0] + crop > w || offset[1] + crop > h || offset[2] + crop > d {
            return Err(contract_err!("crop window {offset:?} + {crop} exceeds {:?}", [w, h, d]));
        }
        let mut vol = Vec::with_capacity(crop * crop * crop);
        let mut mask = Vec::with_capacity(crop * crop * crop);
        for z in 0..crop {
            for y in 0..crop {
                let src = ((z + offset[2]) * h + y + offset[1]) * w + offset[0];
                vol.extend_from_slice(&self.volume.data()[src..src + crop]);
                mask.extend_from_slice(&self.mask.data()[src..src + crop]);
            }
        }
        let shift = |p: Point| [p[0] - offset[0] as f64, p[1] - offset[1] as f64, p[2] - offset[2] as f64];
        Ok(Phantom {
            volume: Tensor::new(vec![1, crop, crop, crop], vol)?,
            mask: Tensor::new(vec![crop, crop, crop], mask)?,
            apex: shift(self.apex),
            base: shift(self.base),
            slope: self.slope,
            seed: self.seed,
            meta: self.meta.clone(),
            crop_offset: [0, 1, 2].map(|k| self.crop_offset[k] + offset[k]),
        })
    }
}

/// Crops a `crop³` window chosen uniformly among those containing the
/// whole mask.
pub fn random_crop(phantom: &Phantom, crop: usize, rng_seed: u64) -> Result<Phantom> {
    let [d, h, w] = phantom.dims();
    if crop == 0 || !crop.is_multiple_of(16) || crop > d.min(h).min(w) {
        return Err(contract_err!("crop {crop} must be a multiple of 16 no larger than {:?}", [d, h, w]));
    }
    let ext = [w, h, d];
    let (lo, hi) = phantom.mask_bounds().unwrap_or(([0; 3], [0; 3]));
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut offset = [0; 3];
    for k in 0..3 {
        let min = (hi[k] + 1).saturating_sub(crop);
        let max = lo[k].min(ext[k] - crop);
        if min > max {
            return Err(contract_err!("mask extent {}..={} does not fit a {crop} window on axis {k}", lo[k], hi[k]));
        }
        offset[k] = rng.random_range(min..=max);
    }
    phantom.crop_at(crop, offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub params: PhantomParams,
}

impl ManifestRecord {
    pub fn generate(&self) -> Result<Phantom> {
        generate(self.seed, &self.params)
    }
}

/// Per-sample seed derived from the master seed and the sample index.
pub fn sample_seed(master_seed: u64, index: usize) -> u64 {
    splitmix64(splitmix64(master_seed) ^ index as u64)
}

/// Number of training samples among `n`.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    (n as f64 * train_fraction).round() as usize
}

/// Seeds and split assignment of `n` phantoms; the first
/// `round(n * train_fraction)` indices are training samples.
pub fn make_dataset(
    n: usize,
    master_seed: u64,
    train_fraction: f64,
    params: &PhantomParams,
) -> Result<Vec<ManifestRecord>> {
    if n < 2 {
        return Err(contract_err!("a dataset needs at least 2 samples, got {n}"));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(contract_err!("train fraction {train_fraction} outside [0, 1]"));
    }
    params.validate()?;
    let n_train = train_count(n, train_fraction);
    Ok((0..n)
        .map(|index| ManifestRecord {
            index,
            seed: sample_seed(master_seed, index),
            split: if index < n_train { Split::Train } else { Split::Test },
            params: params.clone(),
        })
        .collect())
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::io::BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// JSON sidecar of an exported phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    apex: Point,
    base: Point,
    slope: Slope,
    seed: u64,
    meta: PhantomMeta,
    crop_offset: [usize; 3],
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the container (`volume`, `mask`) to `path` and the annotations
/// to `path.json`.
pub fn export_volume(phantom: &Phantom, path: &Path) -> Result<()> {
    let volume = AnyTensor::F32(phantom.volume.clone());
    let mask = AnyTensor::F32(phantom.mask.clone());
    serialize::save(path, [("volume", &volume), ("mask", &mask)])?;
    let side = Sidecar {
        apex: phantom.apex,
        base: phantom.base,
        slope: phantom.slope,
        seed: phantom.seed,
        meta: phantom.meta.clone(),
        crop_offset: phantom.crop_offset,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

/// Reads a phantom written by [`export_volume`], re-deriving the slope from
/// the stored endpoints.
pub fn import_volume(path: &Path) -> Result<Phantom> {
    let entries = serialize::load(path)?;
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let find = |name: &str| -> Result<Tensor<f32>> {
        match entries.iter().find(|(n, _)| n == name) {
            Some((_, AnyTensor::F32(t))) => Ok(t.clone()),
            Some(_) => Err(Error::Integrity(format!("entry {name} is not f32"))),
            None => Err(Error::Integrity(format!("missing entry {name}"))),
        }
    };
    let volume = find("volume")?;
    let mask = find("mask")?;
    let (vs, ms) = (volume.shape(), mask.shape());
    if vs.len() != 4 || vs[0] != 1 || vs[1..] != *ms {
        return Err(Error::Integrity(format!("volume {vs:?} and mask {ms:?} disagree")));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Integrity("mask is not binary".into()));
    }
    let derived = slope_from_endpoints(side.apex, side.base)?;
    let diff = (0..3).map(|k| (derived.0[k] - side.slope.0[k]).abs()).fold(0.0, f64::max);
    if diff > 1e-12 {
        return Err(Error::Integrity(format!(
            "stored slope {:?} does not match endpoints (expected {:?})",
            side.slope.0, derived.0
        )));
    }
    Ok(Phantom {
        volume,
        mask,
        apex: side.apex,
        base: side.base,
        slope: side.slope,
        seed: side.seed,
        meta: side.meta,
        crop_offset: side.crop_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let p = PhantomParams::default();
        assert_eq!(generate(42, &p).unwrap(), generate(42, &p).unwrap());
        assert_ne!(generate(42, &p).unwrap().volume, generate(43, &p).unwrap().volume);
    }

    #[test]
    fn untilted_slope_is_vertical() {
        let p = PhantomParams { max_tilt_deg: 0.0, ..Default::default() };
        assert_eq!(generate(7, &p).unwrap().slope.0, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn implant_site_is_background() {
        let p = PhantomParams { noise_std: 0.0, ..Default::default() };
        for seed in 0..10 {
            let ph = generate(seed, &p).unwrap();
            let mut fg = 0;
            for (&m, &v) in ph.mask.data().iter().zip(ph.volume.data()) {
                if m == 1.0 {
                    fg += 1;
                    assert_eq!(v as f64, p.background as f32 as f64, "seed {seed}");
                }
            }
            assert!(fg > 10);
            assert!(ph.meta.implant_length >= 4.0 * ph.meta.implant_radius);
        }
    }

    #[test]
    fn split_counts() {
        let m = make_dataset(100, 1, TRAIN_FRACTION, &PhantomParams::default()).unwrap();
        assert_eq!(m.iter().filter(|r| r.split == Split::Train).count(), 84);
        assert_eq!(m.iter().filter(|r| r.split == Split::Test).count(), 16);
        assert!(make_dataset(1, 1, TRAIN_FRACTION, &PhantomParams::default()).is_err());
    }

    #[test]
    fn full_crop_is_identity() {
        let ph = generate(3, &PhantomParams::default()).unwrap();
        assert_eq!(random_crop(&ph, 32, 9).unwrap(), ph);
    }

    #[test]
    fn crop_too_small_for_mask() {
        let ph = generate(3, &PhantomParams::with_extent(48)).unwrap();
        assert!(matches!(random_crop(&ph, 16, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ph.imtn");
        let ph = generate(5, &PhantomParams::default()).unwrap();
        export_volume(&ph, &path).unwrap();
        assert_eq!(import_volume(&path).unwrap(), ph);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(import_volume(&path), Err(Error::Format { .. })));
        fs::write(&path, &bytes).unwrap();

        let side = sidecar_path(&path);
        let mut json: serde_json::Value = serde_json::from_slice(&fs::read(&side).unwrap()).unwrap();
        json["slope"] = serde_json::json!([1.0, 0.0, 0.0]);
        fs::write(&side, serde_json::to_vec(&json).unwrap()).unwrap();
        assert!(matches!(import_volume(&path), Err(Error::Integrity(_))));
    }
}
