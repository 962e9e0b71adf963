//! Implant axis geometry: slopes, endpoint extraction and heatmaps.
//!
//! Points are `[x, y, z]` in voxel units, with voxel `[d, h, w]` of a
//! `[D, H, W]` volume centered at `x = w, y = h, z = d`.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type Point = [f64; 3];

/// Unit axis direction from base to apex with a canonical sign: first
/// nonzero component among `z`, `y`, `x` is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slope(pub [f64; 3]);

impl Slope {
    /// Normalizes and canonicalizes `v`.
    pub fn from_vector(v: [f64; 3]) -> Result<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateGeometry(format!("cannot normalize {v:?}")));
        }
        Ok(Self(canonical_sign(v.map(|c| c / norm))))
    }

    pub fn vector(&self) -> [f64; 3] {
        self.0
    }

    /// Angle in degrees between this slope and the normalized prediction,
    /// ignoring orientation sign.
    pub fn angular_error_deg(&self, pred: [f64; 3]) -> Option<f64> {
        let p = Slope::from_vector(pred).ok()?;
        let dot: f64 = self.0.iter().zip(p.0).map(|(a, b)| a * b).sum();
        Some(dot.clamp(-1.0, 1.0).acos().to_degrees())
    }
}

/// Flips `v` so that its first nonzero component among z, y, x is positive.
pub fn canonical_sign(v: [f64; 3]) -> [f64; 3] {
    let lead = [v[2], v[1], v[0]].into_iter().find(|&c| c != 0.0).unwrap_or(0.0);
    if lead < 0.0 {
        v.map(|c| -c)
    } else {
        v
    }
}

pub fn slope_from_endpoints(apex: Point, base: Point) -> Result<Slope> {
    if apex == base {
        return Err(Error::DegenerateGeometry(format!("apex and base coincide at {apex:?}")));
    }
    Slope::from_vector([apex[0] - base[0], apex[1] - base[1], apex[2] - base[2]])
}

/// Orders two endpoints so that `apex - base` has canonical sign.
pub fn orient(p: Point, q: Point) -> (Point, Point) {
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    if canonical_sign(d) == d {
        (p, q)
    } else {
        (q, p)
    }
}

pub fn voxel_point(index: usize, dims: [usize; 3]) -> Point {
    let [_, h, w] = dims;
    [(index % w) as f64, ((index / w) % h) as f64, (index / (h * w)) as f64]
}

/// Apex and base of a foreground set: the voxels with extreme projections
/// onto the principal axis of the foreground coordinates. Ties go to the
/// smallest linear index.
///
/// Fewer than two foreground voxels is a [`Error::DegenerateGeometry`].
pub fn extract_endpoints(mask: &[bool], dims: [usize; 3]) -> Result<(Point, Point)> {
    let fg: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if fg.len() < 2 {
        return Err(Error::DegenerateGeometry(format!("{} foreground voxels", fg.len())));
    }
    let pts: Vec<Vector3<f64>> = fg.iter().map(|&i| Vector3::from(voxel_point(i, dims))).collect();
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let cov = pts.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let top = eig.eigenvalues.imax();
    let axis = eig.eigenvectors.column(top).into_owned();
    let (mut lo, mut hi) = (0usize, 0usize);
    let proj: Vec<f64> = pts.iter().map(|p| (p - mean).dot(&axis)).collect();
    for (k, &v) in proj.iter().enumerate() {
        if v < proj[lo] {
            lo = k;
        }
        if v > proj[hi] {
            hi = k;
        }
    }
    Ok(orient(voxel_point(fg[hi], dims), voxel_point(fg[lo], dims)))
}

/// Endpoints read from a soft prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Endpoints {
    pub apex: Point,
    pub base: Point,
    /// True when the thresholded mask had fewer than two voxels and the
    /// two most probable voxels were used instead.
    pub degenerate: bool,
}

/// Thresholds `prob` (`> threshold` is foreground) and extracts endpoints,
/// falling back to the two highest-probability voxels.
pub fn endpoints_from_prob<T: Scalar>(prob: &[T], dims: [usize; 3], threshold: f64) -> Endpoints {
    let mask: Vec<bool> = prob.iter().map(|p| p.as_f64() > threshold).collect();
    if let Ok((apex, base)) = extract_endpoints(&mask, dims) {
        return Endpoints { apex, base, degenerate: false };
    }
    let mut order: Vec<usize> = (0..prob.len()).collect();
    // stable sort keeps smaller indices first among equal probabilities
    order.sort_by(|&a, &b| prob[b].as_f64().total_cmp(&prob[a].as_f64()));
    let (apex, base) = orient(voxel_point(order[0], dims), voxel_point(order[1], dims));
    Endpoints { apex, base, degenerate: true }
}

/// Maps a full-resolution point to the nearest voxel of a coarser grid
/// (half-pixel convention), clamped inside the grid.
pub fn to_grid(p: Point, full: [usize; 3], grid: [usize; 3]) -> Point {
    let axes = [2, 1, 0];
    let mut q = [0.0; 3];
    for (c, &ax) in axes.iter().enumerate() {
        let scale = full[ax] as f64 / grid[ax] as f64;
        q[c] = ((p[c] + 0.5) / scale - 0.5).round().clamp(0.0, (grid[ax] - 1) as f64);
    }
    q
}

/// Two isotropic Gaussians of peak 1 and std `sigma`, combined by max.
pub fn render_heatmap<T: Scalar>(peaks: [Point; 2], sigma: f64, grid: [usize; 3]) -> Tensor<T> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    Tensor::from_fn(grid.to_vec(), |i| {
        let v = voxel_point(i, grid);
        let g = |p: Point| {
            let d2: f64 = (0..3).map(|k| (v[k] - p[k]) * (v[k] - p[k])).sum();
            (-d2 * inv).exp()
        };
        T::from_f64(g(peaks[0]).max(g(peaks[1])))
    })
}

/// Heatmaps of a batch, `[N, 1, D', H', W']`, with the grid peaks used.
#[derive(Debug, Clone)]
pub struct Heatmap<T: Scalar> {
    pub h: Tensor<T>,
    pub peaks: Vec<[Point; 2]>,
    pub degenerate: Vec<bool>,
}

/// Builds heatmaps from full-resolution endpoints of each sample.
pub fn heatmap_from_endpoints<T: Scalar>(
    ends: &[Endpoints],
    full: [usize; 3],
    grid: [usize; 3],
    sigma: f64,
) -> Heatmap<T> {
    let gv: usize = grid.iter().product();
    let mut data = Vec::with_capacity(ends.len() * gv);
    let mut peaks = Vec::with_capacity(ends.len());
    for e in ends {
        let pk = [to_grid(e.apex, full, grid), to_grid(e.base, full, grid)];
        data.extend_from_slice(render_heatmap::<T>(pk, sigma, grid).data());
        peaks.push(pk);
    }
    Heatmap {
        h: Tensor::from_parts(vec![ends.len(), 1, grid[0], grid[1], grid[2]], data),
        peaks,
        degenerate: ends.iter().map(|e| e.degenerate).collect(),
    }
}

/// Thresholds a `[N, 1, D, H, W]` probability map, extracts endpoints per
/// sample and renders them on `grid`.
pub fn heatmap_generate<T: Scalar>(prob: &Tensor<T>, threshold: f64, sigma: f64, grid: [usize; 3]) -> Heatmap<T> {
    let s = prob.shape();
    let full = [s[2], s[3], s[4]];
    let vol: usize = full.iter().product();
    let ends: Vec<Endpoints> = prob.data().chunks(vol).map(|p| endpoints_from_prob(p, full, threshold)).collect();
    heatmap_from_endpoints(&ends, full, grid, sigma)
}

/// Point-to-segment distance.
pub fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 { (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum::<f64>().sqrt()
}
