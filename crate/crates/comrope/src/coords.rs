//! Coordinate pipeline: relative scaling onto the unit canvas, patch-center
//! assignment, training-time position perturbation, and the global-offset
//! injection used by the offset ablation.
//!
//! All randomness flows through an explicitly seeded generator; callers own
//! the sampling schedule (perturbations are drawn fresh on every call).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ropefamily::Coordinate;

/// Canvas extent per axis, in raw units (pixels, frames, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasShape(Vec<f64>);

impl CanvasShape {
    pub fn new(extents: Vec<f64>) -> Result<Self> {
        if extents.is_empty() {
            return Err(Error::InvalidArgument(
                "canvas needs at least one axis".into(),
            ));
        }
        if extents.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::InvalidArgument(
                "canvas extents must be positive and finite".into(),
            ));
        }
        Ok(Self(extents))
    }

    pub fn axes(&self) -> usize {
        self.0.len()
    }

    pub fn extents(&self) -> &[f64] {
        &self.0
    }
}

/// A canvas partitioned into equal patches; every extent must be an exact
/// integer multiple of the patch size along its axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    canvas: CanvasShape,
    patch_size: Vec<f64>,
    counts: Vec<usize>,
}

impl PatchGrid {
    pub fn new(canvas: CanvasShape, patch_size: Vec<f64>) -> Result<Self> {
        if patch_size.len() != canvas.axes() {
            return Err(Error::DimensionMismatch(format!(
                "{} patch sizes against {} canvas axes",
                patch_size.len(),
                canvas.axes()
            )));
        }
        if patch_size.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::InvalidArgument(
                "patch sizes must be positive and finite".into(),
            ));
        }
        let mut counts = Vec::with_capacity(canvas.axes());
        for (x, dx) in canvas.extents().iter().zip(&patch_size) {
            let count = (x / dx).round();
            if count < 1.0 || count * dx != *x {
                return Err(Error::InvalidArgument(format!(
                    "extent {x} is not an integer multiple of patch size {dx}"
                )));
            }
            counts.push(count as usize);
        }
        Ok(Self {
            canvas,
            patch_size,
            counts,
        })
    }

    pub fn canvas(&self) -> &CanvasShape {
        &self.canvas
    }

    pub fn patch_size(&self) -> &[f64] {
        &self.patch_size
    }

    /// Patches per axis.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total_patches(&self) -> usize {
        self.counts.iter().product()
    }

    /// Half patch extent in relative units: `ΔX_k / (2 X_k)`.
    fn half_extent_rel(&self, axis: usize) -> f64 {
        self.patch_size[axis] / (2.0 * self.canvas.extents()[axis])
    }
}

/// Perturbation intensity σ for the truncated Gaussian jitter applied to
/// patch centers during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub sigma: f64,
    pub seed: u64,
}

impl PerturbConfig {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "perturbation intensity must be non-negative, got {sigma}"
            )));
        }
        Ok(Self { sigma, seed })
    }
}

/// Standard deviation ρ of the random offset applied uniformly across all
/// coordinates in the offset-invariance ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetConfig {
    pub rho: f64,
    pub seed: u64,
}

impl OffsetConfig {
    pub fn new(rho: f64, seed: u64) -> Result<Self> {
        if !rho.is_finite() || rho < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "offset deviation must be non-negative, got {rho}"
            )));
        }
        Ok(Self { rho, seed })
    }
}

/// Maps a raw position to relative coordinates: component k is
/// `raw_k / X_k`, so the canvas extent lands on 1 exactly.
pub fn relative_scale(raw: &[f64], canvas: &CanvasShape) -> Result<Coordinate> {
    if raw.len() != canvas.axes() {
        return Err(Error::CoordinateLength {
            got: raw.len(),
            expected: canvas.axes(),
        });
    }
    Coordinate::new(
        raw.iter()
            .zip(canvas.extents())
            .map(|(r, x)| r / x)
            .collect(),
    )
}

/// One relative coordinate per patch, in row-major order with the first
/// axis outermost. The center of patch index (p₁..p_N) along axis k is
/// `(p_k + ½) · ΔX_k / X_k`.
pub fn patch_centers(grid: &PatchGrid) -> Vec<Coordinate> {
    let axes = grid.canvas.axes();
    let total = grid.total_patches();
    let mut centers = Vec::with_capacity(total);
    let mut index = vec![0usize; axes];
    for _ in 0..total {
        let values: Vec<f64> = (0..axes)
            .map(|k| (index[k] as f64 + 0.5) * grid.patch_size[k] / grid.canvas.extents()[k])
            .collect();
        centers.push(Coordinate::new(values).expect("finite center"));
        // Row-major increment: last axis fastest.
        for k in (0..axes).rev() {
            index[k] += 1;
            if index[k] < grid.counts[k] {
                break;
            }
            index[k] = 0;
        }
    }
    centers
}

/// Jitters each patch center by axis-independent Gaussian noise with
/// standard deviation `σ·ΔX_k/X_k`, clamped to the patch interval
/// `[center ± ΔX_k/(2X_k)]`. σ = 0 returns the input unchanged.
pub fn perturb(
    centers: &[Coordinate],
    grid: &PatchGrid,
    cfg: &PerturbConfig,
) -> Result<Vec<Coordinate>> {
    let axes = grid.canvas.axes();
    if cfg.sigma == 0.0 {
        return Ok(centers.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normals: Vec<Normal<f64>> = (0..axes)
        .map(|k| {
            let std = cfg.sigma * grid.patch_size[k] / grid.canvas.extents()[k];
            Normal::new(0.0, std)
                .map_err(|_| Error::InvalidArgument("invalid perturbation width".into()))
        })
        .collect::<Result<_>>()?;

    centers
        .iter()
        .map(|center| {
            if center.len() != axes {
                return Err(Error::CoordinateLength {
                    got: center.len(),
                    expected: axes,
                });
            }
            let values = (0..axes)
                .map(|k| {
                    let half = grid.half_extent_rel(k);
                    let c = center[k];
                    (c + normals[k].sample(&mut rng)).clamp(c - half, c + half)
                })
                .collect();
            Coordinate::new(values)
        })
        .collect()
}

/// Draws a single offset `t ~ N(0, ρ²·I)` and adds it to every coordinate.
/// Returns the shifted coordinates together with the offset itself so runs
/// can be reproduced. ρ = 0 leaves the input untouched and returns a zero
/// offset.
pub fn global_offset(
    coords: &[Coordinate],
    axes: usize,
    cfg: &OffsetConfig,
) -> Result<(Vec<Coordinate>, Coordinate)> {
    if cfg.rho == 0.0 {
        return Ok((coords.to_vec(), Coordinate::zeros(axes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.rho)
        .map_err(|_| Error::InvalidArgument("invalid offset deviation".into()))?;
    let offset = Coordinate::new((0..axes).map(|_| normal.sample(&mut rng)).collect())?;
    let shifted = coords
        .iter()
        .map(|c| c.add(&offset))
        .collect::<Result<Vec<_>>>()?;
    Ok((shifted, offset))
}

/// CSV dump of coordinates: header `x1,...,xN`, one row per token.
pub fn coords_to_csv(coords: &[Coordinate], axes: usize) -> String {
    let mut out = String::new();
    let header: Vec<String> = (1..=axes).map(|k| format!("x{k}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for c in coords {
        let row: Vec<String> = c.values().iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
