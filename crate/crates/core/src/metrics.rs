//! Saliency metrics (KLD, SIM, NSS) and ground-truth heatmaps built from
//! annotated points.
//!
//! Definitions follow the common saliency-benchmark conventions:
//!
//! * KLD = Σ g·ln(g / (p + ε) + ε) over sum-normalised maps, ε = 1e-12
//! * SIM = Σ min(p, g) over sum-normalised maps
//! * NSS = mean z-score of the prediction at fixation pixels, std guarded by ε

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Map2;

pub const METRIC_EPS: f64 = 1e-12;

/// KLD, SIM and NSS for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricTriple {
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

impl MetricTriple {
    pub fn mean(items: &[MetricTriple]) -> Option<MetricTriple> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(MetricTriple {
            kld: items.iter().map(|m| m.kld).sum::<f64>() / n,
            sim: items.iter().map(|m| m.sim).sum::<f64>() / n,
            nss: items.iter().map(|m| m.nss).sum::<f64>() / n,
        })
    }
}

fn check_pair(pred: &Map2, gt: &Map2) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// Divides by the sum; rejects negative, non-finite or all-zero maps.
fn sum_normalized(map: &Map2, what: &str) -> Result<Vec<f64>> {
    if map.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input(format!("{what} must be finite and non-negative")));
    }
    let total = map.sum();
    if total <= 0.0 {
        return Err(Error::Input(format!("{what} has no positive entry")));
    }
    Ok(map.as_slice().iter().map(|v| v / (total + METRIC_EPS)).collect())
}

pub fn kld(pred: &Map2, gt: &Map2) -> Result<f64> {
    check_pair(pred, gt)?;
    let p = sum_normalized(pred, "prediction")?;
    let g = sum_normalized(gt, "ground truth")?;
    Ok(g.iter()
        .zip(&p)
        .map(|(&g, &p)| g * libm::log(g / (p + METRIC_EPS) + METRIC_EPS))
        .sum())
}

pub fn sim(pred: &Map2, gt: &Map2) -> Result<f64> {
    check_pair(pred, gt)?;
    let p = sum_normalized(pred, "prediction")?;
    let g = sum_normalized(gt, "ground truth")?;
    Ok(p.iter().zip(&g).map(|(a, b)| a.min(*b)).sum())
}

/// `fixations` are `(x, y)` pixel coordinates: column then row.
pub fn nss(pred: &Map2, fixations: &[(usize, usize)]) -> Result<f64> {
    if fixations.is_empty() {
        return Err(Error::Input("NSS needs at least one fixation".into()));
    }
    let (h, w) = pred.shape();
    if let Some(&(x, y)) = fixations.iter().find(|&&(x, y)| x >= w || y >= h) {
        return Err(Error::Input(format!("fixation ({x}, {y}) outside {w}x{h} map")));
    }
    let first = pred.as_slice()[0];
    if pred.as_slice().iter().all(|&v| v == first) {
        return Ok(0.0);
    }
    let n = pred.len() as f64;
    let mean = pred.mean();
    let var = pred.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    let total: f64 = fixations.iter().map(|&(x, y)| (pred.get(y, x) - mean) / (std + METRIC_EPS)).sum();
    Ok(total / fixations.len() as f64)
}

/// Fixation density made from annotated points.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthHeatmap {
    pub density: Map2,
    pub fixation_points: Vec<(usize, usize)>,
}

impl GroundTruthHeatmap {
    /// Wraps a pre-rendered heatmap, sum-normalising it. Fixations are the
    /// pixels holding the maximum value.
    pub fn from_density(map: Map2) -> Result<Self> {
        let values = sum_normalized(&map, "heatmap")?;
        let (h, w) = map.shape();
        let density = Map2::from_vec(h, w, values)?;
        let peak = density.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let fixation_points = density
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == peak)
            .map(|(i, _)| (i % w, i / w))
            .collect();
        Ok(Self { density, fixation_points })
    }
}

/// Sum of isotropic Gaussians of width `sigma` centred on each `(x, y)`
/// point, normalised to unit mass.
pub fn build_gt_heatmap(points: &[(usize, usize)], size: (usize, usize), sigma: f64) -> Result<GroundTruthHeatmap> {
    let (h, w) = size;
    if points.is_empty() {
        return Err(Error::Input("ground truth needs at least one point".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    if let Some(&(x, y)) = points.iter().find(|&&(x, y)| x >= w || y >= h) {
        return Err(Error::Input(format!("point ({x}, {y}) outside {w}x{h} image")));
    }
    // Multiplicity does not change a normalised density.
    let mut unique: Vec<(usize, usize)> = points.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let mut density = Map2::zeros(h, w);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let reach = libm::ceil(6.0 * sigma) as usize;
    for &(px, py) in &unique {
        for y in py.saturating_sub(reach)..(py + reach + 1).min(h) {
            for x in px.saturating_sub(reach)..(px + reach + 1).min(w) {
                let dy = y as f64 - py as f64;
                let dx = x as f64 - px as f64;
                let v = density.get(y, x) + libm::exp(-(dx * dx + dy * dy) * inv);
                density.set(y, x, v);
            }
        }
    }
    let total = density.sum();
    density.as_mut_slice().iter_mut().for_each(|v| *v /= total);
    Ok(GroundTruthHeatmap { density, fixation_points: points.to_vec() })
}
