//! Part-level transfer objectives: masked average pooling, the cosine-margin
//! alignment loss, the concentration regulariser and the total objective.
//! Each loss comes with its analytic gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::FeatureMap;
use crate::cam::{normalize_map, normalize_map_backward, LocalizationMaps};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Map2, Tensor3};

/// Guard on pooling denominators, map masses and vector norms.
pub const LOSS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cos: f64,
    pub lambda_c: f64,
    /// Cosine margin.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cos: 1.0, lambda_c: 0.07, alpha: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cos < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("margin {} must lie in [0, 1)", self.alpha)));
        }
        Ok(())
    }
}

/// The individual loss terms of one step and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_cls_exo: f64,
    pub l_cls_ego: f64,
    pub l_cos: f64,
    pub l_c: f64,
    pub total: f64,
    pub cos_skipped: bool,
}

/// Combines the terms; the cosine term is dropped during warm-up or when it
/// could not be computed (`l_cos = None`).
pub fn total_loss(
    l_cls_exo: f64,
    l_cls_ego: f64,
    l_cos: Option<f64>,
    l_c: f64,
    weights: &LossWeights,
    warmup: bool,
) -> LossReport {
    let cos_skipped = warmup || l_cos.is_none();
    let l_cos = l_cos.unwrap_or(0.0);
    let cos_term = if cos_skipped { 0.0 } else { weights.lambda_cos * l_cos };
    LossReport {
        l_cls_exo,
        l_cls_ego,
        l_cos,
        l_c,
        total: l_cls_exo + l_cls_ego + cos_term + weights.lambda_c * l_c,
        cos_skipped,
    }
}

/// Result of masked average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub embedding: Vec<f64>,
    /// The weight map had no mass; the embedding is zero and the cosine term
    /// must be skipped.
    pub empty: bool,
}

/// `Σ F[:,u,v]·w[u,v] / Σ w[u,v]` for an already non-negative weight map.
pub fn masked_average_pool_weights(features: &FeatureMap, weights: &Map2) -> Result<Pooled> {
    if features.patch_grid() != weights.shape() {
        return Err(Error::Shape(format!(
            "feature grid {:?} vs weight grid {:?}",
            features.patch_grid(),
            weights.shape()
        )));
    }
    let mass: f64 = weights.sum();
    let dim = features.dim();
    if mass < LOSS_EPS {
        return Ok(Pooled { embedding: vec![0.0; dim], empty: true });
    }
    let denom = mass + LOSS_EPS;
    let embedding = (0..dim).map(|d| dot(features.tensor().plane(d), weights.as_slice()) / denom).collect();
    Ok(Pooled { embedding, empty: false })
}

/// Pools `ego_features` under the min-max normalised channel `t` of
/// `ego_maps`.
pub fn masked_average_pool(features: &FeatureMap, maps: &LocalizationMaps, t: usize) -> Result<Pooled> {
    masked_average_pool_weights(features, &normalize_map(&maps.channel(t)?))
}

/// Gradient w.r.t. the weight map given `d_embedding`:
/// `(F[:,u,v] − f) · d_embedding / (Σw + ε)`.
pub fn masked_average_pool_backward(features: &FeatureMap, weights: &Map2, pooled: &Pooled, d_embedding: &[f64]) -> Map2 {
    let (h, w) = weights.shape();
    let mut d = Map2::zeros(h, w);
    if pooled.empty {
        return d;
    }
    let denom = weights.sum() + LOSS_EPS;
    let base = dot(&pooled.embedding, d_embedding);
    let out = d.as_mut_slice();
    for (k, &g) in d_embedding.iter().enumerate() {
        let plane = features.tensor().plane(k);
        out.iter_mut().zip(plane).for_each(|(o, f)| *o += g * f);
    }
    out.iter_mut().for_each(|o| *o = (*o - base) / denom);
    d
}

/// Value and gradients of `max(1 − cos(f_op, f_ego) − α, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineLoss {
    pub value: f64,
    pub cosine: f64,
    pub grad_op: Vec<f64>,
    pub grad_ego: Vec<f64>,
}

/// Returns `None` when either vector has (near-)zero norm.
pub fn cosine_margin_loss(f_op: &[f64], f_ego: &[f64], alpha: f64) -> Result<Option<CosineLoss>> {
    if f_op.len() != f_ego.len() {
        return Err(Error::Shape(format!("embedding widths {} and {}", f_op.len(), f_ego.len())));
    }
    let (na, nb) = (norm(f_op), norm(f_ego));
    if na <= LOSS_EPS || nb <= LOSS_EPS {
        return Ok(None);
    }
    let cosine = dot(f_op, f_ego) / (na * nb);
    let raw = 1.0 - cosine - alpha;
    let n = f_op.len();
    if raw <= 0.0 {
        return Ok(Some(CosineLoss { value: 0.0, cosine, grad_op: vec![0.0; n], grad_ego: vec![0.0; n] }));
    }
    // d cos / d b = a/(|a||b|) − cos · b/|b|²
    let grad_ego = (0..n).map(|i| -(f_op[i] / (na * nb) - cosine * f_ego[i] / (nb * nb))).collect();
    let grad_op = (0..n).map(|i| -(f_ego[i] / (na * nb) - cosine * f_op[i] / (na * na))).collect();
    Ok(Some(CosineLoss { value: raw, cosine, grad_op, grad_ego }))
}

/// Mass-weighted mean distance of one non-negative map to its own centroid,
/// in raw patch units (row = u, column = v), with its gradient.
pub fn concentration_channel(weights: &Map2) -> (f64, Map2) {
    let (h, w) = weights.shape();
    let mut grad = Map2::zeros(h, w);
    let mass = weights.sum();
    if mass < LOSS_EPS {
        return (0.0, grad);
    }
    let (mut cu, mut cv) = (0.0, 0.0);
    for u in 0..h {
        for v in 0..w {
            let p = weights.get(u, v);
            cu += u as f64 * p;
            cv += v as f64 * p;
        }
    }
    cu /= mass;
    cv /= mass;
    let mut value = 0.0;
    // Σ (p/z)·∂d/∂ū and Σ (p/z)·∂d/∂v̄
    let (mut su, mut sv) = (0.0, 0.0);
    let mut dist = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (du, dv) = (u as f64 - cu, v as f64 - cv);
            let d = libm::sqrt(du * du + dv * dv);
            dist[u * w + v] = d;
            let p = weights.get(u, v) / mass;
            value += d * p;
            if d > 0.0 {
                su -= p * du / d;
                sv -= p * dv / d;
            }
        }
    }
    for u in 0..h {
        for v in 0..w {
            let g = (dist[u * w + v] - value) / mass + (u as f64 - cu) / mass * su + (v as f64 - cv) / mass * sv;
            grad.set(u, v, g);
        }
    }
    (value, grad)
}

/// Concentration loss summed over the selected channels of the raw maps,
/// each min-max normalised first, with the gradient w.r.t. the raw maps.
pub fn concentration_loss_grad(maps: &LocalizationMaps, channels: &[usize]) -> Result<(f64, Tensor3)> {
    let (h, w) = maps.grid();
    let mut grad = Tensor3::zeros(maps.class_count(), h, w);
    let mut total = 0.0;
    for &c in channels {
        let raw = maps.channel(c)?;
        let (value, d_norm) = concentration_channel(&normalize_map(&raw));
        total += value;
        let d_raw = normalize_map_backward(raw.as_slice(), d_norm.as_slice());
        grad.plane_mut(c).copy_from_slice(&d_raw);
    }
    Ok((total, grad))
}

/// Concentration loss over all channels.
pub fn concentration_loss(maps: &LocalizationMaps) -> f64 {
    let all: Vec<usize> = (0..maps.class_count()).collect();
    concentration_loss_grad(maps, &all).map(|(v, _)| v).unwrap_or(0.0)
}
