//! Trainable class-activation head.
//!
//! A per-cell feed-forward projection and two 3×3 convolutions (each followed
//! by ReLU) adapt the frozen features; a 1×1 class-aware convolution turns
//! them into `C` localisation maps whose spatial means are the class logits.
//! The backward pass is written out by hand.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::imageops::resize_map;
use crate::rng;
use crate::tensor::{Map2, Tensor3};

/// Guard added to the min-max range.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Per-affordance activation maps `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMaps {
    data: Tensor3,
}

impl LocalizationMaps {
    pub fn new(data: Tensor3) -> Result<Self> {
        if data.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("localization maps contain non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn class_count(&self) -> usize {
        self.data.channels()
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.data
    }

    pub fn channel(&self, c: usize) -> Result<Map2> {
        if c >= self.class_count() {
            return Err(Error::Input(format!(
                "class index {c} out of range for {} classes",
                self.class_count()
            )));
        }
        Ok(self.data.channel(c))
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.height(), self.data.width())
    }
}

/// Class logits: the global average pool of the localisation maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub logits: Vec<f64>,
}

/// Dense layer applied independently at every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn forward(&self, x: &Tensor3) -> Tensor3 {
        let (h, w) = (x.height(), x.width());
        let n = h * w;
        let mut out = Tensor3::zeros(self.outputs, h, w);
        for o in 0..self.outputs {
            let dst = out.plane_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.inputs {
                let wt = self.weight[o * self.inputs + i];
                if wt == 0.0 {
                    continue;
                }
                let src = x.plane(i);
                for k in 0..n {
                    dst[k] += wt * src[k];
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    fn backward(&self, x: &Tensor3, d_out: &Tensor3, grad: &mut Linear, want_input: bool) -> Option<Tensor3> {
        let n = x.plane_len();
        for o in 0..self.outputs {
            let g = d_out.plane(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.inputs {
                let src = x.plane(i);
                grad.weight[o * self.inputs + i] += (0..n).map(|k| g[k] * src[k]).sum::<f64>();
            }
        }
        if !want_input {
            return None;
        }
        let mut d_in = Tensor3::zeros(self.inputs, x.height(), x.width());
        for o in 0..self.outputs {
            let g = d_out.plane(o);
            for i in 0..self.inputs {
                let wt = self.weight[o * self.inputs + i];
                let dst = d_in.plane_mut(i);
                for k in 0..n {
                    dst[k] += wt * g[k];
                }
            }
        }
        Some(d_in)
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs, 3, 3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![0.0; outputs * inputs * 9], bias: vec![0.0; outputs] }
    }

    #[inline]
    fn tap(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.inputs + i) * 3 + ky) * 3 + kx
    }

    fn forward(&self, x: &Tensor3) -> Tensor3 {
        let (h, w) = (x.height(), x.width());
        let mut out = Tensor3::zeros(self.outputs, h, w);
        for o in 0..self.outputs {
            let dst = out.plane_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.inputs {
                let src = x.plane(i);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wt = self.weight[self.tap(o, i, ky, kx)];
                        if wt == 0.0 {
                            continue;
                        }
                        for_each_tap(h, w, ky, kx, |dst_idx, src_idx| dst[dst_idx] += wt * src[src_idx]);
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &Tensor3, d_out: &Tensor3, grad: &mut Conv3x3) -> Tensor3 {
        let (h, w) = (x.height(), x.width());
        let mut d_in = Tensor3::zeros(self.inputs, h, w);
        for o in 0..self.outputs {
            let g = d_out.plane(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.inputs {
                let src = x.plane(i);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let t = self.tap(o, i, ky, kx);
                        let wt = self.weight[t];
                        let mut acc = 0.0;
                        let dst = d_in.plane_mut(i);
                        for_each_tap(h, w, ky, kx, |out_idx, in_idx| {
                            acc += g[out_idx] * src[in_idx];
                            dst[in_idx] += wt * g[out_idx];
                        });
                        grad.weight[t] += acc;
                    }
                }
            }
        }
        d_in
    }
}

/// Visits `(output index, input index)` pairs of one 3×3 tap over an
/// `h × w` plane with zero padding.
#[inline]
fn for_each_tap(h: usize, w: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
    let y_lo = if ky == 0 { 1 } else { 0 };
    let y_hi = if ky == 2 { h.saturating_sub(1) } else { h };
    let x_lo = if kx == 0 { 1 } else { 0 };
    let x_hi = if kx == 2 { w.saturating_sub(1) } else { w };
    for y in y_lo..y_hi {
        let sy = y + ky - 1;
        for x in x_lo..x_hi {
            f(y * w + x, sy * w + x + kx - 1);
        }
    }
}

/// Weights of the CAM head.
#[derive(Debug, Clone, PartialEq)]
pub struct CamHeadParams {
    pub projection: Linear,
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub class_conv: Linear,
}

impl CamHeadParams {
    /// Tensor names used in checkpoints, in [`Self::tensors`] order.
    pub const TENSOR_NAMES: [&'static str; 8] = [
        "projection",
        "projection.bias",
        "conv1",
        "conv1.bias",
        "conv2",
        "conv2.bias",
        "class_conv",
        "class_conv.bias",
    ];

    /// All-zero head mapping `feature_dim` inputs to `classes` maps, with
    /// hidden width equal to the input width.
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Self {
            projection: Linear::zeros(feature_dim, feature_dim),
            conv1: Conv3x3::zeros(feature_dim, feature_dim),
            conv2: Conv3x3::zeros(feature_dim, feature_dim),
            class_conv: Linear::zeros(feature_dim, classes),
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init(feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut p = Self::zeros(feature_dim, classes);
        let mut draw = rng::stream(seed, &[0xCA11]);
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let bound = libm::sqrt(6.0 / fan_in as f64);
            w.iter_mut().for_each(|v| *v = draw.random_range(-bound..bound));
        };
        fill(&mut p.projection.weight, feature_dim);
        fill(&mut p.conv1.weight, feature_dim * 9);
        fill(&mut p.conv2.weight, feature_dim * 9);
        fill(&mut p.class_conv.weight, feature_dim);
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.inputs
    }

    pub fn class_count(&self) -> usize {
        self.class_conv.outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            projection: Linear::zeros(self.projection.inputs, self.projection.outputs),
            conv1: Conv3x3::zeros(self.conv1.inputs, self.conv1.outputs),
            conv2: Conv3x3::zeros(self.conv2.inputs, self.conv2.outputs),
            class_conv: Linear::zeros(self.class_conv.inputs, self.class_conv.outputs),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.projection.weight,
            &self.projection.bias,
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.class_conv.weight,
            &self.class_conv.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.projection.weight,
            &mut self.projection.bias,
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.class_conv.weight,
            &mut self.class_conv.bias,
        ]
    }

    /// Shapes of [`Self::tensors`].
    pub fn tensor_shapes(&self) -> [Vec<usize>; 8] {
        let (d, h, c) = (self.projection.inputs, self.projection.outputs, self.class_conv.outputs);
        [
            vec![h, d],
            vec![h],
            vec![h, h, 3, 3],
            vec![h],
            vec![h, h, 3, 3],
            vec![h],
            vec![c, h],
            vec![c],
        ]
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &CamHeadParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += scale * b);
        }
    }

    pub fn forward(&self, features: &FeatureMap) -> Result<CamForward> {
        forward_cam(features, self)
    }
}

/// Forward pass output plus the activations needed for backward.
#[derive(Debug, Clone)]
pub struct CamForward {
    pub maps: LocalizationMaps,
    pub scores: ClassScores,
    hidden: [Tensor3; 3],
}

impl CamForward {
    /// Output of the projection stack (input to the class convolution).
    pub fn projected(&self) -> &Tensor3 {
        &self.hidden[2]
    }
}

fn relu(mut t: Tensor3) -> Tensor3 {
    t.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    t
}

fn relu_backward(activated: &Tensor3, d: &mut Tensor3) {
    for (g, &a) in d.as_mut_slice().iter_mut().zip(activated.as_slice()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Localisation maps and GAP logits for one feature map.
pub fn forward_cam(features: &FeatureMap, params: &CamHeadParams) -> Result<CamForward> {
    if features.dim() != params.feature_dim() {
        return Err(Error::Config(format!(
            "feature width {} does not match projection input {}",
            features.dim(),
            params.feature_dim()
        )));
    }
    let a1 = relu(params.projection.forward(features.tensor()));
    let a2 = relu(params.conv1.forward(&a1));
    let a3 = relu(params.conv2.forward(&a2));
    let maps = params.class_conv.forward(&a3);
    let scores = ClassScores { logits: maps.channel_means() };
    Ok(CamForward { maps: LocalizationMaps::new(maps)?, scores, hidden: [a1, a2, a3] })
}

/// Gradients of all head parameters given `d_maps` (gradient w.r.t. the
/// localisation maps) and an optional extra gradient w.r.t. the projected
/// features.
pub fn backward_cam(
    features: &FeatureMap,
    params: &CamHeadParams,
    forward: &CamForward,
    d_maps: &Tensor3,
    d_projected: Option<&Tensor3>,
    grad: &mut CamHeadParams,
) {
    let [a1, a2, a3] = &forward.hidden;
    let mut d3 = params
        .class_conv
        .backward(a3, d_maps, &mut grad.class_conv, true)
        .expect("input gradient requested");
    if let Some(extra) = d_projected {
        d3.as_mut_slice().iter_mut().zip(extra.as_slice()).for_each(|(a, b)| *a += b);
    }
    relu_backward(a3, &mut d3);
    let mut d2 = params.conv2.backward(a2, &d3, &mut grad.conv2);
    relu_backward(a2, &mut d2);
    let mut d1 = params.conv1.backward(a1, &d2, &mut grad.conv1);
    relu_backward(a1, &mut d1);
    params.projection.backward(features.tensor(), &d1, &mut grad.projection, false);
}

/// Softmax cross-entropy, computed with log-sum-exp.
pub fn classification_loss(scores: &ClassScores, label: usize) -> Result<f64> {
    Ok(classification_loss_grad(scores, label)?.0)
}

/// Loss and gradient w.r.t. the logits (`softmax - onehot`).
pub fn classification_loss_grad(scores: &ClassScores, label: usize) -> Result<(f64, Vec<f64>)> {
    let z = &scores.logits;
    if label >= z.len() {
        return Err(Error::Input(format!("label {label} out of range for {} classes", z.len())));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| libm::exp(v - max)).collect();
    let total: f64 = exps.iter().sum();
    let loss = libm::log(total) - (z[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Gradient w.r.t. the maps of a loss whose gradient w.r.t. the GAP logits is
/// `d_logits`.
pub fn gap_backward(d_logits: &[f64], height: usize, width: usize) -> Tensor3 {
    let mut d = Tensor3::zeros(d_logits.len(), height, width);
    let n = (height * width) as f64;
    for (c, g) in d_logits.iter().enumerate() {
        d.plane_mut(c).iter_mut().for_each(|v| *v = g / n);
    }
    d
}

/// `(x - min) / (max - min + eps)`; a constant map becomes all zeros.
pub fn normalize_map(map: &Map2) -> Map2 {
    let (lo, hi) = min_max(map.as_slice());
    if hi <= lo {
        return Map2::zeros(map.height(), map.width());
    }
    let range = hi - lo + NORMALIZE_EPS;
    map.map(|v| (v - lo) / range)
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn arg_min_max(values: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[lo] {
            lo = i;
        }
        if v > values[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Back-propagates `d_out` (gradient w.r.t. `normalize_map(input)`) to the
/// raw map. Uses the first minimum and maximum as the subgradient; constant
/// maps get zero gradient.
pub fn normalize_map_backward(input: &[f64], d_out: &[f64]) -> Vec<f64> {
    let (lo_i, hi_i) = arg_min_max(input);
    let (lo, hi) = (input[lo_i], input[hi_i]);
    let mut d = vec![0.0; input.len()];
    if hi <= lo {
        return d;
    }
    let range = hi - lo + NORMALIZE_EPS;
    let mut sum_g = 0.0;
    let mut sum_gx = 0.0;
    for (i, (&x, &g)) in input.iter().zip(d_out).enumerate() {
        d[i] = g / range;
        sum_g += g;
        sum_gx += g * (x - lo);
    }
    let r2 = range * range;
    d[lo_i] += -sum_g / range + sum_gx / r2;
    d[hi_i] -= sum_gx / r2;
    d
}

/// Channel `t`, min-max normalised and bilinearly resized to `out_size`.
pub fn predict_affordance(maps: &LocalizationMaps, t: usize, out_size: (usize, usize)) -> Result<Map2> {
    let channel = maps.channel(t)?;
    Ok(resize_map(&normalize_map(&channel), out_size.0, out_size.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn features(d: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut draw = rng::stream(seed, &[]);
        let data = (0..d * h * w).map(|_| draw.random_range(-1.0..1.0)).collect();
        FeatureMap::new(Tensor3::from_vec(d, h, w, data).unwrap(), (h * 16, w * 16)).unwrap()
    }

    #[test]
    fn zero_params_give_zero_maps() {
        let f = features(4, 3, 3, 1);
        let out = CamHeadParams::zeros(4, 2).forward(&f).unwrap();
        assert!(out.maps.tensor().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(out.scores.logits, vec![0.0, 0.0]);
    }

    #[test]
    fn logits_are_spatial_means() {
        let f = features(5, 4, 3, 2);
        let out = CamHeadParams::init(5, 3, 9).forward(&f).unwrap();
        for c in 0..3 {
            let mean = out.maps.channel(c).unwrap().mean();
            assert_abs_diff_eq!(out.scores.logits[c], mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_class_bias_sets_logit() {
        let f = features(3, 2, 2, 4);
        let mut p = CamHeadParams::zeros(3, 2);
        p.class_conv.bias[1] = 2.5;
        let out = p.forward(&f).unwrap();
        assert_eq!(out.scores.logits, vec![0.0, 2.5]);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let f = features(3, 2, 2, 4);
        assert!(matches!(CamHeadParams::zeros(4, 2).forward(&f), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = ClassScores { logits: vec![0.3; 4] };
        assert_abs_diff_eq!(classification_loss(&uniform, 2).unwrap(), libm::log(4.0), epsilon = 1e-12);
        let two = ClassScores { logits: vec![1.0, 0.0] };
        let e = core::f64::consts::E;
        assert_abs_diff_eq!(classification_loss(&two, 0).unwrap(), -libm::log(e / (e + 1.0)), epsilon = 1e-12);
        assert_abs_diff_eq!(classification_loss(&two, 0).unwrap(), 0.3133, epsilon = 1e-4);
        let confident = ClassScores { logits: vec![0.0, 800.0, 0.0] };
        assert!(classification_loss(&confident, 1).unwrap() < 1e-12);
        assert!(matches!(classification_loss(&two, 2), Err(Error::Input(_))));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_map(&Map2::from_vec(1, 3, vec![2.0, 4.0, 6.0]).unwrap());
        assert_abs_diff_eq!(n.as_slice()[1], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(n.as_slice()[2], 1.0, epsilon = 1e-8);
        let n = normalize_map(&Map2::from_vec(1, 3, vec![-1.0, 0.0, 3.0]).unwrap());
        assert_eq!(n.as_slice()[0], 0.0);
        assert_abs_diff_eq!(n.as_slice()[1], 0.25, epsilon = 1e-8);
        assert!(normalize_map(&Map2::filled(2, 2, 7.0)).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_on_unit_range() {
        let m = Map2::from_vec(2, 2, vec![0.0, 0.3, 1.0, 0.7]).unwrap();
        let n = normalize_map(&m);
        for (a, b) in n.as_slice().iter().zip(m.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = vec![0.3, -1.2, 2.0, 0.9, 1.1];
        let g = vec![0.5, -0.2, 1.0, 0.3, -0.7];
        let analytic = normalize_map_backward(&x, &g);
        let f = |x: &[f64]| -> f64 {
            let n = normalize_map(&Map2::from_vec(1, x.len(), x.to_vec()).unwrap());
            n.as_slice().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            assert_abs_diff_eq!(analytic[i], (f(&xp) - f(&xm)) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn prediction_of_constant_channel_is_zero() {
        let maps = LocalizationMaps::new(Tensor3::from_vec(1, 2, 2, vec![3.0; 4]).unwrap()).unwrap();
        let p = predict_affordance(&maps, 0, (8, 8)).unwrap();
        assert_eq!(p.shape(), (8, 8));
        assert!(p.as_slice().iter().all(|&v| v == 0.0));
        assert!(predict_affordance(&maps, 1, (8, 8)).is_err());
    }

    #[test]
    fn prediction_keeps_delta_location() {
        let mut data = vec![0.0; 9];
        data[5] = 4.0; // row 1, col 2
        let maps = LocalizationMaps::new(Tensor3::from_vec(1, 3, 3, data).unwrap()).unwrap();
        let p = predict_affordance(&maps, 0, (6, 6)).unwrap();
        let (r, c) = p.argmax().unwrap();
        assert_eq!((r / 2, c / 2), (1, 2));
        assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
