//! One optimisation step of the full pipeline, and test-time prediction.
//!
//! Per batch row: the exocentric images go through the backbone and the CAM
//! head; their ground-truth maps pick interaction embeddings, which PartSelect
//! reduces to at most one object-part prototype. The egocentric image's
//! masked-average-pooled embedding is pulled towards that prototype, its maps
//! are concentrated, and both branches are trained for classification. SGD
//! with momentum then updates the CAM head(s) only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{Backbone, FeatureMap, Image, SaliencyMask};
use crate::cam::{
    backward_cam, classification_loss_grad, gap_backward, normalize_map, normalize_map_backward,
    predict_affordance, CamForward, CamHeadParams, LocalizationMaps,
};
use crate::error::{Error, Result};
use crate::loss::{
    concentration_loss_grad, cosine_margin_loss, masked_average_pool_backward, masked_average_pool_weights,
    total_loss, LossReport, LossWeights,
};
use crate::metrics::{kld, nss, sim, GroundTruthHeatmap, MetricTriple};
use crate::region::{extract_interaction_embeddings, EmbeddingBag};
use crate::rng;
use crate::select::{kmeans, select_object_part, similarity_maps, KMeansOptions, PrototypeSet, SelectionResult, SimilarityMaps};
use crate::tensor::{Map2, Tensor3};

/// How the egocentric branch receives exocentric knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferMode {
    /// Global: align globally pooled projected features of both branches.
    Gkt,
    /// Regional: align the CAM-masked egocentric embedding with an
    /// exocentric target (the PartSelect prototype when the selector is on,
    /// otherwise the CAM-masked exocentric embedding).
    Rkt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Exocentric images per egocentric image (N).
    pub exo_per_ego: usize,
    /// Prototypes per row (K).
    pub prototypes: usize,
    pub kmeans_restarts: usize,
    pub tau: f64,
    pub mu: f64,
    pub weights: LossWeights,
    pub transfer: TransferMode,
    pub use_selector: bool,
    pub use_cos: bool,
    pub use_concentration: bool,
    /// Restrict the concentration loss to the ground-truth channel.
    pub concentration_gt_only: bool,
    /// One CAM head for both branches.
    pub shared_head: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 16,
            epochs: 1,
            warmup_epochs: 1,
            exo_per_ego: 3,
            prototypes: 3,
            kmeans_restarts: crate::select::DEFAULT_RESTARTS,
            tau: 0.6,
            mu: 0.65,
            weights: LossWeights::default(),
            transfer: TransferMode::Rkt,
            use_selector: true,
            use_cos: true,
            use_concentration: true,
            concentration_gt_only: false,
            shared_head: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return fail("learning rate must be positive");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return fail("weight decay must be non-negative and momentum in [0, 1)");
        }
        if self.batch_size == 0 || self.exo_per_ego == 0 || self.prototypes == 0 || self.kmeans_restarts == 0 {
            return fail("batch size, N, K and k-means restarts must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail("tau must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return fail("mu must lie in [0, 1]");
        }
        self.weights.validate()
    }

    pub fn is_warmup(&self, epoch: usize) -> bool {
        epoch < self.warmup_epochs
    }
}

/// One egocentric image with its exocentric companions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub ego: Image,
    pub exo: Vec<Image>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub rows: Vec<BatchRow>,
}

/// Trainable parameters: the egocentric (or shared) head and, when heads are
/// not shared, a separate exocentric head.
#[derive(Debug, Clone, PartialEq)]
pub struct CamParams {
    pub ego: CamHeadParams,
    pub exo: Option<CamHeadParams>,
}

impl CamParams {
    pub fn init(feature_dim: usize, classes: usize, shared: bool, seed: u64) -> Self {
        Self {
            ego: CamHeadParams::init(feature_dim, classes, seed),
            exo: (!shared).then(|| CamHeadParams::init(feature_dim, classes, rng::derive_seed(seed, &[1]))),
        }
    }

    pub fn exo_head(&self) -> &CamHeadParams {
        self.exo.as_ref().unwrap_or(&self.ego)
    }

    pub fn zeros_like(&self) -> Self {
        Self { ego: self.ego.zeros_like(), exo: self.exo.as_ref().map(CamHeadParams::zeros_like) }
    }

    fn heads_mut(&mut self) -> impl Iterator<Item = &mut CamHeadParams> {
        core::iter::once(&mut self.ego).chain(self.exo.as_mut())
    }

    fn heads(&self) -> impl Iterator<Item = &CamHeadParams> {
        core::iter::once(&self.ego).chain(self.exo.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    pub rows: usize,
    /// Rows where PartSelect produced a prototype.
    pub selected_rows: usize,
    /// Rows that contributed a cosine term.
    pub cos_rows: usize,
}

/// Everything PartSelect computed for one row; used for debugging dumps.
#[derive(Debug, Clone)]
pub struct RowSelection {
    pub bag: EmbeddingBag,
    pub prototypes: Option<PrototypeSet>,
    pub similarity: Option<SimilarityMaps>,
    pub saliency: SaliencyMask,
    pub result: SelectionResult,
}

/// Runs region extraction and PartSelect for one row.
pub fn select_for_row(
    backbone: &dyn Backbone,
    exo_features: &[FeatureMap],
    exo_maps: &[LocalizationMaps],
    ego_image: &Image,
    ego_features: &FeatureMap,
    label: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<RowSelection> {
    let bag = extract_interaction_embeddings(exo_features, exo_maps, label, config.tau)?;
    let saliency = backbone.extract_saliency(ego_image)?;
    if saliency.shape() != ego_features.patch_grid() {
        return Err(Error::Shape(format!(
            "saliency grid {:?} vs feature grid {:?}",
            saliency.shape(),
            ego_features.patch_grid()
        )));
    }
    let opts = KMeansOptions { restarts: config.kmeans_restarts, ..KMeansOptions::new(config.prototypes, seed) };
    let prototypes = match kmeans(&bag.embeddings, &opts) {
        Ok(p) => p,
        Err(Error::Input(_)) => {
            return Ok(RowSelection { bag, prototypes: None, similarity: None, saliency, result: SelectionResult::none() })
        }
        Err(e) => return Err(e),
    };
    let similarity = similarity_maps(&prototypes, ego_features)?;
    let result = select_object_part(&prototypes, &similarity, &saliency, config.mu);
    Ok(RowSelection { bag, prototypes: Some(prototypes), similarity: Some(similarity), saliency, result })
}

struct EgoRow {
    features: FeatureMap,
    forward: CamForward,
    d_maps: Tensor3,
    d_cos_maps: Option<Tensor3>,
    d_cos_projected: Option<Tensor3>,
}

/// Parameters, optimiser state and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: CamParams,
    pub velocity: CamParams,
    pub steps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, feature_dim: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(Error::Config("need at least one affordance class".into()));
        }
        let params = CamParams::init(feature_dim, classes, config.shared_head, config.seed);
        let velocity = params.zeros_like();
        Ok(Self { config, params, velocity, steps: 0 })
    }

    pub fn from_state(config: TrainConfig, params: CamParams, velocity: CamParams, steps: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params, velocity, steps })
    }

    /// Loss and gradients at the current parameters; no update.
    pub fn objective(&self, backbone: &dyn Backbone, batch: &Batch, warmup: bool) -> Result<(StepReport, CamParams)> {
        let cfg = &self.config;
        let rows = batch.rows.len();
        if rows == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let classes = self.params.ego.class_count();
        let shared = self.params.exo.is_none();
        let mut grad = self.params.zeros_like();
        let row_scale = 1.0 / rows as f64;
        let transfer_on = cfg.use_cos && !warmup;

        let (mut l_cls_exo, mut l_cls_ego, mut l_c, mut l_cos) = (0.0, 0.0, 0.0, 0.0);
        let mut selected_rows = 0;
        let mut ego_rows = Vec::with_capacity(rows);

        for (r, row) in batch.rows.iter().enumerate() {
            if row.label >= classes {
                return Err(Error::Input(format!("row {r}: label {} out of range for {classes} classes", row.label)));
            }
            if row.exo.is_empty() {
                return Err(Error::Input(format!("row {r}: no exocentric images")));
            }
            let t = row.label;

            // exocentric branch: classification only
            let exo_scale = row_scale / row.exo.len() as f64;
            let mut exo_features = Vec::with_capacity(row.exo.len());
            let mut exo_forwards = Vec::with_capacity(row.exo.len());
            for image in &row.exo {
                let f = backbone.extract_features(image)?;
                let fwd = self.params.exo_head().forward(&f)?;
                let (ce, dz) = classification_loss_grad(&fwd.scores, t)?;
                l_cls_exo += ce * exo_scale;
                let dz: Vec<f64> = dz.iter().map(|g| g * exo_scale).collect();
                let (h, w) = fwd.maps.grid();
                let head_grad = if shared { &mut grad.ego } else { grad.exo.as_mut().expect("separate exo head") };
                backward_cam(&f, self.params.exo_head(), &fwd, &gap_backward(&dz, h, w), None, head_grad);
                exo_features.push(f);
                exo_forwards.push(fwd);
            }

            // egocentric branch
            let ego_features = backbone.extract_features(&row.ego)?;
            let fwd = self.params.ego.forward(&ego_features)?;
            let (h, w) = fwd.maps.grid();
            let (ce, dz) = classification_loss_grad(&fwd.scores, t)?;
            l_cls_ego += ce * row_scale;
            let dz: Vec<f64> = dz.iter().map(|g| g * row_scale).collect();
            let mut d_maps = gap_backward(&dz, h, w);

            if cfg.use_concentration {
                let channels: Vec<usize> = if cfg.concentration_gt_only { vec![t] } else { (0..classes).collect() };
                let (value, g) = concentration_loss_grad(&fwd.maps, &channels)?;
                l_c += value * row_scale;
                let s = cfg.weights.lambda_c * row_scale;
                d_maps.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += s * b);
            }

            let mut ego_row = EgoRow { features: ego_features, forward: fwd, d_maps, d_cos_maps: None, d_cos_projected: None };

            if transfer_on {
                match cfg.transfer {
                    TransferMode::Rkt => {
                        let exo_maps: Vec<LocalizationMaps> = exo_forwards.iter().map(|f| f.maps.clone()).collect();
                        let target = if cfg.use_selector {
                            let seed = rng::derive_seed(cfg.seed, &[self.steps, r as u64]);
                            let sel = select_for_row(backbone, &exo_features, &exo_maps, &row.ego, &ego_row.features, t, cfg, seed)?;
                            if sel.result.selected.is_some() {
                                selected_rows += 1;
                            }
                            sel.result.selected
                        } else {
                            exo_regional_target(&exo_features, &exo_maps, t)?
                        };
                        if let Some(target) = target {
                            let raw = ego_row.forward.maps.channel(t)?;
                            let weights = normalize_map(&raw);
                            let pooled = masked_average_pool_weights(&ego_row.features, &weights)?;
                            if !pooled.empty {
                                if let Some(cl) = cosine_margin_loss(&target, &pooled.embedding, cfg.weights.alpha)? {
                                    l_cos += cl.value;
                                    let d_w = masked_average_pool_backward(&ego_row.features, &weights, &pooled, &cl.grad_ego);
                                    let d_raw = normalize_map_backward(raw.as_slice(), d_w.as_slice());
                                    let mut d = Tensor3::zeros(classes, h, w);
                                    d.plane_mut(t).copy_from_slice(&d_raw);
                                    ego_row.d_cos_maps = Some(d);
                                }
                            }
                        }
                    }
                    TransferMode::Gkt => {
                        let target = mean_vectors(exo_forwards.iter().map(|f| f.projected().channel_means()));
                        let f_ego = ego_row.forward.projected().channel_means();
                        if let Some(cl) = cosine_margin_loss(&target, &f_ego, cfg.weights.alpha)? {
                            l_cos += cl.value;
                            let proj = ego_row.forward.projected();
                            let n = proj.plane_len() as f64;
                            let mut d = Tensor3::zeros(proj.channels(), proj.height(), proj.width());
                            for (k, g) in cl.grad_ego.iter().enumerate() {
                                d.plane_mut(k).iter_mut().for_each(|v| *v = g / n);
                            }
                            ego_row.d_cos_projected = Some(d);
                        }
                    }
                }
            }
            ego_rows.push(ego_row);
        }

        let cos_rows = ego_rows.iter().filter(|e| e.d_cos_maps.is_some() || e.d_cos_projected.is_some()).count();
        let cos_scale = if cos_rows > 0 { cfg.weights.lambda_cos / cos_rows as f64 } else { 0.0 };
        for mut e in ego_rows {
            if let Some(d) = &e.d_cos_maps {
                e.d_maps.as_mut_slice().iter_mut().zip(d.as_slice()).for_each(|(a, b)| *a += cos_scale * b);
            }
            let extra = e.d_cos_projected.map(|mut d| {
                d.scale(cos_scale);
                d
            });
            backward_cam(&e.features, &self.params.ego, &e.forward, &e.d_maps, extra.as_ref(), &mut grad.ego);
        }

        let l_cos = (cos_rows > 0).then(|| l_cos / cos_rows as f64);
        let loss = total_loss(l_cls_exo, l_cls_ego, l_cos, l_c, &cfg.weights, warmup);
        Ok((StepReport { loss, rows, selected_rows, cos_rows }, grad))
    }

    /// One SGD step with momentum and weight decay.
    pub fn train_step(&mut self, backbone: &dyn Backbone, batch: &Batch, warmup: bool) -> Result<StepReport> {
        let (report, grad) = self.objective(backbone, batch, warmup)?;
        let (lr, wd, m) = (self.config.lr, self.config.weight_decay, self.config.momentum);
        for ((p, v), g) in self.params.heads_mut().zip(self.velocity.heads_mut()).zip(grad.heads()) {
            for ((pt, vt), gt) in p.tensors_mut().into_iter().zip(v.tensors_mut()).zip(g.tensors()) {
                for ((x, vel), &dx) in pt.iter_mut().zip(vt.iter_mut()).zip(gt) {
                    *vel = m * *vel + dx + wd * *x;
                    *x -= lr * *vel;
                }
            }
        }
        self.steps += 1;
        Ok(report)
    }
}

fn mean_vectors(vectors: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vectors {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

/// Mean CAM-masked embedding of the exocentric images (no PartSelect).
fn exo_regional_target(features: &[FeatureMap], maps: &[LocalizationMaps], t: usize) -> Result<Option<Vec<f64>>> {
    let mut pooled = Vec::new();
    for (f, m) in features.iter().zip(maps) {
        let p = masked_average_pool_weights(f, &normalize_map(&m.channel(t)?))?;
        if !p.empty {
            pooled.push(p.embedding);
        }
    }
    if pooled.is_empty() {
        return Ok(None);
    }
    Ok(Some(mean_vectors(pooled.into_iter())))
}

/// Test-time prediction: egocentric branch only.
pub fn predict_map(
    backbone: &dyn Backbone,
    head: &CamHeadParams,
    image: &Image,
    t: usize,
    out_size: (usize, usize),
) -> Result<Map2> {
    let features = backbone.extract_features(image)?;
    let fwd = head.forward(&features)?;
    predict_affordance(&fwd.maps, t, out_size)
}

/// Metrics for one prediction. A prediction with no mass carries no
/// location information and is scored as the uniform map.
pub fn evaluate_prediction(pred: &Map2, gt: &GroundTruthHeatmap) -> Result<MetricTriple> {
    let scored = if pred.sum() > 0.0 { pred.clone() } else { Map2::filled(pred.height(), pred.width(), 1.0) };
    Ok(MetricTriple {
        kld: kld(&scored, &gt.density)?,
        sim: sim(&scored, &gt.density)?,
        nss: nss(pred, &gt.fixation_points)?,
    })
}
