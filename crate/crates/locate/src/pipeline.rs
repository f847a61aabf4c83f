//! Training, evaluation, prediction and selector inspection over a dataset
//! on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use locate_core::rng;
use locate_core::train::{evaluate_prediction, predict_map, select_for_row};
use locate_core::{Backbone, CamParams, Map2, StepReport, Trainer};
use serde::Serialize;

use crate::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::config::Config;
use crate::dataset::{index_dataset, load_eval_image, load_ground_truth, load_image, BatchLoader, DatasetIndex, SampleRecord};
use crate::error::{LocateError, Result};
use crate::npy;
use crate::overlay::{blend, OVERLAY_ALPHA};
use crate::report::{EvalReport, EvalRow};

pub const CHECKPOINT_FILE: &str = "checkpoint.lck";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

const LOADER_SALT: u64 = 0x10AD;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LocateError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| LocateError::io(path, e))
}

/// Writes the resolved config where a rerun can pick it up.
pub fn echo_config(config: &Config, out_dir: &Path) -> Result<PathBuf> {
    create_dir(out_dir)?;
    let path = out_dir.join(RESOLVED_CONFIG_FILE);
    write_file(&path, config.to_toml())?;
    Ok(path)
}

pub fn data_root(config: &Config) -> Result<&Path> {
    config
        .data
        .root
        .as_deref()
        .ok_or_else(|| LocateError::Config("no dataset root (set data.root or pass --data)".into()))
}

pub fn open_dataset(config: &Config) -> Result<DatasetIndex> {
    index_dataset(data_root(config)?, config.data.setting)
}

#[derive(Debug, Serialize)]
struct LogLine {
    step: u64,
    epoch: usize,
    warmup: bool,
    l_cls_exo: f64,
    l_cls_ego: f64,
    l_cos: f64,
    l_c: f64,
    total: f64,
    cos_skipped: bool,
    rows: usize,
    selected_rows: usize,
    cos_rows: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub reports: Vec<StepReport>,
}

/// Trains from scratch, or continues from `resume` when given. Writes the
/// resolved config, a JSON-lines step log and a checkpoint after every
/// epoch into `out_dir`.
pub fn train(config: &Config, out_dir: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    config.validate_for_training()?;
    let backbone = config.build_backbone()?;
    let index = open_dataset(config)?;
    if index.train.is_empty() {
        return Err(LocateError::Data("training split is empty".into()));
    }
    let epochs = config.train.epochs.expect("validated");
    let tc = config.train_config();
    let feature_dim = backbone.config().feature_dim;

    let (mut trainer, start) = match resume {
        Some(ck) => {
            if ck.vocabulary != index.vocabulary {
                return Err(LocateError::Data(format!(
                    "checkpoint vocabulary {:?} differs from dataset vocabulary {:?}",
                    ck.vocabulary, index.vocabulary
                )));
            }
            (Trainer::from_state(tc, ck.params, ck.velocity, ck.steps)?, ck.rng)
        }
        None => (
            Trainer::new(tc, feature_dim, index.vocabulary.len())?,
            RngState { seed: rng::derive_seed(config.seed, &[LOADER_SALT]), epoch: 0, batch: 0 },
        ),
    };
    let mut loader = BatchLoader::new(index.train.clone(), config.augment(), config.data.n, config.data.batch_size, start.seed)?;

    echo_config(config, out_dir)?;
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume_flag(&start))
        .write(true)
        .truncate(!resume_flag(&start))
        .open(&log_path)
        .map_err(|e| LocateError::io(&log_path, e))?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);

    let mut reports = Vec::new();
    let mut position = start;
    let max_steps = config.train.max_steps.unwrap_or(u64::MAX);
    let snapshot = |trainer: &Trainer, position: RngState, epoch: usize| Checkpoint {
        config: config.clone(),
        vocabulary: index.vocabulary.clone(),
        epoch,
        steps: trainer.steps,
        rng: position,
        params: trainer.params.clone(),
        velocity: trainer.velocity.clone(),
    };

    'epochs: for epoch in start.epoch..epochs {
        let warmup = trainer.config.is_warmup(epoch);
        let batches = loader.epoch_batches(epoch);
        let first = if epoch == start.epoch { start.batch } else { 0 };
        for (b, indices) in batches.iter().enumerate().skip(first) {
            if trainer.steps >= max_steps {
                break 'epochs;
            }
            let batch = loader.load_batch(epoch, indices)?;
            let report = trainer.train_step(backbone.as_ref(), &batch, warmup)?;
            if !report.loss.total.is_finite() {
                return Err(LocateError::Runtime(format!("loss diverged at step {}", trainer.steps)));
            }
            let line = LogLine {
                step: trainer.steps,
                epoch,
                warmup,
                l_cls_exo: report.loss.l_cls_exo,
                l_cls_ego: report.loss.l_cls_ego,
                l_cos: report.loss.l_cos,
                l_c: report.loss.l_c,
                total: report.loss.total,
                cos_skipped: report.loss.cos_skipped,
                rows: report.rows,
                selected_rows: report.selected_rows,
                cos_rows: report.cos_rows,
            };
            writeln!(log, "{}", serde_json::to_string(&line).expect("log line serialises"))
                .map_err(|e| LocateError::io(&log_path, e))?;
            reports.push(report);
            position = RngState { seed: start.seed, epoch, batch: b + 1 };
        }
        position = RngState { seed: start.seed, epoch: epoch + 1, batch: 0 };
        save_checkpoint(&checkpoint_path, &snapshot(&trainer, position, epoch + 1))?;
    }
    let checkpoint = snapshot(&trainer, position, position.epoch);
    save_checkpoint(&checkpoint_path, &checkpoint)?;
    log::info!("trained {} steps; checkpoint at {}", trainer.steps, checkpoint_path.display());
    Ok(TrainOutcome { checkpoint, checkpoint_path, reports })
}

fn resume_flag(start: &RngState) -> bool {
    start.epoch > 0 || start.batch > 0
}

/// Affordance index in the checkpoint vocabulary, or a config error that
/// lists the vocabulary.
pub fn resolve_affordance(vocabulary: &[String], name: &str) -> Result<usize> {
    vocabulary.iter().position(|v| v == name).ok_or_else(|| {
        LocateError::Config(format!("unknown affordance {name:?}; known affordances: {}", vocabulary.join(", ")))
    })
}

fn display_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Scores every test record; records without usable ground truth are
/// skipped with a warning and listed in the report.
pub fn evaluate(
    config: &Config,
    backbone: &dyn Backbone,
    params: &CamParams,
    vocabulary: &[String],
    root: &Path,
    records: &[SampleRecord],
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(LocateError::Data("test split is empty".into()));
    }
    let augment = config.augment();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for record in records {
        let name = display_path(root, &record.ego_path);
        let Some(source) = &record.gt else {
            log::warn!("{name}: no ground truth, skipped");
            skipped.push(name);
            continue;
        };
        let t = resolve_affordance(vocabulary, &record.affordance_name)?;
        let (image, size) = load_eval_image(&record.ego_path, &augment)?;
        let gt = match load_ground_truth(source, size, config.gt.sigma) {
            Ok(gt) => gt,
            Err(e) => {
                log::warn!("{name}: {e}; skipped");
                skipped.push(name);
                continue;
            }
        };
        let pred = predict_map(backbone, &params.ego, &image, t, size)?;
        let m = evaluate_prediction(&pred, &gt)?;
        rows.push(EvalRow { image: name, affordance: record.affordance_name.clone(), kld: m.kld, sim: m.sim, nss: m.nss });
    }
    EvalReport::from_rows(rows, skipped).ok_or_else(|| LocateError::Data("no test image had usable ground truth".into()))
}

/// Evaluates a checkpoint on the configured test split and writes reports
/// into `out_dir`.
pub fn evaluate_checkpoint(config: &Config, checkpoint: &Checkpoint, out_dir: &Path) -> Result<EvalReport> {
    config.validate()?;
    let backbone = config.build_backbone()?;
    let index = open_dataset(config)?;
    let report = evaluate(config, backbone.as_ref(), &checkpoint.params, &checkpoint.vocabulary, &index.root, &index.test)?;
    echo_config(config, out_dir)?;
    report.write(out_dir)?;
    Ok(report)
}

#[derive(Debug)]
pub struct Prediction {
    /// Normalised heatmap at the input image's size.
    pub heatmap: Map2,
    pub heatmap_path: PathBuf,
    pub overlay_path: PathBuf,
}

/// Heatmap for one image and affordance; writes `<stem>_<affordance>.npy`
/// and `<stem>_<affordance>_overlay.png` into `out_dir`.
pub fn predict(config: &Config, checkpoint: &Checkpoint, image_path: &Path, affordance: &str, out_dir: &Path) -> Result<Prediction> {
    config.validate()?;
    let t = resolve_affordance(&checkpoint.vocabulary, affordance)?;
    let backbone = config.build_backbone()?;
    let raw = load_image(image_path)?;
    let (image, size) = load_eval_image(image_path, &config.augment())?;
    let heatmap = predict_map(backbone.as_ref(), &checkpoint.params.ego, &image, t, size)?;
    create_dir(out_dir)?;
    let stem = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let heatmap_path = out_dir.join(format!("{stem}_{affordance}.npy"));
    npy::write(&heatmap_path, &[size.0, size.1], heatmap.as_slice())?;
    let overlay_path = out_dir.join(format!("{stem}_{affordance}_overlay.png"));
    crate::dataset::save_image(&overlay_path, &blend(&raw, &heatmap, OVERLAY_ALPHA))?;
    Ok(Prediction { heatmap, heatmap_path, overlay_path })
}

#[derive(Debug, Clone, Serialize)]
pub struct Inspection {
    pub ego_image: String,
    pub exo_images: Vec<String>,
    pub affordance: String,
    pub embeddings: usize,
    /// PartIoU per prototype; empty when too few embeddings to cluster.
    pub gamma: Vec<f64>,
    pub chosen_index: Option<usize>,
    pub mu: f64,
    pub member_counts: Vec<usize>,
    pub grid: (usize, usize),
}

/// Runs region extraction and PartSelect on training sample `sample`
/// (without augmentation) and dumps `similarity_<k>.npy`, `saliency.npy`,
/// `saliency_mask.npy` and `selection.json` into `out_dir`.
pub fn inspect(config: &Config, checkpoint: &Checkpoint, sample: usize, out_dir: &Path) -> Result<Inspection> {
    config.validate()?;
    let backbone = config.build_backbone()?;
    let index = open_dataset(config)?;
    let record = index.train.get(sample).ok_or_else(|| {
        LocateError::Config(format!("sample {sample} out of range: training split has {} records", index.train.len()))
    })?;
    let t = resolve_affordance(&checkpoint.vocabulary, &record.affordance_name)?;
    let augment = config.augment();
    let loader = BatchLoader::new(index.train.clone(), augment, config.data.n, 1, checkpoint.rng.seed)?;
    let exo_paths = loader.exo_sample(0, sample);

    let (ego, _) = load_eval_image(&record.ego_path, &augment)?;
    let ego_features = backbone.extract_features(&ego)?;
    let head = checkpoint.params.exo.as_ref().unwrap_or(&checkpoint.params.ego);
    let mut exo_features = Vec::new();
    let mut exo_maps = Vec::new();
    for p in &exo_paths {
        let (img, _) = load_eval_image(p, &augment)?;
        let f = backbone.extract_features(&img)?;
        exo_maps.push(head.forward(&f)?.maps);
        exo_features.push(f);
    }
    let tc = config.train_config();
    let seed = rng::derive_seed(config.seed, &[u64::MAX, sample as u64]);
    let sel = select_for_row(backbone.as_ref(), &exo_features, &exo_maps, &ego, &ego_features, t, &tc, seed)?;

    create_dir(out_dir)?;
    let (h, w) = ego_features.patch_grid();
    if let Some(sim) = &sel.similarity {
        for k in 0..sim.data.channels() {
            npy::write(&out_dir.join(format!("similarity_{k}.npy")), &[h, w], sim.data.plane(k))?;
        }
    }
    npy::write(&out_dir.join("saliency.npy"), &[h, w], sel.saliency.weights().as_slice())?;
    let mask: Vec<f64> = sel.saliency.binary().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    npy::write(&out_dir.join("saliency_mask.npy"), &[h, w], &mask)?;

    let root = &index.root;
    let out = Inspection {
        ego_image: display_path(root, &record.ego_path),
        exo_images: exo_paths.iter().map(|p| display_path(root, p)).collect(),
        affordance: record.affordance_name.clone(),
        embeddings: sel.bag.len(),
        gamma: sel.result.scores.clone(),
        chosen_index: sel.result.chosen_index,
        mu: tc.mu,
        member_counts: sel.prototypes.as_ref().map(|p| p.member_counts.clone()).unwrap_or_default(),
        grid: (h, w),
    };
    write_file(&out_dir.join("selection.json"), serde_json::to_string_pretty(&out).expect("serialises") + "\n")?;
    Ok(out)
}
