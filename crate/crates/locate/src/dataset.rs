//! On-disk dataset indexing, exocentric sampling and batch assembly.
//!
//! Layout:
//!
//! ```text
//! <root>/<setting>/train/exocentric/<affordance>/<object>/<image>
//! <root>/<setting>/train/egocentric/<affordance>/<object>/<image>
//! <root>/<setting>/test/egocentric/<affordance>/<object>/<image>
//! ```
//!
//! `<setting>` is `seen` or `unseen`. Each test image may carry ground truth
//! next to it: `<stem>.txt` with one `x y` point per line, or `<stem>.npy`
//! holding a pre-rendered heatmap of the image's size.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use locate_core::imageops::{augment_train, prepare_eval, resize_image, AugmentConfig};
use locate_core::metrics::build_gt_heatmap;
use locate_core::rng;
use locate_core::{Batch, BatchRow, GroundTruthHeatmap, Image, Map2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::Setting;
use crate::error::{LocateError, Result};
use crate::npy;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GtSource {
    Points(PathBuf),
    Heatmap(PathBuf),
}

/// One egocentric image and, for training, its exocentric pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub ego_path: PathBuf,
    /// Every exocentric image sharing the record's affordance and object.
    pub exo_paths: Vec<PathBuf>,
    pub affordance: usize,
    pub affordance_name: String,
    pub object_class: String,
    pub split: Split,
    pub setting: Setting,
    pub gt: Option<GtSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub setting: Setting,
    /// Affordance names in class-index order, read from the training split.
    pub vocabulary: Vec<String>,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn affordance_index(&self, name: &str) -> Option<usize> {
        self.vocabulary.iter().position(|v| v == name)
    }

    /// Number of distinct (affordance, object) groups in the training split.
    pub fn train_groups(&self) -> usize {
        self.train.iter().map(|r| (r.affordance, &r.object_class)).collect::<BTreeSet<_>>().len()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| LocateError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| LocateError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

pub fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn name_of(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

type Groups = BTreeMap<(String, String), Vec<PathBuf>>;

/// `(affordance, object) -> images` for one view directory.
fn scan_view(dir: &Path) -> Result<Groups> {
    if !dir.is_dir() {
        return Err(LocateError::Data(format!("missing directory {}", dir.display())));
    }
    let mut groups = Groups::new();
    for aff in subdirs(dir)? {
        let mut count = 0;
        for obj in subdirs(&aff)? {
            let images: Vec<PathBuf> = sorted_entries(&obj)?.into_iter().filter(|p| is_image(p)).collect();
            count += images.len();
            if !images.is_empty() {
                groups.insert((name_of(&aff), name_of(&obj)), images);
            }
        }
        if count == 0 {
            return Err(LocateError::Data(format!("affordance class {} has no images", aff.display())));
        }
    }
    Ok(groups)
}

fn gt_sidecar(image: &Path) -> Option<GtSource> {
    let points = image.with_extension("txt");
    let heatmap = image.with_extension("npy");
    if points.is_file() {
        Some(GtSource::Points(points))
    } else if heatmap.is_file() {
        Some(GtSource::Heatmap(heatmap))
    } else {
        None
    }
}

/// Indexes one setting of a dataset. Ordering is lexicographic by
/// affordance, object and file name.
pub fn index_dataset(root: &Path, setting: Setting) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(LocateError::Data(format!("dataset root {} does not exist", root.display())));
    }
    let base = root.join(setting.as_str());
    if !base.is_dir() {
        return Err(LocateError::Data(format!("no records: {} is missing", base.display())));
    }
    let train_dir = base.join(Split::Train.dir_name());
    let exo = scan_view(&train_dir.join("exocentric"))?;
    let ego = scan_view(&train_dir.join("egocentric"))?;
    let test = scan_view(&base.join(Split::Test.dir_name()).join("egocentric"))?;

    let vocabulary: Vec<String> =
        exo.keys().chain(ego.keys()).map(|(a, _)| a.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let class_of = |name: &str| vocabulary.iter().position(|v| v == name);

    let mut train_records = Vec::new();
    for ((aff, obj), images) in &ego {
        let pool = exo.get(&(aff.clone(), obj.clone())).ok_or_else(|| {
            LocateError::Data(format!("no exocentric images for affordance {aff:?}, object {obj:?}"))
        })?;
        for path in images {
            train_records.push(SampleRecord {
                ego_path: path.clone(),
                exo_paths: pool.clone(),
                affordance: class_of(aff).expect("vocabulary covers training"),
                affordance_name: aff.clone(),
                object_class: obj.clone(),
                split: Split::Train,
                setting,
                gt: None,
            });
        }
    }

    let mut test_records = Vec::new();
    for ((aff, obj), images) in &test {
        let affordance = class_of(aff).ok_or_else(|| {
            LocateError::Data(format!("test affordance {aff:?} is not in the training vocabulary {vocabulary:?}"))
        })?;
        for path in images {
            test_records.push(SampleRecord {
                ego_path: path.clone(),
                exo_paths: Vec::new(),
                affordance,
                affordance_name: aff.clone(),
                object_class: obj.clone(),
                split: Split::Test,
                setting,
                gt: gt_sidecar(path),
            });
        }
    }

    if train_records.is_empty() && test_records.is_empty() {
        return Err(LocateError::Data(format!("no records under {}", base.display())));
    }
    if setting == Setting::Unseen {
        let seen: BTreeSet<&str> = exo.keys().chain(ego.keys()).map(|(_, o)| o.as_str()).collect();
        let overlap: Vec<&str> = test.keys().map(|(_, o)| o.as_str()).filter(|o| seen.contains(o)).collect();
        if !overlap.is_empty() {
            let overlap: BTreeSet<&str> = overlap.into_iter().collect();
            return Err(LocateError::Data(format!(
                "unseen setting requires disjoint object classes, but train and test share {overlap:?}"
            )));
        }
    }
    Ok(DatasetIndex { root: root.to_path_buf(), setting, vocabulary, train: train_records, test: test_records })
}

/// `n` paths from `pool`: without replacement while the pool lasts, then
/// with replacement.
pub fn sample_exocentric<R: Rng + ?Sized>(pool: &[PathBuf], n: usize, rng: &mut R) -> Result<Vec<PathBuf>> {
    if pool.is_empty() {
        return Err(LocateError::Data("cannot sample from an empty exocentric pool".into()));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut out: Vec<PathBuf> = order.iter().take(n).map(|&i| pool[i].clone()).collect();
    while out.len() < n {
        out.push(pool[rng.random_range(0..pool.len())].clone());
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| LocateError::Data(format!("cannot decode {}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::zeros(h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        out.set_pixel(y as usize, x as usize, p.0.map(|v| v as f64 / 255.0));
    }
    Ok(out)
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(image.pixel(y as usize, x as usize).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| LocateError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Reads an `x y` point file; blank lines and `#` comments are ignored.
pub fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| LocateError::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LocateError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        match nums[..] {
            [x, y] => points.push((x, y)),
            _ => return Err(LocateError::Data(format!("{}:{}: expected `x y`", path.display(), i + 1))),
        }
    }
    Ok(points)
}

/// Ground truth for a test record at the image's stored size.
pub fn load_ground_truth(source: &GtSource, size: (usize, usize), sigma: f64) -> Result<GroundTruthHeatmap> {
    let (h, w) = size;
    match source {
        GtSource::Points(path) => {
            let points: Vec<(usize, usize)> = read_points(path)?
                .into_iter()
                .map(|(x, y)| ((x.round().max(0.0) as usize).min(w - 1), (y.round().max(0.0) as usize).min(h - 1)))
                .collect();
            build_gt_heatmap(&points, size, sigma)
                .map_err(|e| LocateError::Data(format!("{}: {e}", path.display())))
        }
        GtSource::Heatmap(path) => {
            let arr = npy::read(path)?;
            if arr.shape != [h, w] {
                return Err(LocateError::Data(format!(
                    "{}: heatmap shape {:?} does not match image size [{h}, {w}]",
                    path.display(),
                    arr.shape
                )));
            }
            let map = Map2::from_vec(h, w, arr.data)?;
            GroundTruthHeatmap::from_density(map).map_err(|e| LocateError::Data(format!("{}: {e}", path.display())))
        }
    }
}

/// Deterministic source of training batches.
///
/// Randomness is keyed by `(seed, epoch, record)`, so the batch stream is
/// fully described by the seed and the position in it; no hidden generator
/// state needs saving.
pub struct BatchLoader {
    records: Vec<SampleRecord>,
    augment: AugmentConfig,
    exo_per_ego: usize,
    batch_size: usize,
    seed: u64,
    cache: HashMap<PathBuf, Option<Image>>,
}

const ORDER_SALT: u64 = 0x0DE5;
const ROW_SALT: u64 = 0xB0A7;

impl BatchLoader {
    pub fn new(records: Vec<SampleRecord>, augment: AugmentConfig, exo_per_ego: usize, batch_size: usize, seed: u64) -> Result<Self> {
        augment.validate()?;
        if records.is_empty() {
            return Err(LocateError::Data("no training records".into()));
        }
        if exo_per_ego == 0 || batch_size == 0 {
            return Err(LocateError::Config("N and batch size must be positive".into()));
        }
        if let Some(r) = records.iter().find(|r| r.exo_paths.is_empty()) {
            return Err(LocateError::Data(format!("{} has no exocentric pool", r.ego_path.display())));
        }
        Ok(Self { records, augment, exo_per_ego, batch_size, seed, cache: HashMap::new() })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records.len().div_ceil(self.batch_size)
    }

    /// Record indices of each batch of `epoch`, in order.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut rng::stream(self.seed, &[ORDER_SALT, epoch as u64]));
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Decoded image resized to the pre-crop size; `None` if undecodable.
    fn resized(&mut self, path: &Path) -> Option<Image> {
        let size = self.augment.resize;
        self.cache
            .entry(path.to_path_buf())
            .or_insert_with(|| match load_image(path) {
                Ok(img) => Some(resize_image(&img, size, size)),
                Err(e) => {
                    log::warn!("skipping image: {e}");
                    None
                }
            })
            .clone()
    }

    /// Exocentric paths drawn for a record in a given epoch.
    pub fn exo_sample(&self, epoch: usize, index: usize) -> Vec<PathBuf> {
        let mut r = rng::stream(self.seed, &[ROW_SALT, epoch as u64, index as u64]);
        sample_exocentric(&self.records[index].exo_paths, self.exo_per_ego, &mut r).expect("pool checked at construction")
    }

    /// Assembles one batch. Rows whose egocentric image cannot be decoded,
    /// or whose exocentric images all fail, are dropped with a warning.
    pub fn load_batch(&mut self, epoch: usize, indices: &[usize]) -> Result<Batch> {
        let mut rows = Vec::with_capacity(indices.len());
        for &index in indices {
            let mut r = rng::stream(self.seed, &[ROW_SALT, epoch as u64, index as u64]);
            let exo_paths = sample_exocentric(&self.records[index].exo_paths, self.exo_per_ego, &mut r)?;
            let ego_path = self.records[index].ego_path.clone();
            let Some(ego) = self.resized(&ego_path) else { continue };
            let ego = augment_train(&ego, &self.augment, &mut r)?;
            let mut exo = Vec::with_capacity(exo_paths.len());
            for p in &exo_paths {
                if let Some(img) = self.resized(p) {
                    exo.push(augment_train(&img, &self.augment, &mut r)?);
                }
            }
            if exo.is_empty() {
                log::warn!("dropping {}: no decodable exocentric image", ego_path.display());
                continue;
            }
            rows.push(BatchRow { ego, exo, label: self.records[index].affordance });
        }
        if rows.is_empty() {
            return Err(LocateError::Data("every row of the batch failed to decode".into()));
        }
        Ok(Batch { rows })
    }
}

/// Evaluation input for a stored image, plus its original `(height, width)`.
pub fn load_eval_image(path: &Path, augment: &AugmentConfig) -> Result<(Image, (usize, usize))> {
    let img = load_image(path)?;
    let size = (img.height(), img.width());
    Ok((prepare_eval(&img, augment), size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(n: usize) -> Vec<PathBuf> {
        (0..n).map(|i| PathBuf::from(format!("exo_{i}.png"))).collect()
    }

    #[test]
    fn sampling_without_then_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let five = sample_exocentric(&pool(5), 3, &mut rng).unwrap();
        assert_eq!(five.iter().collect::<BTreeSet<_>>().len(), 3);
        let two = sample_exocentric(&pool(2), 3, &mut rng).unwrap();
        assert_eq!(two.len(), 3);
        assert_eq!(two.iter().collect::<BTreeSet<_>>().len(), 2);
        let a = sample_exocentric(&pool(9), 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_exocentric(&pool(9), 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(sample_exocentric(&[], 3, &mut rng).is_err());
    }

    #[test]
    fn point_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "# header\n3 4\n\n5.5, 6\n").unwrap();
        assert_eq!(read_points(&p).unwrap(), vec![(3.0, 4.0), (5.5, 6.0)]);
        fs::write(&p, "1 2 3\n").unwrap();
        assert!(read_points(&p).is_err());
    }
}
