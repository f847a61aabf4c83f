//! Frozen dense feature extraction and egocentric saliency.
//!
//! [`Backbone`] is the contract the rest of the pipeline consumes. A real
//! self-supervised ViT can sit behind it; the crate ships
//! [`SyntheticBackbone`], a deterministic stand-in whose features are planted
//! per material so every downstream stage can be checked against a known
//! answer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{norm, Map2, Tensor3};

/// RGB image tensor, channel-major `[3, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image of {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        self.data[(c * self.height + row) * self.width + col] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        [self.get(0, row, col), self.get(1, row, col), self.get(2, row, col)]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, row, col, v);
        }
    }
}

/// Static description of a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { patch_size: 16, feature_dim: 32 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 1 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be at least 2".into()));
        }
        Ok(())
    }

    /// Patch grid for an image, rejecting partial patches.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if height == 0 || width == 0 || height % p != 0 || width % p != 0 {
            return Err(Error::Shape(format!(
                "image {height}x{width} is not a whole number of {p}px patches"
            )));
        }
        Ok((height / p, width / p))
    }
}

/// Dense features `[D, H, W]` over the patch grid of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Tensor3,
    source_size: (usize, usize),
}

impl FeatureMap {
    pub fn new(data: Tensor3, source_size: (usize, usize)) -> Result<Self> {
        if data.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature map contains non-finite values".into()));
        }
        Ok(Self { data, source_size })
    }

    pub fn dim(&self) -> usize {
        self.data.channels()
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.data.height(), self.data.width())
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.data
    }

    pub fn embedding(&self, row: usize, col: usize) -> Vec<f64> {
        self.data.cell(row, col)
    }

    /// Copy with every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut data = self.data.clone();
        data.scale(factor);
        Self { data, source_size: self.source_size }
    }
}

/// Non-negative saliency weights and their mean-threshold binarisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask {
    weights: Map2,
    binary: Vec<bool>,
}

impl SaliencyMask {
    pub fn from_weights(weights: Map2) -> Result<Self> {
        if weights.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("saliency weights must be finite and non-negative".into()));
        }
        let binary = mean_threshold(weights.as_slice());
        Ok(Self { weights, binary })
    }

    pub fn weights(&self) -> &Map2 {
        &self.weights
    }

    pub fn binary(&self) -> &[bool] {
        &self.binary
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }
}

/// `values[i] > mean(values)`, elementwise.
pub fn mean_threshold(values: &[f64]) -> Vec<bool> {
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|&v| v > mean).collect()
}

/// Averages the class-token attention rows of the final layer's heads.
///
/// Each entry of `heads` is one head's attention from the class token to the
/// `height * width` patch tokens, row-major.
pub fn aggregate_attention(heads: &[Vec<f64>], height: usize, width: usize) -> Result<SaliencyMask> {
    if heads.is_empty() {
        return Err(Error::Input("no attention heads".into()));
    }
    let n = height * width;
    let mut mean = vec![0.0; n];
    for head in heads {
        if head.len() != n {
            return Err(Error::Shape(format!("attention row has {} entries, grid has {n}", head.len())));
        }
        for (m, a) in mean.iter_mut().zip(head) {
            *m += a;
        }
    }
    let k = heads.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    SaliencyMask::from_weights(Map2::from_vec(height, width, mean)?)
}

/// A frozen dense feature extractor.
///
/// Implementations hold no trainable state and must be pure: the same image
/// always yields bit-identical outputs.
pub trait Backbone {
    fn config(&self) -> BackboneConfig;

    fn extract_features(&self, image: &Image) -> Result<FeatureMap>;

    fn extract_saliency(&self, _image: &Image) -> Result<SaliencyMask> {
        Err(Error::Capability("this backbone does not expose attention maps".into()))
    }
}

/// Semantic role of a patch in a planted scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchLabel {
    ObjectPart,
    ObjectOther,
    Human,
    Background,
}

impl PatchLabel {
    pub const ALL: [PatchLabel; 4] =
        [PatchLabel::ObjectPart, PatchLabel::ObjectOther, PatchLabel::Human, PatchLabel::Background];

    pub fn as_str(self) -> &'static str {
        match self {
            PatchLabel::ObjectPart => "object-part",
            PatchLabel::ObjectOther => "object-other",
            PatchLabel::Human => "human",
            PatchLabel::Background => "background",
        }
    }
}

impl fmt::Display for PatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatchLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatchLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown patch label `{s}`")))
    }
}

/// A surface appearance: the colour it is rendered with, and how strongly the
/// synthetic attention surrogate attends to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub color: [f64; 3],
    pub objectness: f64,
}

/// Ordered list of materials; index = material id.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    materials: Vec<Material>,
}

impl Palette {
    pub const BACKGROUND: usize = 0;
    pub const HUMAN: usize = 1;
    pub const BODY: usize = 2;
    pub const FIRST_PART: usize = 3;

    const PART_COLORS: [[f64; 3]; 6] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.75, 0.20],
        [0.95, 0.85, 0.10],
        [0.60, 0.10, 0.80],
        [0.05, 0.80, 0.85],
        [0.95, 0.45, 0.05],
    ];

    pub fn new(materials: Vec<Material>) -> Result<Self> {
        if materials.is_empty() {
            return Err(Error::Config("palette needs at least one material".into()));
        }
        Ok(Self { materials })
    }

    /// Background, human, object body, then one part material per affordance.
    /// Colours are raw RGB in `[0, 1]`.
    pub fn standard(part_count: usize) -> Result<Self> {
        if part_count > Self::PART_COLORS.len() {
            return Err(Error::Config(format!(
                "standard palette supports at most {} part materials",
                Self::PART_COLORS.len()
            )));
        }
        let mut materials = vec![
            Material { color: [0.45, 0.45, 0.45], objectness: 0.0 },
            Material { color: [0.95, 0.70, 0.55], objectness: 0.3 },
            Material { color: [0.15, 0.25, 0.75], objectness: 1.0 },
        ];
        materials.extend(
            Self::PART_COLORS[..part_count].iter().map(|&color| Material { color, objectness: 1.0 }),
        );
        Self::new(materials)
    }

    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Material> {
        self.materials.get(id)
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    /// Maps every colour through `(c - mean) / std`, matching input
    /// standardisation.
    pub fn standardized(&self, mean: [f64; 3], std: [f64; 3]) -> Self {
        let materials = self
            .materials
            .iter()
            .map(|m| Material {
                color: core::array::from_fn(|c| (m.color[c] - mean[c]) / std[c]),
                objectness: m.objectness,
            })
            .collect();
        Self { materials }
    }

    /// Nearest material by Euclidean colour distance (lowest id on ties).
    pub fn nearest(&self, rgb: [f64; 3]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, m) in self.materials.iter().enumerate() {
            let d: f64 = (0..3).map(|c| (m.color[c] - rgb[c]) * (m.color[c] - rgb[c])).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// One labelled rectangle of a planted layout, in patch units, half-open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub label: PatchLabel,
    pub material: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Region {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows.contains(&row) && self.cols.contains(&col)
    }
}

/// Patch-level scene description: labelled, non-overlapping rectangles over a
/// grid. Uncovered cells are background rendered with `fill`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedLayout {
    rows: usize,
    cols: usize,
    fill: usize,
    regions: Vec<Region>,
}

impl PlantedLayout {
    pub fn new(rows: usize, cols: usize, fill: usize, regions: Vec<Region>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("layout grid must be non-empty".into()));
        }
        for (i, r) in regions.iter().enumerate() {
            if r.rows.is_empty() || r.cols.is_empty() {
                return Err(Error::Config(format!("region {i} ({}) is empty", r.label)));
            }
            if r.rows.end > rows || r.cols.end > cols {
                return Err(Error::Config(format!(
                    "region {i} ({}) exceeds the {rows}x{cols} grid",
                    r.label
                )));
            }
            for (j, other) in regions[..i].iter().enumerate() {
                let overlap = r.rows.start < other.rows.end
                    && other.rows.start < r.rows.end
                    && r.cols.start < other.cols.end
                    && other.cols.start < r.cols.end;
                if overlap {
                    return Err(Error::Config(format!(
                        "region {i} ({}) overlaps region {j} ({})",
                        r.label, other.label
                    )));
                }
            }
        }
        Ok(Self { rows, cols, fill, regions })
    }

    /// Parses the text form:
    ///
    /// ```text
    /// grid 7 7
    /// fill 0
    /// object-part 3 1 1 3 2   # label material row0 col0 row1 col1
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = None;
        let mut fill = Palette::BACKGROUND;
        let mut regions = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |what: &str| Error::Config(format!("layout line {}: {what}", lineno + 1));
            let nums = |xs: &[&str]| -> Result<Vec<usize>> {
                xs.iter()
                    .map(|s| s.parse::<usize>().map_err(|_| bad(&format!("`{s}` is not a count"))))
                    .collect()
            };
            match fields[0] {
                "grid" if fields.len() == 3 => {
                    let n = nums(&fields[1..])?;
                    grid = Some((n[0], n[1]));
                }
                "fill" if fields.len() == 2 => fill = nums(&fields[1..])?[0],
                label if fields.len() == 6 => {
                    let label: PatchLabel = label.parse()?;
                    let n = nums(&fields[1..])?;
                    regions.push(Region { label, material: n[0], rows: n[1]..n[3], cols: n[2]..n[4] });
                }
                _ => return Err(bad("expected `grid R C`, `fill M` or `label M r0 c0 r1 c1`")),
            }
        }
        let (rows, cols) = grid.ok_or_else(|| Error::Config("layout has no `grid` line".into()))?;
        Self::new(rows, cols, fill, regions)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("grid {} {}\nfill {}\n", self.rows, self.cols, self.fill);
        for r in &self.regions {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                r.label, r.material, r.rows.start, r.cols.start, r.rows.end, r.cols.end
            ));
        }
        out
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    fn region_at(&self, row: usize, col: usize) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(row, col))
    }

    pub fn label_at(&self, row: usize, col: usize) -> PatchLabel {
        self.region_at(row, col).map_or(PatchLabel::Background, |r| r.label)
    }

    pub fn material_at(&self, row: usize, col: usize) -> usize {
        self.region_at(row, col).map_or(self.fill, |r| r.material)
    }

    /// Row-major cell mask of one label.
    pub fn mask(&self, label: PatchLabel) -> Vec<bool> {
        (0..self.rows * self.cols).map(|i| self.label_at(i / self.cols, i % self.cols) == label).collect()
    }

    /// Renders each cell as a flat `patch_size` square of its material colour.
    pub fn render(&self, palette: &Palette, patch_size: usize) -> Result<Image> {
        let mut image = Image::zeros(self.rows * patch_size, self.cols * patch_size);
        for row in 0..self.rows {
            for col in 0..self.cols {
                let id = self.material_at(row, col);
                let m = palette
                    .get(id)
                    .ok_or_else(|| Error::Config(format!("material {id} is not in the palette")))?;
                for y in row * patch_size..(row + 1) * patch_size {
                    for x in col * patch_size..(col + 1) * patch_size {
                        image.set_pixel(y, x, m.color);
                    }
                }
            }
        }
        Ok(image)
    }
}

/// Deterministic stand-in for a self-supervised ViT.
///
/// Every patch is matched to its nearest palette material by mean colour.
/// Its feature is that material's fixed unit vector plus seeded noise of norm
/// at most `NOISE_NORM`, scaled by the patch's colour magnitude relative to
/// the material colour (so a black image yields zero features). Material
/// vectors are mutually orthogonal and independent of the seed.
///
/// Saliency is a surrogate for class-token attention: `ATTENTION_HEADS`
/// heads each attend to patches in proportion to material objectness times a
/// seeded per-head jitter in `[0.9, 1.1]`, normalised over patches, and the
/// heads are averaged by [`aggregate_attention`].
#[derive(Debug, Clone)]
pub struct SyntheticBackbone {
    seed: u64,
    config: BackboneConfig,
    palette: Palette,
    class_vectors: Vec<Vec<f64>>,
}

impl SyntheticBackbone {
    pub const NOISE_NORM: f64 = 0.005;
    pub const ATTENTION_HEADS: usize = 3;
    const CLASS_VECTOR_SEED: u64 = 0x10CA7E;
    const ATTENTION_SALT: u64 = 0xA77E;

    pub fn new(seed: u64, config: BackboneConfig, palette: Palette) -> Result<Self> {
        config.validate()?;
        if palette.len() > config.feature_dim {
            return Err(Error::Config(format!(
                "{} materials need feature_dim >= {}, got {}",
                palette.len(),
                palette.len(),
                config.feature_dim
            )));
        }
        let class_vectors = orthonormal_vectors(palette.len(), config.feature_dim);
        Ok(Self { seed, config, palette, class_vectors })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn class_vector(&self, material: usize) -> &[f64] {
        &self.class_vectors[material]
    }

    fn patch_mean(&self, image: &Image, row: usize, col: usize) -> [f64; 3] {
        let p = self.config.patch_size;
        let mut acc = [0.0; 3];
        for y in row * p..(row + 1) * p {
            for x in col * p..(col + 1) * p {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += image.get(c, y, x);
                }
            }
        }
        let n = (p * p) as f64;
        acc.map(|a| a / n)
    }

    /// Material id and intensity scale of every patch, row-major.
    fn classify(&self, image: &Image) -> Result<(usize, usize, Vec<(usize, f64, [f64; 3])>)> {
        let (h, w) = self.config.grid_for(image.height(), image.width())?;
        let mut cells = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                let mean = self.patch_mean(image, row, col);
                let id = self.palette.nearest(mean);
                let reference = norm(&self.palette.materials()[id].color);
                let scale = if reference > 0.0 { norm(&mean) / reference } else { 0.0 };
                cells.push((id, scale, mean));
            }
        }
        Ok((h, w, cells))
    }
}

impl Backbone for SyntheticBackbone {
    fn config(&self) -> BackboneConfig {
        self.config
    }

    fn extract_features(&self, image: &Image) -> Result<FeatureMap> {
        let (h, w, cells) = self.classify(image)?;
        let d = self.config.feature_dim;
        let amplitude = Self::NOISE_NORM / libm::sqrt(d as f64);
        let mut data = Tensor3::zeros(d, h, w);
        for (i, &(id, scale, mean)) in cells.iter().enumerate() {
            let (row, col) = (i / w, i % w);
            let mut noise = rng::stream(self.seed, &[rng::hash_f64s(&mean), row as u64, col as u64]);
            for (k, &base) in self.class_vectors[id].iter().enumerate() {
                let jitter = noise.random_range(-amplitude..=amplitude);
                data.set(k, row, col, scale * (base + jitter));
            }
        }
        FeatureMap::new(data, (image.height(), image.width()))
    }

    fn extract_saliency(&self, image: &Image) -> Result<SaliencyMask> {
        let (h, w, cells) = self.classify(image)?;
        let heads: Vec<Vec<f64>> = (0..Self::ATTENTION_HEADS)
            .map(|head| {
                let mut row: Vec<f64> = cells
                    .iter()
                    .enumerate()
                    .map(|(i, &(id, scale, mean))| {
                        let mut jitter = rng::stream(
                            self.seed ^ Self::ATTENTION_SALT,
                            &[rng::hash_f64s(&mean), head as u64, i as u64],
                        );
                        scale * self.palette.materials()[id].objectness * jitter.random_range(0.9..=1.1)
                    })
                    .collect();
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|a| *a /= total);
                }
                row
            })
            .collect();
        aggregate_attention(&heads, h, w)
    }
}

/// `count` mutually orthogonal unit vectors in `dim` dimensions, fixed for a
/// given `(count, dim)`.
fn orthonormal_vectors(count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut draw = rng::stream(SyntheticBackbone::CLASS_VECTOR_SEED, &[count as u64, dim as u64]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| draw.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}..{}, {}..{}]", self.label, self.rows.start, self.rows.end, self.cols.start, self.cols.end)
    }
}
