//! Tiny synthetic dataset in the on-disk layout, rendered from planted
//! layouts in the standard palette.
//!
//! Every object has a body and one part per affordance. Egocentric images
//! show the whole object with parts in random positions, identically
//! distributed for every affordance label. An exocentric image for
//! affordance `a` shows a person touching part `a`; the other parts are
//! usually hidden. Each egocentric image gets a `<stem>.layout` sidecar, and
//! test images get `<stem>.txt` ground-truth points inside part `a`.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use locate_core::rng;
use locate_core::{Palette, PatchLabel, PlantedLayout, Region};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Setting};
use crate::dataset::save_image;
use crate::error::{LocateError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub affordances: Vec<String>,
    pub objects: Vec<String>,
    /// Test objects for the unseen setting; reusing a training object makes
    /// an invalid tree, which is useful for exercising validation.
    pub unseen_test_objects: Vec<String>,
    pub grid: usize,
    pub patch_size: usize,
    pub train_ego_per_group: usize,
    pub exo_per_group: usize,
    pub test_ego_per_group: usize,
    pub gt_points: usize,
    /// Probability that an exocentric image shows the object body.
    pub body_prob: f64,
    /// Probability that an exocentric image also shows another part.
    pub other_part_prob: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            affordances: vec!["hold".into(), "pour".into()],
            objects: vec!["cup".into(), "kettle".into()],
            unseen_test_objects: vec!["jug".into()],
            grid: 8,
            patch_size: 16,
            train_ego_per_group: 3,
            exo_per_group: 8,
            test_ego_per_group: 2,
            gt_points: 6,
            body_prob: 0.0,
            other_part_prob: 0.3,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn image_size(&self) -> usize {
        self.grid * self.patch_size
    }

    /// Images written for one setting.
    pub fn image_count(&self) -> usize {
        let groups = self.affordances.len() * self.objects.len();
        groups * (self.train_ego_per_group + self.exo_per_group)
            + self.affordances.len() * self.test_objects(Setting::Seen).len() * self.test_ego_per_group
    }

    fn test_objects(&self, setting: Setting) -> &[String] {
        match setting {
            Setting::Seen => &self.objects,
            Setting::Unseen => &self.unseen_test_objects,
        }
    }

    fn validate(&self) -> Result<()> {
        let parts = self.affordances.len();
        if parts == 0 || parts > 2 || self.objects.is_empty() {
            return Err(LocateError::Config("fixture needs 1 or 2 affordances and at least one object".into()));
        }
        if self.grid < 8 || self.patch_size == 0 {
            return Err(LocateError::Config("fixture grid must be at least 8 patches".into()));
        }
        Ok(())
    }

    /// Training configuration tuned to this world.
    pub fn config(&self, root: &Path) -> Config {
        let mut c = Config::default();
        c.backbone.patch_size = self.patch_size;
        c.backbone.feature_dim = 16;
        c.backbone.part_materials = self.affordances.len();
        c.data.root = Some(root.to_path_buf());
        c.data.batch_size = 4;
        c.data.crop = self.image_size();
        c.data.resize = self.image_size() + self.patch_size;
        c.train.lr = 0.015;
        c.train.epochs = Some(70);
        c.train.max_steps = Some(200);
        c.output.dir = root.join("runs");
        c
    }
}

fn rect(label: PatchLabel, material: usize, rows: Range<usize>, cols: Range<usize>) -> Region {
    Region { label, material, rows, cols }
}

fn part(a: usize) -> usize {
    Palette::FIRST_PART + a
}

/// Body 2×2 flanked by two 2×2 parts; with more than two parts the extra
/// ones are not drawn. Returns the layout and part `target`'s rectangle.
fn ego_layout(spec: &FixtureSpec, target: usize, rng: &mut ChaCha8Rng) -> Result<(PlantedLayout, Region)> {
    let g = spec.grid;
    let r0 = rng.random_range(0..=g - 2);
    let c0 = rng.random_range(0..=g - 6);
    let parts = spec.affordances.len();
    let left_first = rng.random_bool(0.5);
    let mut regions = vec![rect(PatchLabel::ObjectOther, Palette::BODY, r0..r0 + 2, c0 + 2..c0 + 4)];
    for a in 0..parts {
        let left = (a == 0) == left_first;
        let cols = if left { c0..c0 + 2 } else { c0 + 4..c0 + 6 };
        regions.push(rect(PatchLabel::ObjectPart, part(a), r0..r0 + 2, cols));
    }
    let target_region = regions[1 + target].clone();
    Ok((PlantedLayout::new(g, g, Palette::BACKGROUND, regions)?, target_region))
}

/// Person (3×2) beside part `a` (3×3), with the body (2×2) visible beyond
/// the part with probability `body_prob` and another part (2×1) after that
/// with probability `other_part_prob`. Mirrored at random.
fn exo_layout(spec: &FixtureSpec, a: usize, rng: &mut ChaCha8Rng) -> Result<PlantedLayout> {
    let g = spec.grid;
    let r0 = rng.random_range(0..=g - 3);
    let mut spans: Vec<(PatchLabel, usize, Range<usize>, Range<usize>)> = vec![
        (PatchLabel::Human, Palette::HUMAN, r0..r0 + 3, 0..2),
        (PatchLabel::ObjectPart, part(a), r0..r0 + 3, 2..5),
    ];
    let mut width = 5;
    let pr = r0 + rng.random_range(0..=1);
    if rng.random_bool(spec.body_prob) {
        spans.push((PatchLabel::ObjectOther, Palette::BODY, pr..pr + 2, width..width + 2));
        width += 2;
    }
    if spec.affordances.len() > 1 && rng.random_bool(spec.other_part_prob) {
        spans.push((PatchLabel::ObjectOther, part(1 - a), pr..pr + 2, width..width + 1));
        width += 1;
    }
    let c0 = rng.random_range(0..=g - width);
    let mirror = rng.random_bool(0.5);
    let regions = spans
        .into_iter()
        .map(|(label, m, rows, cols)| {
            let cols = if mirror { g - c0 - cols.end..g - c0 - cols.start } else { c0 + cols.start..c0 + cols.end };
            rect(label, m, rows, cols)
        })
        .collect();
    Ok(PlantedLayout::new(g, g, Palette::BACKGROUND, regions)?)
}

fn write_image(path: &Path, layout: &PlantedLayout, palette: &Palette, patch: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LocateError::io(dir, e))?;
    }
    save_image(path, &layout.render(palette, patch)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LocateError::io(path, e))
}

/// Writes `<root>/<setting>/...` and `<root>/locate.toml`; returns the
/// config path.
pub fn generate(root: &Path, spec: &FixtureSpec, setting: Setting) -> Result<PathBuf> {
    spec.validate()?;
    let palette = Palette::standard(spec.affordances.len())?;
    let base = root.join(setting.as_str());
    let p = spec.patch_size;
    for (a, aff) in spec.affordances.iter().enumerate() {
        for (o, obj) in spec.objects.iter().enumerate() {
            let mut r = rng::stream(spec.seed, &[0, a as u64, o as u64]);
            let train = base.join("train");
            for i in 0..spec.exo_per_group {
                let layout = exo_layout(spec, a, &mut r)?;
                write_image(&train.join("exocentric").join(aff).join(obj).join(format!("exo_{i:03}.png")), &layout, &palette, p)?;
            }
            for i in 0..spec.train_ego_per_group {
                let (layout, _) = ego_layout(spec, a, &mut r)?;
                let path = train.join("egocentric").join(aff).join(obj).join(format!("ego_{i:03}.png"));
                write_image(&path, &layout, &palette, p)?;
                write_text(&path.with_extension("layout"), &layout.to_text())?;
            }
        }
        for (o, obj) in spec.test_objects(setting).iter().enumerate() {
            let mut r = rng::stream(spec.seed, &[1, a as u64, o as u64]);
            for i in 0..spec.test_ego_per_group {
                let (layout, target) = ego_layout(spec, a, &mut r)?;
                let path = base.join("test").join("egocentric").join(aff).join(obj).join(format!("test_{i:03}.png"));
                write_image(&path, &layout, &palette, p)?;
                write_text(&path.with_extension("layout"), &layout.to_text())?;
                let points: String = (0..spec.gt_points)
                    .map(|_| {
                        let x = r.random_range(target.cols.start * p..target.cols.end * p);
                        let y = r.random_range(target.rows.start * p..target.rows.end * p);
                        format!("{x} {y}\n")
                    })
                    .collect();
                write_text(&path.with_extension("txt"), &points)?;
            }
        }
    }
    let mut config = spec.config(root);
    config.data.setting = setting;
    let path = root.join("locate.toml");
    write_text(&path, &config.to_toml())?;
    Ok(path)
}
