//! Harvesting embeddings from high-activation interaction regions.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::FeatureMap;
use crate::cam::{normalize_map, LocalizationMaps};
use crate::error::{Error, Result};

/// Embeddings `[L, D]` concatenated over images, with their provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingBag {
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub per_image_counts: Vec<usize>,
    /// `(image index, row, col)` of each embedding.
    pub source_coords: Vec<(usize, usize, usize)>,
}

impl EmbeddingBag {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Copies the features at every cell whose normalised ground-truth
/// activation is strictly above `tau`, image by image in row-major order.
pub fn extract_interaction_embeddings(
    features: &[FeatureMap],
    maps: &[LocalizationMaps],
    gt_class: usize,
    tau: f64,
) -> Result<EmbeddingBag> {
    if features.len() != maps.len() {
        return Err(Error::Shape(format!("{} feature maps but {} map stacks", features.len(), maps.len())));
    }
    let dim = features.first().map_or(0, FeatureMap::dim);
    let mut bag = EmbeddingBag { dim, ..Default::default() };
    for (n, (f, m)) in features.iter().zip(maps).enumerate() {
        if f.patch_grid() != m.grid() {
            return Err(Error::Shape(format!(
                "image {n}: feature grid {:?} vs map grid {:?}",
                f.patch_grid(),
                m.grid()
            )));
        }
        if f.dim() != dim {
            return Err(Error::Shape(format!("image {n}: feature width {} vs {dim}", f.dim())));
        }
        let activation = normalize_map(&m.channel(gt_class)?);
        let (_, w) = f.patch_grid();
        let mut count = 0;
        for (i, &a) in activation.as_slice().iter().enumerate() {
            if a > tau {
                let (row, col) = (i / w, i % w);
                bag.embeddings.push(f.embedding(row, col));
                bag.source_coords.push((n, row, col));
                count += 1;
            }
        }
        bag.per_image_counts.push(count);
    }
    Ok(bag)
}
