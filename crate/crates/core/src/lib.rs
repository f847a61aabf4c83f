//! Numerical core of the LOCATE affordance-grounding pipeline.
//!
//! Everything here is pure computation over in-memory tensors: the frozen
//! backbone contract (with a deterministic synthetic backbone), the trainable
//! CAM head and its hand-written backward pass, interaction-region harvesting,
//! prototype clustering and PartIoU selection, the transfer losses, saliency
//! metrics, image preprocessing and the optimisation step.
//!
//! The crate is `no_std` and needs only `alloc`; file formats, datasets and
//! the command line live in the `locate` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod backbone;
pub mod cam;
pub mod error;
pub mod imageops;
pub mod loss;
pub mod metrics;
pub mod region;
pub mod rng;
pub mod select;
pub mod tensor;
pub mod train;

pub use backbone::{
    Backbone, BackboneConfig, FeatureMap, Image, Material, Palette, PatchLabel, PlantedLayout,
    Region, SaliencyMask, SyntheticBackbone,
};
pub use cam::{CamForward, CamHeadParams, ClassScores, LocalizationMaps};
pub use error::{Error, Result};
pub use loss::{LossReport, LossWeights};
pub use metrics::{GroundTruthHeatmap, MetricTriple};
pub use region::EmbeddingBag;
pub use select::{PrototypeSet, SelectionResult, SimilarityMaps};
pub use tensor::{Map2, Tensor3};
pub use train::{Batch, BatchRow, CamParams, StepReport, TrainConfig, Trainer, TransferMode};
