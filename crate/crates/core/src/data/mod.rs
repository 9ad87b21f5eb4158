//! Synthetic data, dataset plumbing and evaluation.

pub mod dataset;
pub mod metrics;
pub mod scene;

pub use dataset::{
    adjacent_pairs, read_annotation_sidecar, sidecar_path, split_dataset, tile_patches, touching_pairs_for,
    write_annotation_sidecar, Manifest, ManifestRecord, Patch, Split,
};
pub use metrics::{object_prf, pixel_prf, touching_separation_rate, EvalReport, PixelCounts, Prf};
pub use scene::{generate_scene, render_instances, Annotation, Nucleus, Phenotype, Scene, SceneSpec};

use std::path::Path;

use image::RgbImage;

use crate::error::Result;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.into_rgb8())
}
