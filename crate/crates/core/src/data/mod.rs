//! Data handling: flat binary rasters, patch datasets with per-class
//! train/test sampling, synthetic confounded scenes, and classification-map
//! rendering.

pub mod houston;
mod patches;
mod raster;
mod render;
mod synth;

pub use patches::{sample_patches, PatchDataset, PerClassCounts, Sample, Split};
pub use raster::{load_labels, load_raster, save_labels, save_raster, LabelRaster, Raster};
pub use render::{classes_from_ppm, default_palette, parse_ppm, render_map, write_ppm};
pub use synth::{synth_scene, SceneSpec};
