//! Synthetic shape-world data: scenes, simulated detections, patches and on-disk datasets.

pub mod dataset;
pub mod detections;
pub mod patch;
pub mod pnm;
pub mod scene;

pub use dataset::{build_dataset, Dataset, DatasetConfig, SceneRecord, Split};
pub use detections::{simulate_detections, JitterConfig, SimulatedDetection};
pub use patch::{crop_image, extract_patch, patch_tensor, PatchSample, Provenance};
pub use scene::{generate_scene, Instance, Scene, SceneConfig, ShapeFamily};
