//! Dataset generation and its on-disk layout.
//!
//! ```text
//! <dir>/scenes/<id>.ppm          scene image (P6)
//! <dir>/scenes/<id>.labels.pgm   instance index + 1 per pixel (P5)
//! <dir>/patches/<n>.ppm          patch image, P×P
//! <dir>/patches/<n>.mask.pgm     ground-truth mask, H×H, 255 = foreground
//! <dir>/index.json               instances, detections, splits, patch provenance
//! <dir>/manifest.json            config echo, seeds and counts
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::ArchDescriptor;

use super::detections::{simulate_detections, JitterConfig, SimulatedDetection};
use super::patch::{extract_patch, mean_box_area, normalize_area_weights, PatchSample};
use super::pnm::{encode_pgm, encode_ppm, read_pnm};
use super::scene::{generate_scene, Scene, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub scene: SceneConfig,
    pub jitter: JitterConfig,
    pub val_fraction: f64,
    pub patch_size: usize,
    pub heatmap_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let arch = ArchDescriptor::default();
        DatasetConfig {
            num_scenes: 500,
            scene: SceneConfig::default(),
            jitter: JitterConfig::default(),
            val_fraction: 0.2,
            patch_size: arch.patch_size,
            heatmap_size: arch.heatmap_size,
        }
    }
}

impl DatasetConfig {
    pub fn num_categories(&self) -> usize {
        self.scene.num_categories()
    }

    /// Default architecture with this dataset's patch/heatmap sizes and category count.
    pub fn arch(&self) -> ArchDescriptor {
        ArchDescriptor {
            patch_size: self.patch_size,
            heatmap_size: self.heatmap_size,
            num_categories: self.num_categories(),
            ..ArchDescriptor::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.jitter.validate()?;
        if self.num_scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val fraction {} outside [0, 1)", self.val_fraction)));
        }
        self.arch().validate()
    }
}

/// Split assignment from a hash of the scene id alone.
pub fn split_for(scene_id: u64, val_fraction: f64) -> Split {
    let mut z = scene_id.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    let u = (z >> 11) as f64 / (1u64 << 53) as f64;
    if u < val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

/// Seed of one scene, derived from the dataset seed.
pub fn scene_seed(seed: u64, scene_id: u64) -> u64 {
    seed ^ scene_id
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene: Scene,
    pub split: Split,
    pub detections: Vec<SimulatedDetection>,
}

impl SceneRecord {
    /// Whether the instance touches another instance of its own category.
    pub fn instance_abuts(&self, instance: usize) -> bool {
        self.scene
            .abutting_pairs()
            .iter()
            .any(|&(a, b)| a == instance || b == instance)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    /// Scene ids that could not be placed and were left out.
    pub skipped_scenes: Vec<u64>,
    pub rejected_attempts: usize,
    pub missed_jitter_boxes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub scenes: Vec<SceneRecord>,
    /// Indexed by `sample_id`.
    pub patches: Vec<PatchSample>,
    pub report: GenerationReport,
}

#[derive(Serialize, Deserialize)]
struct InstanceEntry {
    category: usize,
    bbox: BBox,
    z_order: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneEntry {
    id: u64,
    seed: u64,
    split: Split,
    instances: Vec<InstanceEntry>,
    detections: Vec<SimulatedDetection>,
}

#[derive(Serialize, Deserialize)]
struct PatchEntry {
    sample_id: usize,
    scene: u64,
    detection: usize,
    instance: usize,
    split: Split,
    category: usize,
    bbox: BBox,
    area_weight: f64,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    scenes: Vec<SceneEntry>,
    patches: Vec<PatchEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub seed: u64,
    pub scene_seed_rule: String,
    pub scenes: BTreeMap<Split, usize>,
    pub patches: BTreeMap<Split, usize>,
    pub patches_per_category: BTreeMap<Split, Vec<usize>>,
    pub report: GenerationReport,
}

impl Dataset {
    /// Generates every scene, its detections and patches in memory.
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
        config.validate()?;
        let arch = config.arch();
        let mut report = GenerationReport::default();
        let mut scenes = Vec::with_capacity(config.num_scenes);
        for id in 0..config.num_scenes as u64 {
            let s = scene_seed(seed, id);
            let scene = match generate_scene(&config.scene, id, s) {
                Ok(scene) => scene,
                Err(Error::Data(_)) => {
                    report.skipped_scenes.push(id);
                    report.rejected_attempts += config.scene.max_attempts;
                    continue;
                }
                Err(e) => return Err(e),
            };
            report.rejected_attempts += scene.rejected_attempts;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            rng.set_stream(1);
            let (detections, missed) = simulate_detections(&scene, &config.jitter, &mut rng)?;
            report.missed_jitter_boxes += missed;
            scenes.push(SceneRecord {
                split: split_for(id, config.val_fraction),
                scene,
                detections,
            });
        }
        let patches = extract_all(&scenes, &arch)?;
        Ok(Dataset {
            config: config.clone(),
            seed,
            scenes,
            patches,
            report,
        })
    }

    pub fn arch(&self) -> ArchDescriptor {
        self.config.arch()
    }

    pub fn split_of(&self, sample: &PatchSample) -> Split {
        self.scene(sample.provenance.scene).map_or(Split::Train, |r| r.split)
    }

    pub fn scene(&self, id: u64) -> Option<&SceneRecord> {
        self.scenes
            .binary_search_by_key(&id, |r| r.scene.id)
            .ok()
            .map(|i| &self.scenes[i])
    }

    pub fn patches_in(&self, split: Split) -> Vec<&PatchSample> {
        self.patches.iter().filter(|p| self.split_of(p) == split).collect()
    }

    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(move |r| r.split == split)
    }

    pub fn manifest(&self) -> Manifest {
        let mut scenes = BTreeMap::new();
        let mut patches = BTreeMap::new();
        let mut per_cat = BTreeMap::new();
        for split in [Split::Train, Split::Val] {
            scenes.insert(split, self.scenes_in(split).count());
            let ps = self.patches_in(split);
            patches.insert(split, ps.len());
            let mut counts = vec![0usize; self.config.num_categories()];
            for p in ps {
                counts[p.category] += 1;
            }
            per_cat.insert(split, counts);
        }
        Manifest {
            config: self.config.clone(),
            seed: self.seed,
            scene_seed_rule: "dataset seed xor scene id".into(),
            scenes,
            patches,
            patches_per_category: per_cat,
            report: self.report.clone(),
        }
    }

    /// Writes the dataset below `dir`, creating directories as needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let scene_dir = dir.join("scenes");
        let patch_dir = dir.join("patches");
        for d in [dir, &scene_dir, &patch_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for r in &self.scenes {
            let s = &r.scene;
            write_file(&scene_dir.join(format!("{}.ppm", s.id)), &encode_ppm(s.size, s.size, &s.image))?;
            write_file(
                &scene_dir.join(format!("{}.labels.pgm", s.id)),
                &encode_pgm(s.size, s.size, &s.label_map()),
            )?;
        }
        for p in &self.patches {
            let n = p.sample_id;
            write_file(
                &patch_dir.join(format!("{n}.ppm")),
                &encode_ppm(p.patch_size, p.patch_size, &p.patch),
            )?;
            let mask: Vec<u8> = p.gt_mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_file(
                &patch_dir.join(format!("{n}.mask.pgm")),
                &encode_pgm(p.gt_mask.width(), p.gt_mask.height(), &mask),
            )?;
        }
        let index = IndexFile {
            scenes: self
                .scenes
                .iter()
                .map(|r| SceneEntry {
                    id: r.scene.id,
                    seed: r.scene.seed,
                    split: r.split,
                    instances: r
                        .scene
                        .instances
                        .iter()
                        .map(|i| InstanceEntry {
                            category: i.category,
                            bbox: i.bbox,
                            z_order: i.z_order,
                        })
                        .collect(),
                    detections: r.detections.clone(),
                })
                .collect(),
            patches: self
                .patches
                .iter()
                .map(|p| PatchEntry {
                    sample_id: p.sample_id,
                    scene: p.provenance.scene,
                    detection: p.provenance.detection,
                    instance: p.provenance.instance,
                    split: self.split_of(p),
                    category: p.category,
                    bbox: p.provenance.bbox,
                    area_weight: p.area_weight,
                })
                .collect(),
        };
        write_json(&dir.join("index.json"), &index)?;
        write_json(&dir.join("manifest.json"), &self.manifest())
    }

    /// Loads a dataset written by [`Dataset::write`]. Patches are re-extracted from the
    /// scenes, since they are a pure function of their provenance.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let index: IndexFile = read_json(&dir.join("index.json"))?;
        let size = manifest.config.scene.size;
        let mut scenes = Vec::with_capacity(index.scenes.len());
        for e in index.scenes {
            let (w, h, ch, image) = read_pnm(&dir.join("scenes").join(format!("{}.ppm", e.id)))?;
            let (lw, lh, lch, labels) = read_pnm(&dir.join("scenes").join(format!("{}.labels.pgm", e.id)))?;
            if (w, h, ch, lw, lh, lch) != (size, size, 3, size, size, 1) {
                return Err(Error::Data(format!("scene {}: stored images are not {size}×{size}", e.id)));
            }
            let meta: Vec<(usize, usize)> = e.instances.iter().map(|i| (i.category, i.z_order)).collect();
            let scene = Scene::from_labels(e.id, e.seed, size, image, &labels, &meta)?;
            for (inst, entry) in scene.instances.iter().zip(&e.instances) {
                if inst.bbox != entry.bbox {
                    return Err(Error::Data(format!("scene {}: label map disagrees with index boxes", e.id)));
                }
            }
            scenes.push(SceneRecord {
                scene,
                split: e.split,
                detections: e.detections,
            });
        }
        if scenes.windows(2).any(|w| w[0].scene.id >= w[1].scene.id) {
            return Err(Error::Data("index scenes are not sorted by id".into()));
        }
        let patches = extract_all(&scenes, &manifest.config.arch())?;
        if patches.len() != index.patches.len() {
            return Err(Error::Data(format!(
                "index lists {} patches but the scenes yield {}",
                index.patches.len(),
                patches.len()
            )));
        }
        Ok(Dataset {
            config: manifest.config,
            seed: manifest.seed,
            scenes,
            patches,
            report: manifest.report,
        })
    }
}

fn extract_all(scenes: &[SceneRecord], arch: &ArchDescriptor) -> Result<Vec<PatchSample>> {
    let mut patches = Vec::new();
    for r in scenes {
        for (d, det) in r.detections.iter().enumerate() {
            let mut p = extract_patch(&r.scene, &det.bbox, det.instance, d, arch)?;
            p.sample_id = patches.len();
            patches.push(p);
        }
    }
    let train: Vec<PatchSample> = patches
        .iter()
        .filter(|p| {
            scenes
                .iter()
                .find(|r| r.scene.id == p.provenance.scene)
                .is_some_and(|r| r.split == Split::Train)
        })
        .cloned()
        .collect();
    let mean = if train.is_empty() {
        mean_box_area(&patches)
    } else {
        mean_box_area(&train)
    };
    normalize_area_weights(&mut patches, mean);
    Ok(patches)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Internal(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Generates a dataset and writes it to `dir`.
pub fn build_dataset(config: &DatasetConfig, seed: u64, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(config, seed)?;
    ds.write(dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            num_scenes: 12,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn split_is_a_function_of_scene_id() {
        let val = (0..10_000).filter(|&i| split_for(i, 0.2) == Split::Val).count();
        assert!((1800..2200).contains(&val), "{val}");
        assert_eq!(split_for(42, 0.2), split_for(42, 0.2));
        assert!((0..100).all(|i| split_for(i, 0.0) == Split::Train));
    }

    #[test]
    fn train_area_weights_average_to_one() {
        let ds = Dataset::generate(&small(), 3).unwrap();
        let train = ds.patches_in(Split::Train);
        let mean = train.iter().map(|p| p.area_weight).sum::<f64>() / train.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
        assert!(ds.patches.iter().all(|p| p.area_weight > 0.0));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&small(), 9, dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.scenes.len(), ds.scenes.len());
        for (a, b) in loaded.scenes.iter().zip(&ds.scenes) {
            assert_eq!(a.scene.instances, b.scene.instances);
            assert_eq!(a.scene.image, b.scene.image);
            assert_eq!(a.detections, b.detections);
        }
        assert_eq!(loaded.patches, ds.patches);
    }

    #[test]
    fn manifest_counts_match_patch_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&small(), 4, dir.path()).unwrap();
        let m = ds.manifest();
        let listed: usize = m.patches_per_category.values().flatten().sum();
        let files = fs::read_dir(dir.path().join("patches"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".mask.pgm"))
            .count();
        assert_eq!(listed, files);
        assert_eq!(m.patches.values().sum::<usize>(), files);
    }

    #[test]
    fn loading_a_truncated_dataset_fails() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&small(), 4, dir.path()).unwrap();
        fs::remove_file(dir.path().join("scenes/3.ppm")).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
    }
}
