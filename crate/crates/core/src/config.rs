//! Run configuration as flat `key = value` text.
//!
//! Every key has a default. [`RunConfig::render`] writes all keys in a fixed order with
//! canonical value formatting, so parsing a rendered config and rendering it again gives
//! the same bytes.

use std::fmt::Write as _;

use crate::data::DatasetConfig;
use crate::engine::{StageSchedule, DEFAULT_ITERATIONS};
use crate::error::{Error, Result};
use crate::metrics::APR_THRESHOLDS;
use crate::model::ArchDescriptor;
use crate::postprocess::{SlicParams, BOX_NMS_THRESHOLD, REGION_NMS_THRESHOLD};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Test-time iterations M.
    pub iterations: usize,
    pub thresholds: Vec<f64>,
    pub superpixels: bool,
    pub slic: SlicParams,
    pub box_nms: f64,
    pub region_nms: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iterations: DEFAULT_ITERATIONS,
            thresholds: APR_THRESHOLDS.to_vec(),
            superpixels: false,
            slic: SlicParams::default(),
            box_nms: BOX_NMS_THRESHOLD,
            region_nms: REGION_NMS_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub arch: ArchDescriptor,
    pub schedule: StageSchedule,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            arch: ArchDescriptor::default(),
            schedule: StageSchedule::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn list<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_one(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {value:?}"))),
    }
}

impl RunConfig {
    /// Recognized keys, in render order.
    pub const KEYS: [&'static str; 33] = [
        "seed",
        "num_scenes",
        "scene_size",
        "min_instances",
        "max_instances",
        "category_mix",
        "overlap_rate",
        "pair_overlap",
        "min_visible_pixels",
        "placement_attempts",
        "jitter_per_instance",
        "jitter_shift",
        "jitter_scale",
        "jitter_min_iou",
        "val_fraction",
        "patch_size",
        "heatmap_size",
        "block_channels",
        "block_strides",
        "kernel_size",
        "head_width",
        "stage_iterations",
        "batch_size",
        "learning_rate",
        "momentum",
        "iterations",
        "thresholds",
        "superpixels",
        "superpixel_count",
        "superpixel_compactness",
        "superpixel_iterations",
        "box_nms",
        "region_nms",
    ];

    /// Current value of `key` in canonical form.
    pub fn get(&self, key: &str) -> Result<String> {
        let d = &self.dataset;
        let e = &self.eval;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "num_scenes" => d.num_scenes.to_string(),
            "scene_size" => d.scene.size.to_string(),
            "min_instances" => d.scene.min_instances.to_string(),
            "max_instances" => d.scene.max_instances.to_string(),
            "category_mix" => list(&d.scene.category_mix),
            "overlap_rate" => d.scene.overlap_rate.to_string(),
            "pair_overlap" => d.scene.pair_overlap.to_string(),
            "min_visible_pixels" => d.scene.min_visible_pixels.to_string(),
            "placement_attempts" => d.scene.max_attempts.to_string(),
            "jitter_per_instance" => d.jitter.per_instance.to_string(),
            "jitter_shift" => d.jitter.max_shift.to_string(),
            "jitter_scale" => d.jitter.max_scale.to_string(),
            "jitter_min_iou" => d.jitter.min_iou.to_string(),
            "val_fraction" => d.val_fraction.to_string(),
            "patch_size" => self.arch.patch_size.to_string(),
            "heatmap_size" => self.arch.heatmap_size.to_string(),
            "block_channels" => list(&self.arch.block_channels),
            "block_strides" => list(&self.arch.block_strides),
            "kernel_size" => self.arch.kernel_size.to_string(),
            "head_width" => self.arch.head_width.to_string(),
            "stage_iterations" => list(&self.schedule.iterations),
            "batch_size" => self.schedule.batch_size.to_string(),
            "learning_rate" => self.schedule.learning_rate.to_string(),
            "momentum" => self.schedule.momentum.to_string(),
            "iterations" => e.iterations.to_string(),
            "thresholds" => list(&e.thresholds),
            "superpixels" => (if e.superpixels { "on" } else { "off" }).to_string(),
            "superpixel_count" => e.slic.count.to_string(),
            "superpixel_compactness" => e.slic.compactness.to_string(),
            "superpixel_iterations" => e.slic.iterations.to_string(),
            "box_nms" => e.box_nms.to_string(),
            "region_nms" => e.region_nms.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.dataset;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = parse_one(key, v)?,
            "num_scenes" => d.num_scenes = parse_one(key, v)?,
            "scene_size" => d.scene.size = parse_one(key, v)?,
            "min_instances" => d.scene.min_instances = parse_one(key, v)?,
            "max_instances" => d.scene.max_instances = parse_one(key, v)?,
            "category_mix" => d.scene.category_mix = parse_list(key, v)?,
            "overlap_rate" => d.scene.overlap_rate = parse_one(key, v)?,
            "pair_overlap" => d.scene.pair_overlap = parse_one(key, v)?,
            "min_visible_pixels" => d.scene.min_visible_pixels = parse_one(key, v)?,
            "placement_attempts" => d.scene.max_attempts = parse_one(key, v)?,
            "jitter_per_instance" => d.jitter.per_instance = parse_one(key, v)?,
            "jitter_shift" => d.jitter.max_shift = parse_one(key, v)?,
            "jitter_scale" => d.jitter.max_scale = parse_one(key, v)?,
            "jitter_min_iou" => d.jitter.min_iou = parse_one(key, v)?,
            "val_fraction" => d.val_fraction = parse_one(key, v)?,
            "patch_size" => self.arch.patch_size = parse_one(key, v)?,
            "heatmap_size" => self.arch.heatmap_size = parse_one(key, v)?,
            "block_channels" => self.arch.block_channels = parse_list(key, v)?,
            "block_strides" => self.arch.block_strides = parse_list(key, v)?,
            "kernel_size" => self.arch.kernel_size = parse_one(key, v)?,
            "head_width" => self.arch.head_width = parse_one(key, v)?,
            "stage_iterations" => self.schedule.iterations = parse_list(key, v)?,
            "batch_size" => self.schedule.batch_size = parse_one(key, v)?,
            "learning_rate" => self.schedule.learning_rate = parse_one(key, v)?,
            "momentum" => self.schedule.momentum = parse_one(key, v)?,
            "iterations" => e.iterations = parse_one(key, v)?,
            "thresholds" => e.thresholds = parse_list(key, v)?,
            "superpixels" => e.superpixels = parse_bool(key, v)?,
            "superpixel_count" => e.slic.count = parse_one(key, v)?,
            "superpixel_compactness" => e.slic.compactness = parse_one(key, v)?,
            "superpixel_iterations" => e.slic.iterations = parse_one(key, v)?,
            "box_nms" => e.box_nms = parse_one(key, v)?,
            "region_nms" => e.region_nms = parse_one(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        self.sync();
        Ok(())
    }

    /// Keeps the values shared between sections consistent.
    fn sync(&mut self) {
        self.arch.num_categories = self.dataset.num_categories();
        self.dataset.patch_size = self.arch.patch_size;
        self.dataset.heatmap_size = self.arch.heatmap_size;
    }

    /// Applies `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch.validate()?;
        self.schedule.validate()?;
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::Config(format!("thresholds {:?} must lie in [0, 1)", self.eval.thresholds)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_parse_back() {
        let c = RunConfig::default();
        let text = c.render();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), text);
        assert!(text.contains("category_mix = 1,1,1,1\n"));
        assert!(text.contains("learning_rate = 0.001\n"));
    }

    #[test]
    fn comments_blank_lines_and_spacing_are_tolerated() {
        let c = RunConfig::parse("# header\n\n  seed=7   # trailing\nstage_iterations = 5, 6\nsuperpixels = on\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.schedule.iterations, vec![5, 6]);
        assert!(c.eval.superpixels);
        assert!(c.render().contains("stage_iterations = 5,6\n"));
    }

    #[test]
    fn bad_lines_name_the_line() {
        let err = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(RunConfig::parse("seed 1\n").is_err());
        assert!(RunConfig::parse("seed = x\n").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn category_count_follows_the_mix() {
        let c = RunConfig::parse("category_mix = 1,2,1\npatch_size = 32\n").unwrap();
        assert_eq!(c.arch.num_categories, 3);
        assert_eq!(c.dataset.patch_size, 32);
    }

    #[test]
    fn every_listed_key_round_trips() {
        let c = RunConfig::default();
        for key in RunConfig::KEYS {
            let mut d = RunConfig::default();
            d.set(key, &c.get(key).unwrap()).unwrap();
            assert_eq!(d, c, "{key}");
        }
    }
}
