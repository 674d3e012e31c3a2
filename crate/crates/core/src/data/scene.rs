//! Procedural "shape world" scenes.
//!
//! Each category is drawn from one of four shape families. Instances are composited in
//! z-order, so visible masks never overlap. Colours come from a small shared palette and
//! an abutting partner reuses its neighbour's palette entry, which makes touching
//! same-category instances hard to separate from local appearance alone.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Two stacked disks, the smaller one on top.
    Snowman,
    /// Elongated rotated rectangle.
    Bar,
    /// Annulus.
    Ring,
    /// T-shaped polyomino.
    Tee,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [ShapeFamily::Snowman, ShapeFamily::Bar, ShapeFamily::Ring, ShapeFamily::Tee];

    /// Family used for a category index; categories beyond four cycle through the list.
    pub fn for_category(category: usize) -> Self {
        Self::ALL[category % Self::ALL.len()]
    }
}

/// A concrete shape placed in scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub family: ShapeFamily,
    pub cx: f64,
    pub cy: f64,
    /// Rotation in radians.
    pub angle: f64,
    /// Family-specific size parameters.
    pub a: f64,
    pub b: f64,
}

impl Shape {
    pub fn random(family: ShapeFamily, rng: &mut impl Rng) -> Self {
        let (angle, a, b) = match family {
            ShapeFamily::Snowman => {
                let bottom = rng.random_range(7.0..10.0);
                (rng.random_range(-0.3..0.3), bottom, 0.6 * bottom)
            }
            ShapeFamily::Bar => (
                rng.random_range(0.0..PI),
                rng.random_range(12.0..18.0),
                rng.random_range(2.5..4.0),
            ),
            ShapeFamily::Ring => {
                let outer = rng.random_range(8.0..13.0);
                (0.0, outer, 0.55 * outer)
            }
            ShapeFamily::Tee => (rng.random_range(0.0..2.0 * PI), rng.random_range(5.0..7.0), 0.0),
        };
        Shape {
            family,
            cx: 0.0,
            cy: 0.0,
            angle,
            a,
            b,
        }
    }

    /// Radius of a disk around the centre that contains the whole shape.
    pub fn extent(&self) -> f64 {
        match self.family {
            ShapeFamily::Snowman => {
                let d = self.a + self.b - 2.0;
                d / 2.0 + self.a.max(self.b)
            }
            ShapeFamily::Bar => (self.a * self.a + self.b * self.b).sqrt(),
            ShapeFamily::Ring => self.a,
            ShapeFamily::Tee => self.a * (1.5f64 * 1.5 + 1.5 * 1.5).sqrt(),
        }
    }

    /// Whether the point (in scene coordinates) lies inside the shape.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        // Rotate the offset into the shape's frame.
        let x = c * dx + s * dy;
        let y = -s * dx + c * dy;
        match self.family {
            ShapeFamily::Snowman => {
                let (bottom, top) = (self.a, self.b);
                let d = bottom + top - 2.0;
                let in_bottom = x * x + (y - d / 2.0).powi(2) <= bottom * bottom;
                let in_top = x * x + (y + d / 2.0).powi(2) <= top * top;
                in_bottom || in_top
            }
            ShapeFamily::Bar => x.abs() <= self.a && y.abs() <= self.b,
            ShapeFamily::Ring => {
                let r2 = x * x + y * y;
                r2 <= self.a * self.a && r2 >= self.b * self.b
            }
            ShapeFamily::Tee => {
                let u = self.a;
                let bar = x.abs() <= 1.5 * u && (-1.5 * u..=-0.5 * u).contains(&y);
                let stem = x.abs() <= 0.5 * u && (-0.5 * u..=1.5 * u).contains(&y);
                bar || stem
            }
        }
    }

    /// Full (unoccluded) raster at pixel centres.
    pub fn rasterize(&self, size: usize) -> BinaryMask {
        let r = self.extent() + 1.0;
        let x_lo = (self.cx - r).floor().max(0.0) as usize;
        let y_lo = (self.cy - r).floor().max(0.0) as usize;
        let x_hi = ((self.cx + r).ceil().max(0.0) as usize).min(size);
        let y_hi = ((self.cy + r).ceil().max(0.0) as usize).min(size);
        let mut mask = BinaryMask::empty(size, size);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Relative category frequencies; its length is the number of categories.
    pub category_mix: Vec<f64>,
    /// Fraction of scenes built around an abutting same-category pair.
    pub overlap_rate: f64,
    /// Largest depth, as a fraction of the partner's extent, by which the second shape
    /// of a pair is pushed into the first (which it then occludes).
    pub pair_overlap: f64,
    pub min_visible_pixels: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 128,
            min_instances: 2,
            max_instances: 6,
            category_mix: vec![1.0; 4],
            overlap_rate: 0.6,
            pair_overlap: 0.5,
            min_visible_pixels: 40,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn num_categories(&self) -> usize {
        self.category_mix.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!("scene size {} is too small (min 32)", self.size)));
        }
        if self.min_instances < 2 || self.min_instances > self.max_instances {
            return Err(Error::Config(format!(
                "instance range {}..={} must start at 2 or more and be non-empty",
                self.min_instances, self.max_instances
            )));
        }
        if self.max_instances > 254 {
            return Err(Error::Config("at most 254 instances fit in an 8-bit label map".into()));
        }
        if self.category_mix.is_empty() || self.category_mix.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("category mix needs non-negative weights".into()));
        }
        if !(self.category_mix.iter().sum::<f64>() > 0.0) {
            return Err(Error::Config("category mix sums to zero".into()));
        }
        if !(0.0..1.0).contains(&self.pair_overlap) {
            return Err(Error::Config(format!("pair overlap {} outside [0, 1)", self.pair_overlap)));
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) {
            return Err(Error::Config(format!("overlap rate {} outside [0, 1]", self.overlap_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: usize,
    /// Visible pixels after occlusion.
    pub mask: BinaryMask,
    pub bbox: BBox,
    /// Paint order; higher values occlude lower ones.
    pub z_order: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub size: usize,
    /// Interleaved RGB, row-major.
    pub image: Vec<u8>,
    pub instances: Vec<Instance>,
    /// Rejected placement attempts before this scene was accepted.
    pub rejected_attempts: usize,
}

impl Scene {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.size + x);
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }

    /// Label map: instance index + 1 per pixel, 0 for background.
    pub fn label_map(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.size * self.size];
        for (i, inst) in self.instances.iter().enumerate() {
            for (l, &b) in labels.iter_mut().zip(inst.mask.bits()) {
                if b {
                    *l = (i + 1) as u8;
                }
            }
        }
        labels
    }

    /// Index pairs `(i, j)`, `i < j`, of same-category instances whose visible masks touch.
    pub fn abutting_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.instances.len() {
            for j in i + 1..self.instances.len() {
                let (a, b) = (&self.instances[i], &self.instances[j]);
                if a.category == b.category && a.mask.touches(&b.mask) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    /// Rebuilds a scene from its stored image and label map.
    pub fn from_labels(
        id: u64,
        seed: u64,
        size: usize,
        image: Vec<u8>,
        labels: &[u8],
        meta: &[(usize, usize)],
    ) -> Result<Scene> {
        if image.len() != size * size * 3 || labels.len() != size * size {
            return Err(Error::Data(format!("scene {id}: image or label map does not match size {size}")));
        }
        let mut instances = Vec::with_capacity(meta.len());
        for (i, &(category, z_order)) in meta.iter().enumerate() {
            let bits = labels.iter().map(|&l| l as usize == i + 1).collect();
            let mask = BinaryMask::from_bits(size, size, bits)?;
            let bbox = mask
                .tight_bbox()
                .ok_or_else(|| Error::Data(format!("scene {id}: instance {i} has no visible pixels")))?;
            instances.push(Instance {
                category,
                mask,
                bbox,
                z_order,
            });
        }
        Ok(Scene {
            id,
            seed,
            size,
            image,
            instances,
            rejected_attempts: 0,
        })
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [205.0, 70.0, 65.0],
    [70.0, 180.0, 90.0],
    [75.0, 95.0, 215.0],
    [215.0, 190.0, 70.0],
    [175.0, 80.0, 195.0],
    [70.0, 190.0, 195.0],
];

struct Placed {
    shape: Shape,
    category: usize,
    colour: [f64; 3],
}

/// Categories follow low-discrepancy sequences over scene ids rather than independent
/// draws, so the realized mix of a few hundred scenes stays close to the configured one.
const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Category whose cumulative-mix interval contains `u` in [0, 1).
fn category_at(mix: &[f64], u: f64) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = u * total;
    for (i, &w) in mix.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    mix.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn jitter_colour(base: [f64; 3], amount: f64, rng: &mut impl Rng) -> [f64; 3] {
    base.map(|c| c + rng.random_range(-amount..=amount))
}

fn place_free(shape: &mut Shape, size: usize, rng: &mut impl Rng) {
    let margin = (shape.extent() * 0.6).min(size as f64 / 2.0 - 1.0);
    shape.cx = rng.random_range(margin..size as f64 - margin);
    shape.cy = rng.random_range(margin..size as f64 - margin);
}

/// Slides `partner` away from `anchor` along a random direction until the two rasters
/// just stop overlapping, then pushes it back in by up to `depth` of its extent.
fn place_abutting(anchor: &Shape, partner: &mut Shape, size: usize, depth: f64, rng: &mut impl Rng) -> bool {
    let anchor_mask = anchor.rasterize(size);
    for _ in 0..24 {
        let theta = rng.random_range(0.0..2.0 * PI);
        let (dy, dx) = theta.sin_cos();
        let limit = 2.0 * (anchor.extent() + partner.extent());
        let push = rng.random_range(0.0..=depth) * partner.extent();
        let mut d = 0.0;
        while d <= limit {
            partner.cx = anchor.cx + d * dx;
            partner.cy = anchor.cy + d * dy;
            if !partner.rasterize(size).overlaps(&anchor_mask) {
                let d = (d - push).max(0.0);
                partner.cx = anchor.cx + d * dx;
                partner.cy = anchor.cy + d * dy;
                let e = partner.extent();
                let inside = partner.cx - e >= 0.0
                    && partner.cy - e >= 0.0
                    && partner.cx + e <= size as f64
                    && partner.cy + e <= size as f64;
                if inside {
                    return true;
                }
                break;
            }
            d += 0.5;
        }
    }
    false
}

fn try_generate(config: &SceneConfig, id: u64, rng: &mut ChaCha8Rng) -> Option<(Vec<Placed>, bool)> {
    let size = config.size;
    let n = rng.random_range(config.min_instances..=config.max_instances);
    let with_pair = rng.random_bool(config.overlap_rate);
    let mut placed: Vec<Placed> = Vec::with_capacity(n);

    if with_pair {
        let u = ((id + 1) as f64 * GOLDEN * 0.5).fract();
        let category = category_at(&config.category_mix, u);
        let family = ShapeFamily::for_category(category);
        let base = PALETTE[rng.random_range(0..PALETTE.len())];
        let mut anchor = Shape::random(family, rng);
        let e = anchor.extent();
        let lo = (2.0 * e).min(size as f64 / 2.0 - 1.0);
        anchor.cx = rng.random_range(lo..size as f64 - lo);
        anchor.cy = rng.random_range(lo..size as f64 - lo);
        let mut partner = Shape::random(family, rng);
        if !place_abutting(&anchor, &mut partner, size, config.pair_overlap, rng) {
            return None;
        }
        let colour = jitter_colour(base, 12.0, rng);
        placed.push(Placed {
            shape: anchor,
            category,
            colour,
        });
        placed.push(Placed {
            shape: partner,
            category,
            colour: jitter_colour(colour, 6.0, rng),
        });
    }
    while placed.len() < n {
        let slot = id * config.max_instances as u64 + placed.len() as u64;
        let category = category_at(&config.category_mix, (slot as f64 * GOLDEN).fract());
        let mut shape = Shape::random(ShapeFamily::for_category(category), rng);
        place_free(&mut shape, size, rng);
        let colour = jitter_colour(PALETTE[rng.random_range(0..PALETTE.len())], 12.0, rng);
        placed.push(Placed { shape, category, colour });
    }
    Some((placed, with_pair))
}

fn composite(config: &SceneConfig, placed: &[Placed], rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<BinaryMask>) {
    let size = config.size;
    let owner = {
        let mut owner = vec![usize::MAX; size * size];
        for (i, p) in placed.iter().enumerate() {
            for (o, &b) in owner.iter_mut().zip(p.shape.rasterize(size).bits()) {
                if b {
                    *o = i;
                }
            }
        }
        owner
    };
    let masks = (0..placed.len())
        .map(|i| BinaryMask::from_bits(size, size, owner.iter().map(|&o| o == i).collect()).expect("sized"))
        .collect();

    // Background: a dim colour with a gentle linear gradient.
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(30.0..80.0));
    let grad: [f64; 2] = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let noise = Normal::new(0.0, 8.0).expect("valid std");
    let mut image = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let o = owner[y * size + x];
            for c in 0..3 {
                let base = if o == usize::MAX {
                    bg[c] + grad[0] * x as f64 + grad[1] * y as f64
                } else {
                    placed[o].colour[c]
                };
                let v = base + noise.sample(rng);
                image[3 * (y * size + x) + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (image, masks)
}

/// Generates one scene; placement failures are retried with the same RNG stream.
pub fn generate_scene(config: &SceneConfig, id: u64, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..config.max_attempts {
        let Some((placed, with_pair)) = try_generate(config, id, &mut rng) else { continue };
        let (image, masks) = composite(config, &placed, &mut rng);
        if masks.iter().any(|m| m.count() < config.min_visible_pixels) {
            continue;
        }
        if with_pair && !masks[0].touches(&masks[1]) {
            continue;
        }
        let instances = placed
            .iter()
            .zip(masks)
            .enumerate()
            .map(|(z, (p, mask))| Instance {
                category: p.category,
                bbox: mask.tight_bbox().expect("non-empty mask"),
                mask,
                z_order: z,
            })
            .collect();
        return Ok(Scene {
            id,
            seed,
            size: config.size,
            image,
            instances,
            rejected_attempts: attempt,
        });
    }
    Err(Error::Data(format!(
        "scene {id}: no valid placement after {} attempts",
        config.max_attempts
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let config = SceneConfig::default();
        let a = generate_scene(&config, 3, 99).unwrap();
        let b = generate_scene(&config, 3, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, generate_scene(&config, 3, 100).unwrap().image);
    }

    #[test]
    fn visible_masks_are_disjoint_with_tight_boxes() {
        let config = SceneConfig::default();
        for seed in 0..20 {
            let scene = generate_scene(&config, seed, seed).unwrap();
            let n = scene.instances.len();
            assert!((config.min_instances..=config.max_instances).contains(&n));
            for i in 0..n {
                let inst = &scene.instances[i];
                assert_eq!(inst.mask.tight_bbox(), Some(inst.bbox));
                assert!(inst.mask.count() >= config.min_visible_pixels);
                for j in i + 1..n {
                    assert_eq!(inst.mask.intersection_count(&scene.instances[j].mask).unwrap(), 0);
                }
            }
        }
    }

    #[test]
    fn full_overlap_rate_always_yields_an_abutting_pair() {
        let config = SceneConfig {
            overlap_rate: 1.0,
            ..SceneConfig::default()
        };
        for seed in 0..40 {
            let scene = generate_scene(&config, seed, 1000 + seed).unwrap();
            // Exhaustive scan over every pixel pair of every same-category instance pair.
            let mut found = false;
            for a in &scene.instances {
                for b in &scene.instances {
                    if std::ptr::eq(a, b) || a.category != b.category {
                        continue;
                    }
                    for y in 0..scene.size {
                        for x in 0..scene.size {
                            if !a.mask.get(x, y) {
                                continue;
                            }
                            let right = x + 1 < scene.size && b.mask.get(x + 1, y);
                            let down = y + 1 < scene.size && b.mask.get(x, y + 1);
                            found |= right || down;
                        }
                    }
                }
            }
            assert!(found, "seed {seed}");
        }
    }

    #[test]
    fn label_map_round_trips_instances() {
        let scene = generate_scene(&SceneConfig::default(), 7, 7).unwrap();
        let meta: Vec<(usize, usize)> = scene.instances.iter().map(|i| (i.category, i.z_order)).collect();
        let rebuilt = Scene::from_labels(7, 7, scene.size, scene.image.clone(), &scene.label_map(), &meta).unwrap();
        assert_eq!(rebuilt.instances, scene.instances);
    }

    #[test]
    fn each_family_rasterizes_to_a_nonempty_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for family in ShapeFamily::ALL {
            let mut s = Shape::random(family, &mut rng);
            s.cx = 32.0;
            s.cy = 32.0;
            let m = s.rasterize(64);
            assert!(m.count() > 30, "{family:?}");
            let b = m.tight_bbox().unwrap();
            let e = s.extent();
            assert!((b.x0 as f64) >= 32.0 - e - 1.0 && (b.x1 as f64) <= 32.0 + e + 1.0);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let config = SceneConfig {
            min_instances: 1,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&config, 0, 0).is_err());
    }
}
