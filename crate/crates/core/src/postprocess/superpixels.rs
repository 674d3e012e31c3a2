//! SLIC-style superpixels and heat projection onto them.

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    /// Requested number of superpixels.
    pub count: usize,
    /// Weight of spatial distance relative to colour distance.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            count: 200,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Partition of an image into 4-connected, non-empty labels `0..count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    count: usize,
}

impl SuperpixelMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    x: f64,
    y: f64,
    rgb: [f64; 3],
}

fn grid_dims(width: usize, height: usize, k: usize) -> (usize, usize) {
    let nx = ((k as f64 * width as f64 / height as f64).sqrt().round() as usize).clamp(1, width);
    let ny = ((k as f64 / nx as f64).round() as usize).clamp(1, height);
    (nx, ny)
}

/// Clusters pixels in (x, y, r, g, b) from grid seeds, then enforces connectivity.
///
/// `image` is interleaved RGB.
pub fn compute_superpixels(image: &[u8], width: usize, height: usize, params: &SlicParams) -> Result<SuperpixelMap> {
    let n = width * height;
    if image.len() != 3 * n || n == 0 {
        return Err(Error::Config(format!("image buffer of {} bytes is not {width}×{height} RGB", image.len())));
    }
    if params.count == 0 || params.count > n {
        return Err(Error::Config(format!(
            "superpixel count {} must lie in 1..={n} for a {width}×{height} image",
            params.count
        )));
    }
    let (nx, ny) = grid_dims(width, height, params.count);
    let step = ((n as f64) / (nx * ny) as f64).sqrt();
    let pixel = |i: usize| [image[3 * i] as f64, image[3 * i + 1] as f64, image[3 * i + 2] as f64];

    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * width as f64 / nx as f64;
            let y = (j as f64 + 0.5) * height as f64 / ny as f64;
            let idx = (y as usize).min(height - 1) * width + (x as usize).min(width - 1);
            centers.push(Center { x, y, rgb: pixel(idx) });
        }
    }

    let spatial = (params.compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut labels = vec![u32::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    for _ in 0..params.iterations.max(1) {
        best.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cx, cy) = (c.x.floor() as isize, c.y.floor() as isize);
            let y_range = (cy - radius).max(0)..(cy + radius + 1).min(height as isize);
            let x_range = (cx - radius).max(0)..(cx + radius + 1).min(width as isize);
            for y in y_range {
                for x in x_range.clone() {
                    let i = y as usize * width + x as usize;
                    let p = pixel(i);
                    let dc: f64 = (0..3).map(|ch| (p[ch] - c.rgb[ch]).powi(2)).sum();
                    let ds = (x as f64 + 0.5 - c.x).powi(2) + (y as f64 + 0.5 - c.y).powi(2);
                    let d = dc + spatial * ds;
                    if d < best[i] {
                        best[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        // Pixels outside every window take the spatially nearest centre.
        for i in 0..n {
            if labels[i] != u32::MAX {
                continue;
            }
            let (x, y) = ((i % width) as f64 + 0.5, (i / width) as f64 + 0.5);
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1.x - x).powi(2) + (a.1.y - y).powi(2);
                    let db = (b.1.x - x).powi(2) + (b.1.y - y).powi(2);
                    da.total_cmp(&db)
                })
                .map(|(k, _)| k)
                .expect("at least one centre");
            labels[i] = nearest as u32;
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let s = &mut sums[l as usize];
            let p = pixel(i);
            s[0] += (i % width) as f64 + 0.5;
            s[1] += (i / width) as f64 + 0.5;
            s[2] += p[0];
            s[3] += p[1];
            s[4] += p[2];
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                *c = Center {
                    x: s[0] / s[5],
                    y: s[1] / s[5],
                    rgb: [s[2] / s[5], s[3] / s[5], s[4] / s[5]],
                };
            }
        }
    }

    let labels = enforce_connectivity(&labels, width, height);
    let count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(SuperpixelMap {
        width,
        height,
        labels,
        count,
    })
}

fn neighbours(i: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % width, i / width);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < width).then(|| i + 1),
        (y > 0).then(|| i - width),
        (y + 1 < height).then(|| i + width),
    ]
    .into_iter()
    .flatten()
}

/// 4-connected components of equal labels, numbered in raster order of first pixel.
fn components(labels: &[u32], width: usize, height: usize) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            for j in neighbours(i, width, height) {
                if comp[j] == usize::MAX && labels[j] == labels[start] {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Keeps the largest component of every label; every other component joins the largest
/// kept region it touches. Labels are then renumbered in raster order.
fn enforce_connectivity(labels: &[u32], width: usize, height: usize) -> Vec<u32> {
    let (comp, sizes) = components(labels, width, height);
    let ncomp = sizes.len();
    let mut comp_label = vec![0u32; ncomp];
    for (i, &c) in comp.iter().enumerate() {
        comp_label[c] = labels[i];
    }
    // Largest component per label; ties go to the earlier component.
    let mut largest: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for c in 0..ncomp {
        let e = largest.entry(comp_label[c]).or_insert(c);
        if sizes[c] > sizes[*e] {
            *e = c;
        }
    }
    // owner[c]: the kept component that c has been merged into.
    let mut owner: Vec<Option<usize>> = (0..ncomp).map(|c| (largest[&comp_label[c]] == c).then_some(c)).collect();
    let mut region_size: Vec<usize> = sizes.clone();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); ncomp];
    for i in 0..labels.len() {
        for j in neighbours(i, width, height) {
            if comp[i] != comp[j] && !adjacency[comp[i]].contains(&comp[j]) {
                adjacency[comp[i]].push(comp[j]);
            }
        }
    }
    loop {
        let mut changed = false;
        for c in 0..ncomp {
            if owner[c].is_some() {
                continue;
            }
            let target = adjacency[c]
                .iter()
                .filter_map(|&a| owner[a])
                .max_by(|&a, &b| region_size[a].cmp(&region_size[b]).then(b.cmp(&a)));
            if let Some(t) = target {
                owner[c] = Some(t);
                region_size[t] += sizes[c];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut renumber = vec![u32::MAX; ncomp];
    let mut next = 0u32;
    comp.iter()
        .map(|&c| {
            let root = owner[c].unwrap_or(c);
            if renumber[root] == u32::MAX {
                renumber[root] = next;
                next += 1;
            }
            renumber[root]
        })
        .collect()
}

/// Replaces every value by the mean over its superpixel.
pub fn project_to_superpixels(heat: &Heatmap, sp: &SuperpixelMap) -> Result<Heatmap> {
    if (heat.width(), heat.height()) != (sp.width, sp.height) {
        return Err(Error::Data(format!(
            "heat grid {}×{} does not match superpixel map {}×{}",
            heat.width(),
            heat.height(),
            sp.width,
            sp.height
        )));
    }
    let mut sums = vec![0.0; sp.count];
    let mut counts = vec![0usize; sp.count];
    for (&l, &v) in sp.labels.iter().zip(heat.values()) {
        sums[l as usize] += v;
        counts[l as usize] += 1;
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    Heatmap::from_values(heat.height(), heat.width(), sp.labels.iter().map(|&l| means[l as usize]).collect())
}
