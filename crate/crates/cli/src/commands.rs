use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use iterseg_core::checkpoint::{encode_checkpoint, load_checkpoint};
use iterseg_core::config::RunConfig;
use iterseg_core::data::pnm::{decode_pnm, encode_pgm};
use iterseg_core::data::{build_dataset, patch_tensor, Dataset, SceneRecord, Split};
use iterseg_core::engine::{train_stages, write_loss_csv, LossRecord, PredictionStore, TrainObserver};
use iterseg_core::metrics::{
    category_swap_probe, mean_apr, overlap_scatter, summarize_scatter, write_pr_csv, write_scatter_csv, EvalDetection,
};
use iterseg_core::model::{gradcheck_arch, init_params};
use iterseg_core::pipeline::{
    apply_region_nms, box_nms_per_category, ground_truths, scene_superpixels, segment_detections, SegmentedDetection,
};
use iterseg_core::{BBox, BinaryMask, Error, Heatmap, Result, SegNet};
use serde::{Deserialize, Serialize};

use crate::output::{prepare_out_dir, read_bytes, write_bytes, write_json, write_with, RunManifest};
use crate::{Common, OnOff, OutDir, SplitArg};

/// Default config, then the config file, then `--set` overrides, then `--seed`.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text)?;
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn check_arch_matches(net: &SegNet, ds: &Dataset) -> Result<()> {
    let a = ds.arch();
    if (net.arch.patch_size, net.arch.heatmap_size, net.arch.num_categories)
        != (a.patch_size, a.heatmap_size, a.num_categories)
    {
        return Err(Error::Data(format!(
            "model expects P={}, H={}, C={} but the dataset has P={}, H={}, C={}",
            net.arch.patch_size,
            net.arch.heatmap_size,
            net.arch.num_categories,
            a.patch_size,
            a.heatmap_size,
            a.num_categories
        )));
    }
    Ok(())
}

/// Heat grid as CSV: one row per heatmap row.
fn heat_csv(h: &Heatmap) -> Vec<u8> {
    let mut out = Vec::new();
    for y in 0..h.height() {
        let row: Vec<String> = (0..h.width()).map(|x| format!("{:.16e}", h.get(y, x))).collect();
        out.extend_from_slice(row.join(",").as_bytes());
        out.push(b'\n');
    }
    out
}

fn mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let gray: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_pgm(mask.width(), mask.height(), &gray)
}

fn mask_from_pgm(bytes: &[u8], what: &Path) -> Result<BinaryMask> {
    let (w, h, channels, data) = decode_pnm(bytes).map_err(|e| Error::Data(format!("{}: {e}", what.display())))?;
    if channels != 1 {
        return Err(Error::Data(format!("{}: region must be a PGM", what.display())));
    }
    BinaryMask::from_bits(w, h, data.iter().map(|&v| v >= 128).collect())
}

pub fn generate_data(common: &Common, out: &OutDir) -> Result<u8> {
    let config = load_config(common)?;
    prepare_out_dir(&out.out, out.force)?;
    let ds = build_dataset(&config.dataset, config.seed, &out.out)?;
    let mut manifest = RunManifest::new("generate-data", &config);
    manifest.output(&out.out, "index.json")?;
    manifest.output(&out.out, "manifest.json")?;
    manifest.summary = serde_json::to_value(ds.manifest()).map_err(|e| Error::Internal(e.to_string()))?;
    manifest.write(&out.out)?;
    let m = ds.manifest();
    println!(
        "generated {} scenes, {} patches, C = {}",
        ds.scenes.len(),
        ds.patches.len(),
        m.config.num_categories()
    );
    Ok(0)
}

struct Progress {
    every: usize,
    running: f64,
    count: usize,
}

impl TrainObserver for Progress {
    fn step(&mut self, r: &LossRecord) {
        self.running += r.loss;
        self.count += 1;
        if self.count == self.every {
            eprintln!("stage {} step {} loss {:.5}", r.stage, r.step, self.running / self.count as f64);
            self.running = 0.0;
            self.count = 0;
        }
    }

    fn stage_end(&mut self, stage: usize, _net: &SegNet, _store: &PredictionStore) -> Result<()> {
        eprintln!("stage {stage} done");
        self.running = 0.0;
        self.count = 0;
        Ok(())
    }
}

pub fn train(common: &Common, out: &OutDir, data: &Path) -> Result<u8> {
    let config = load_config(common)?;
    let ds = Dataset::load(data)?;
    let net = init_params(&config.arch, config.seed)?;
    check_arch_matches(&net, &ds)?;
    prepare_out_dir(&out.out, out.force)?;
    let samples = ds.patches_in(Split::Train);
    if samples.is_empty() {
        return Err(Error::Data(format!("{} has no training patches", data.display())));
    }
    let mut progress = Progress {
        every: 250,
        running: 0.0,
        count: 0,
    };
    let outcome = train_stages(&samples, net, &config.schedule, config.seed, &mut progress)?;

    let mut manifest = RunManifest::new("train", &config);
    manifest.dataset_input(data)?;
    for (t, net) in outcome.stage_nets.iter().enumerate() {
        let name = format!("stage_{}.iseg", t + 1);
        write_bytes(&out.out.join(&name), &encode_checkpoint(net))?;
        manifest.output(&out.out, &name)?;
    }
    write_bytes(&out.out.join("model.iseg"), &encode_checkpoint(&outcome.net))?;
    manifest.output(&out.out, "model.iseg")?;
    write_with(&out.out.join("loss.csv"), |w| write_loss_csv(w, &outcome.losses))?;
    manifest.output(&out.out, "loss.csv")?;
    manifest.summary = serde_json::json!({
        "stages": outcome.stage_nets.len(),
        "training_patches": samples.len(),
        "parameters": outcome.net.num_parameters(),
    });
    manifest.write(&out.out)?;
    println!("trained {} stages on {} patches", outcome.stage_nets.len(), samples.len());
    Ok(0)
}

/// One segmented detection as written by `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub scene: u64,
    pub detection: usize,
    pub category: usize,
    pub score: f64,
    pub bbox: BBox,
    /// Region PGM, relative to the predictions directory.
    pub region: String,
    /// Final heat grid CSV, relative to the predictions directory.
    pub heat: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub iterations: usize,
    pub superpixels: bool,
    /// Every scene that was processed, including those without detections.
    pub scenes: Vec<u64>,
    pub detections: Vec<PredictionEntry>,
}

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub iterations: Option<usize>,
    pub superpixels: Option<OnOff>,
    pub emit_trajectory: bool,
    pub split: SplitArg,
    pub scene: Option<u64>,
}

fn selected_scenes<'a>(ds: &'a Dataset, split: SplitArg, scene: Option<u64>) -> Result<Vec<&'a SceneRecord>> {
    if let Some(id) = scene {
        return ds
            .scene(id)
            .map(|r| vec![r])
            .ok_or_else(|| Error::Data(format!("scene {id} is not in the dataset")));
    }
    Ok(match split {
        SplitArg::Train => ds.scenes_in(Split::Train).collect(),
        SplitArg::Val => ds.scenes_in(Split::Val).collect(),
        SplitArg::All => ds.scenes.iter().collect(),
    })
}

pub fn infer(common: &Common, out: &OutDir, args: &InferArgs) -> Result<u8> {
    let mut config = load_config(common)?;
    if let Some(m) = args.iterations {
        config.eval.iterations = m;
    }
    if let Some(sp) = args.superpixels {
        config.eval.superpixels = sp == OnOff::On;
    }
    let net = load_checkpoint(&args.checkpoint)?;
    let ds = Dataset::load(&args.data)?;
    check_arch_matches(&net, &ds)?;
    let scenes = selected_scenes(&ds, args.split, args.scene)?;
    prepare_out_dir(&out.out, out.force)?;

    let mut manifest = RunManifest::new("infer", &config);
    manifest.input(&args.checkpoint)?;
    manifest.dataset_input(&args.data)?;
    let mut preds = Predictions {
        iterations: config.eval.iterations,
        superpixels: config.eval.superpixels,
        scenes: scenes.iter().map(|r| r.scene.id).collect(),
        detections: Vec::new(),
    };
    for record in scenes {
        let sp = scene_superpixels(record, &config.eval)?;
        let kept = box_nms_per_category(record, config.eval.box_nms);
        for seg in segment_detections(&net, record, &kept, config.eval.iterations, sp.as_ref())? {
            let stem = format!("{}_{}", seg.scene, seg.detection);
            let region = format!("regions/{stem}.pgm");
            let heat = format!("heat/{stem}.csv");
            write_bytes(&out.out.join(&region), &mask_pgm(seg.final_region()))?;
            write_bytes(&out.out.join(&heat), &heat_csv(seg.trajectory.last().expect("trajectory")))?;
            if args.emit_trajectory {
                for (t, (h, r)) in seg.trajectory.iter().zip(&seg.regions).enumerate() {
                    write_bytes(&out.out.join(format!("traj/{stem}_{t}.csv")), &heat_csv(h))?;
                    write_bytes(&out.out.join(format!("traj/{stem}_{t}.pgm")), &mask_pgm(r))?;
                }
            }
            preds.detections.push(PredictionEntry {
                scene: seg.scene,
                detection: seg.detection,
                category: seg.category,
                score: seg.score,
                bbox: record.detections[seg.detection].bbox,
                region,
                heat,
            });
        }
    }
    write_json(&out.out.join("predictions.json"), &preds)?;
    manifest.output(&out.out, "predictions.json")?;
    manifest.summary = serde_json::json!({ "detections": preds.detections.len(), "scenes": preds.scenes.len() });
    manifest.write(&out.out)?;
    println!(
        "segmented {} detections in {} scenes (M = {})",
        preds.detections.len(),
        preds.scenes.len(),
        preds.iterations
    );
    Ok(0)
}

fn load_predictions(dir: &Path) -> Result<Predictions> {
    let path = dir.join("predictions.json");
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Checks predictions against the dataset and turns them into per-scene segmentations.
fn resolve_predictions(dir: &Path, preds: &Predictions, ds: &Dataset) -> Result<Vec<SegmentedDetection>> {
    let missing: BTreeSet<u64> = preds
        .scenes
        .iter()
        .chain(preds.detections.iter().map(|d| &d.scene))
        .copied()
        .filter(|&id| ds.scene(id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: scene ids missing from the dataset: {missing:?}",
            dir.display()
        )));
    }
    let listed: BTreeSet<u64> = preds.scenes.iter().copied().collect();
    let unlisted: BTreeSet<u64> = preds.detections.iter().map(|d| d.scene).filter(|s| !listed.contains(s)).collect();
    if !unlisted.is_empty() {
        return Err(Error::Data(format!(
            "{}: detections reference scenes not listed as processed: {unlisted:?}",
            dir.display()
        )));
    }
    let size = ds.config.scene.size;
    preds
        .detections
        .iter()
        .map(|d| {
            let record = ds.scene(d.scene).expect("checked above");
            if d.detection >= record.detections.len() {
                return Err(Error::Data(format!(
                    "scene {} has no detection {}",
                    d.scene, d.detection
                )));
            }
            let path = dir.join(&d.region);
            let region = mask_from_pgm(&read_bytes(&path)?, &path)?;
            if (region.width(), region.height()) != (size, size) {
                return Err(Error::Data(format!(
                    "{}: region is {}x{}, scenes are {size}x{size}",
                    path.display(),
                    region.width(),
                    region.height()
                )));
            }
            Ok(SegmentedDetection {
                detection: d.detection,
                scene: d.scene,
                category: d.category,
                score: d.score,
                trajectory: Vec::new(),
                regions: vec![region],
            })
        })
        .collect()
}

fn to_eval(segs: &[SegmentedDetection], ds: &Dataset) -> Vec<EvalDetection> {
    segs.iter()
        .map(|s| s.to_eval(ds.scene(s.scene).expect("resolved scene")))
        .collect()
}

pub fn evaluate(common: &Common, out: &OutDir, pred_dir: &Path, data: &Path, baseline: Option<&Path>) -> Result<u8> {
    let config = load_config(common)?;
    let ds = Dataset::load(data)?;
    let preds = load_predictions(pred_dir)?;
    let segs = resolve_predictions(pred_dir, &preds, &ds)?;
    let base = match baseline {
        Some(dir) => {
            let b = load_predictions(dir)?;
            let ours: BTreeSet<u64> = preds.scenes.iter().copied().collect();
            let theirs: BTreeSet<u64> = b.scenes.iter().copied().collect();
            if ours != theirs {
                let only_ours: Vec<_> = ours.difference(&theirs).collect();
                let only_theirs: Vec<_> = theirs.difference(&ours).collect();
                return Err(Error::Data(format!(
                    "baseline covers different scenes; missing from baseline: {only_ours:?}, missing from predictions: {only_theirs:?}"
                )));
            }
            Some(resolve_predictions(dir, &b, &ds)?)
        }
        None => None,
    };
    prepare_out_dir(&out.out, out.force)?;

    let mut manifest = RunManifest::new("evaluate", &config);
    manifest.dataset_input(data)?;
    manifest.input(&pred_dir.join("predictions.json"))?;
    if let Some(dir) = baseline {
        manifest.input(&dir.join("predictions.json"))?;
    }

    let mut gts = Vec::new();
    for &id in &preds.scenes {
        gts.extend(ground_truths(ds.scene(id).expect("resolved scene")));
    }
    // Region NMS per scene; `apply_region_nms` is per category within its input.
    let mut by_scene: BTreeMap<u64, Vec<SegmentedDetection>> = BTreeMap::new();
    for s in &segs {
        by_scene.entry(s.scene).or_default().push(s.clone());
    }
    let mut kept = Vec::new();
    for (_, group) in by_scene {
        kept.extend(apply_region_nms(group, config.eval.region_nms)?);
    }
    let dets = to_eval(&kept, &ds);
    let num_categories = ds.config.num_categories();
    let table = mean_apr(&dets, &gts, num_categories, &config.eval.thresholds)?;

    for e in &table.entries {
        let name = format!("pr_{}_{}.csv", e.category, e.threshold);
        write_with(&out.out.join(&name), |w| write_pr_csv(w, &e.curve))?;
    }
    write_with(&out.out.join("apr.csv"), |w| table.write_csv(w))?;
    manifest.output(&out.out, "apr.csv")?;

    let scatter = match &base {
        Some(b) => {
            let index: BTreeMap<(u64, usize), &SegmentedDetection> =
                b.iter().map(|s| ((s.scene, s.detection), s)).collect();
            let mut paired_base = Vec::new();
            let mut paired = Vec::new();
            let mut unmatched = Vec::new();
            for s in &segs {
                match index.get(&(s.scene, s.detection)) {
                    Some(bs) => {
                        paired_base.push((*bs).clone());
                        paired.push(s.clone());
                    }
                    None => unmatched.push((s.scene, s.detection)),
                }
            }
            if !unmatched.is_empty() {
                return Err(Error::Data(format!(
                    "detections (scene, detection) missing from the baseline: {unmatched:?}"
                )));
            }
            let points = overlap_scatter(&to_eval(&paired_base, &ds), &to_eval(&paired, &ds), &gts)?;
            write_with(&out.out.join("scatter.csv"), |w| write_scatter_csv(w, &points))?;
            manifest.output(&out.out, "scatter.csv")?;
            Some(summarize_scatter(&points))
        }
        None => None,
    };

    let report = serde_json::json!({
        "iterations": preds.iterations,
        "superpixels": preds.superpixels,
        "scenes": preds.scenes.len(),
        "detections": segs.len(),
        "after_region_nms": kept.len(),
        "region_nms": config.eval.region_nms,
        "mean_apr": table.means.iter().map(|(t, m)| serde_json::json!({"threshold": t, "mean_ap": m})).collect::<Vec<_>>(),
        "table": table,
        "scatter": scatter,
    });
    write_json(&out.out.join("eval_report.json"), &report)?;
    manifest.output(&out.out, "eval_report.json")?;
    manifest.write(&out.out)?;
    for (t, m) in &table.means {
        println!("mAP^r@{t}: {:.2}", 100.0 * m);
    }
    if let Some(s) = scatter {
        println!(
            "scatter: {} detections, improved {:.3}, degraded {:.3}",
            s.count, s.improved, s.degraded
        );
    }
    Ok(0)
}

#[derive(Serialize)]
struct GradcheckArray {
    name: String,
    len: usize,
    relative_error: f64,
    max_abs_error: f64,
}

#[derive(Serialize)]
struct GradcheckSeed {
    seed: u64,
    passed: bool,
    max_relative_error: f64,
    arrays: Vec<GradcheckArray>,
}

pub fn gradcheck(common: &Common, seeds: u64, corrupt: bool, report: Option<&Path>) -> Result<u8> {
    let config = load_config(common)?;
    let arch = config.arch.reduced_for_gradcheck();
    println!(
        "gradcheck P={} H={} C={} blocks={:?}{}",
        arch.patch_size,
        arch.heatmap_size,
        arch.num_categories,
        arch.block_channels,
        if corrupt { " (corrupted gradients)" } else { "" }
    );
    let mut results = Vec::new();
    for seed in config.seed..config.seed + seeds.max(1) {
        let r = gradcheck_arch(&arch, seed, corrupt)?;
        for a in &r.arrays {
            println!(
                "seed {seed} {:<16} n={:<6} rel {:.3e} abs {:.3e}",
                a.name, a.len, a.relative_error, a.max_abs_error
            );
        }
        println!(
            "seed {seed}: {} (max relative error {:.3e}, tolerance {:e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.max_relative_error(),
            r.tolerance
        );
        results.push(GradcheckSeed {
            seed,
            passed: r.passed(),
            max_relative_error: r.max_relative_error(),
            arrays: r
                .arrays
                .iter()
                .map(|a| GradcheckArray {
                    name: a.name.clone(),
                    len: a.len,
                    relative_error: a.relative_error,
                    max_abs_error: a.max_abs_error,
                })
                .collect(),
        });
    }
    if let Some(path) = report {
        write_json(path, &results)?;
    }
    Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
}

pub fn probe(
    common: &Common,
    out: &OutDir,
    checkpoint: &Path,
    data: &Path,
    iterations: Option<usize>,
    samples: usize,
) -> Result<u8> {
    let mut config = load_config(common)?;
    if let Some(m) = iterations {
        config.eval.iterations = m;
    }
    let net = load_checkpoint(checkpoint)?;
    let ds = Dataset::load(data)?;
    check_arch_matches(&net, &ds)?;
    let held_out = ds.patches_in(Split::Val);
    if held_out.is_empty() || samples == 0 {
        return Err(Error::Data("no held-out patches to probe".into()));
    }
    prepare_out_dir(&out.out, out.force)?;
    let mut manifest = RunManifest::new("probe", &config);
    manifest.input(checkpoint)?;
    manifest.dataset_input(data)?;

    let n = samples.min(held_out.len());
    let c = net.arch.num_categories;
    let hs = net.arch.heatmap_size;
    let mut mean = vec![vec![0.0; c]; c];
    let mut per_patch = Vec::new();
    for k in 0..n {
        let sample = held_out[k * held_out.len() / n];
        let result = category_swap_probe(&net, &patch_tensor(&sample.patch, sample.patch_size), config.eval.iterations)?;
        for (cat, values) in result.heatmaps.iter().enumerate() {
            let h = Heatmap::from_values(hs, hs, values.clone())?;
            write_bytes(&out.out.join(format!("heat/{}_{cat}.csv", sample.sample_id)), &heat_csv(&h))?;
        }
        for a in 0..c {
            for b in 0..c {
                mean[a][b] += result.distances[a][b] / n as f64;
            }
        }
        per_patch.push(serde_json::json!({
            "sample": sample.sample_id,
            "true_category": sample.category,
            "mean_off_diagonal": result.mean_off_diagonal(),
        }));
    }
    write_with(&out.out.join("distance_matrix.csv"), |w| {
        writeln!(w, "{}", (0..c).map(|b| format!("c{b}")).collect::<Vec<_>>().join(","))?;
        for row in &mean {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })?;
    manifest.output(&out.out, "distance_matrix.csv")?;
    let off = if c < 2 {
        0.0
    } else {
        (0..c)
            .flat_map(|a| (0..c).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| mean[a][b])
            .sum::<f64>()
            / (c * (c - 1)) as f64
    };
    write_json(
        &out.out.join("probe_report.json"),
        &serde_json::json!({ "patches": n, "iterations": config.eval.iterations, "mean_off_diagonal": off, "per_patch": per_patch }),
    )?;
    manifest.output(&out.out, "probe_report.json")?;
    manifest.write(&out.out)?;
    println!("probed {n} patches; mean off-diagonal distance {off:.4}");
    Ok(0)
}
