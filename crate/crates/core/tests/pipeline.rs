use iterseg_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use iterseg_core::config::{EvalConfig, RunConfig};
use iterseg_core::data::{build_dataset, Dataset, DatasetConfig, Split};
use iterseg_core::engine::{build_stage_training_set, infer, train_stages, PredictionStore, StageSchedule};
use iterseg_core::metrics::mean_apr;
use iterseg_core::pipeline::{ground_truths, segment_scene};
use iterseg_core::{init_params, Heatmap};

fn tiny_config() -> DatasetConfig {
    DatasetConfig {
        num_scenes: 10,
        patch_size: 16,
        heatmap_size: 8,
        ..DatasetConfig::default()
    }
}

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "scenes", "patches"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_on_disk_is_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(&tiny_config(), 9, a.path()).unwrap();
    build_dataset(&tiny_config(), 9, b.path()).unwrap();
    let fa = files(a.path());
    assert!(fa.len() > 20);
    assert_eq!(fa, files(b.path()));

    let c = tempfile::tempdir().unwrap();
    build_dataset(&tiny_config(), 10, c.path()).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn loaded_dataset_equals_generated() {
    let dir = tempfile::tempdir().unwrap();
    let built = build_dataset(&tiny_config(), 4, dir.path()).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.patches, built.patches);
    assert_eq!(loaded.scenes.len(), built.scenes.len());
    assert_eq!(loaded.manifest(), built.manifest());
}

#[test]
fn ten_sample_pool_grows_by_n_per_stage() {
    let mut store = PredictionStore::new(10, 4);
    for t in 1..=4 {
        let pool = build_stage_training_set(&store, 10, t).unwrap();
        assert_eq!(pool.len(), 10 * t);
        for i in 0..t {
            assert_eq!(pool.iter().filter(|e| e.source_stage == i).count(), 10);
        }
        assert!(build_stage_training_set(&store, 10, t + 1).is_err());
        store.push_stage(vec![Heatmap::constant(4, 4, 0.25); 10]).unwrap();
    }
}

#[test]
fn staged_training_is_deterministic_and_stores_every_stage() {
    let ds = Dataset::generate(&tiny_config(), 1).unwrap();
    let samples: Vec<_> = ds.patches.iter().take(10).collect();
    let schedule = StageSchedule {
        iterations: vec![3, 2, 2],
        batch_size: 4,
        ..StageSchedule::default()
    };
    let run = || train_stages(&samples, init_params(&ds.arch(), 3).unwrap(), &schedule, 5, &mut ()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(encode_checkpoint(&a.net), encode_checkpoint(&b.net));
    assert_eq!(a.store.len(), 4 * 10);
    assert_eq!(a.stage_nets.len(), 3);
    assert_eq!(a.losses.len(), 7);
    // Stage 0 is the constant 1/2 map.
    for s in 0..10 {
        assert!(a.store.get(s, 0).unwrap().values().iter().all(|&v| v == 0.5));
    }
    let back = decode_checkpoint(&encode_checkpoint(&a.net)).unwrap();
    let x = samples[0].to_tensor();
    assert_eq!(infer(&back, &x, samples[0].category, 3).unwrap(), infer(&a.net, &x, samples[0].category, 3).unwrap());
}

#[test]
fn whole_box_regions_score_below_ground_truth() {
    let ds = Dataset::generate(&tiny_config(), 2).unwrap();
    let net = init_params(&ds.arch(), 0).unwrap();
    let eval = EvalConfig {
        iterations: 0,
        ..EvalConfig::default()
    };
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for r in ds.scenes_in(Split::Val).chain(ds.scenes_in(Split::Train)) {
        for s in segment_scene(&net, r, &eval).unwrap() {
            dets.push(s.to_eval(r));
        }
        gts.extend(ground_truths(r));
    }
    let c = RunConfig::default().arch.num_categories;
    let table = mean_apr(&dets, &gts, c, &[0.5, 0.7]).unwrap();
    let (m50, m70) = (table.mean_at(0.5).unwrap(), table.mean_at(0.7).unwrap());
    assert!(m50 >= m70);
    assert!(m50 < 1.0);
}
