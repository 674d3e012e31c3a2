use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iterseg_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use iterseg_core::data::pnm::{encode_pgm, read_pnm};
use iterseg_core::data::{Dataset, Split};
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = "\
# tiny settings for fast runs
num_scenes = 8
patch_size = 16
heatmap_size = 8
stage_iterations = 3
batch_size = 4
";

fn iterseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iterseg"))
        .args(args)
        .output()
        .expect("spawn iterseg")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new(config_text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.conf");
        fs::write(&config, config_text).unwrap();
        let data = dir.path().join("data");
        let out = iterseg(&["generate-data", "--config", p(&config), "--seed", "3", "--out", p(&data)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, name: &str) -> PathBuf {
        let out_dir = self.path(name);
        let out = iterseg(&["train", "--config", p(&self.config), "--data", p(&self.data), "--out", p(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    }

    fn infer(&self, checkpoint: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out_dir = self.path(name);
        let mut args = vec![
            "infer",
            "--config",
            p(&self.config),
            "--checkpoint",
            p(checkpoint),
            "--data",
            p(&self.data),
            "--out",
            p(&out_dir),
        ];
        args.extend_from_slice(extra);
        let out = iterseg(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    }

    fn evaluate(&self, predictions: &Path, name: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "evaluate",
            "--config",
            p(&self.config),
            "--predictions",
            p(predictions),
            "--data",
            p(&self.data),
            "--out",
        ];
        let out_dir = self.path(name);
        args.push(p(&out_dir));
        args.extend_from_slice(extra);
        iterseg(&args)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn mean_ap(report: &Value) -> Vec<(f64, f64)> {
    report["mean_apr"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["threshold"].as_f64().unwrap(), e["mean_ap"].as_f64().unwrap()))
        .collect()
}

#[test]
fn generate_data_is_reproducible_and_reports_four_categories() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.conf");
    fs::write(&config, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = iterseg(&["generate-data", "--config", p(&config), "--seed", "7", "--out", p(out)]);
        assert!(r.status.success());
    }
    assert_eq!(tree(&a), tree(&b));
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["config"]["scene"]["category_mix"].as_array().unwrap().len(), 4);
    let run = read_json(&a.join("run_manifest.json"));
    assert!(run["config"].as_str().unwrap().contains("seed = 7"));
}

#[test]
fn run_manifest_echoes_the_config_and_its_hash() {
    let f = Fixture::new(SMALL);
    let run = read_json(&f.data.join("run_manifest.json"));
    let echoed = run["config"].as_str().unwrap();
    let reparsed = iterseg_core::config::RunConfig::parse(echoed).unwrap();
    assert_eq!(reparsed.render(), echoed);
    use sha2::{Digest, Sha256};
    let hex: String = Sha256::digest(echoed.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(run["config_sha256"].as_str().unwrap(), hex);
}

#[test]
fn non_empty_output_needs_force() {
    let f = Fixture::new(SMALL);
    let again = iterseg(&["generate-data", "--config", p(&f.config), "--out", p(&f.data)]);
    assert_eq!(again.status.code(), Some(2));
    let forced = iterseg(&["generate-data", "--config", p(&f.config), "--out", p(&f.data), "--force"]);
    assert!(forced.status.success());
}

#[test]
fn unwritable_output_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("sub");
    let r = iterseg(&["generate-data", "--set", "num_scenes=2", "--out", p(&target)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains(p(&blocker)));
}

#[test]
fn bad_config_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.conf");
    fs::write(&config, "seed = 1\nno_such_key = 3\n").unwrap();
    let r = iterseg(&["generate-data", "--config", p(&config), "--out", p(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 2"));
}

#[test]
fn training_writes_loadable_deterministic_checkpoints() {
    let f = Fixture::new(SMALL);
    let a = f.train("train_a");
    let b = f.train("train_b");
    let model = fs::read(a.join("model.iseg")).unwrap();
    assert_eq!(model, fs::read(b.join("model.iseg")).unwrap());
    assert_eq!(encode_checkpoint(&decode_checkpoint(&model).unwrap()), model);
    assert!(a.join("stage_1.iseg").exists());
    assert!(!a.join("stage_2.iseg").exists());
    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3);
    let run = read_json(&a.join("run_manifest.json"));
    assert_eq!(run["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn three_stages_give_three_stage_checkpoints() {
    let f = Fixture::new(&format!("{SMALL}stage_iterations = 2,2,2\n").replace("stage_iterations = 3\n", ""));
    let out = f.train("train");
    for t in 1..=3 {
        assert!(out.join(format!("stage_{t}.iseg")).exists());
    }
    assert!(!out.join("stage_4.iseg").exists());
    assert_eq!(
        fs::read(out.join("stage_3.iseg")).unwrap(),
        fs::read(out.join("model.iseg")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let f = Fixture::new(SMALL);
    let out = f.train("train");
    let mut bytes = fs::read(out.join("model.iseg")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let bad = f.path("bad.iseg");
    fs::write(&bad, bytes).unwrap();
    let r = iterseg(&[
        "infer",
        "--checkpoint",
        p(&bad),
        "--data",
        p(&f.data),
        "--out",
        p(&f.path("pred")),
    ]);
    assert_eq!(r.status.code(), Some(4));
}

#[test]
fn zero_iterations_give_full_box_regions() {
    let f = Fixture::new(SMALL);
    let model = f.train("train").join("model.iseg");
    let pred = f.infer(&model, "pred", &["--iterations", "0", "--split", "all"]);
    let preds = read_json(&pred.join("predictions.json"));
    let dets = preds["detections"].as_array().unwrap();
    assert!(!dets.is_empty());
    for d in dets {
        let (w, h, _, gray) = read_pnm(&pred.join(d["region"].as_str().unwrap())).unwrap();
        let b = &d["bbox"];
        let (x0, y0, x1, y1) = (
            b["x0"].as_u64().unwrap() as usize,
            b["y0"].as_u64().unwrap() as usize,
            b["x1"].as_u64().unwrap() as usize,
            b["y1"].as_u64().unwrap() as usize,
        );
        for y in 0..h {
            for x in 0..w {
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                assert_eq!(gray[y * w + x] == 255, inside);
            }
        }
    }
}

#[test]
fn trajectories_and_superpixels() {
    let f = Fixture::new(SMALL);
    let model = f.train("train").join("model.iseg");
    let pred = f.infer(&model, "pred", &["--emit-trajectory", "--superpixels", "on", "--iterations", "2"]);
    let preds = read_json(&pred.join("predictions.json"));
    assert_eq!(preds["iterations"], 2);
    assert_eq!(preds["superpixels"], true);
    let first = &preds["detections"][0];
    let stem = format!("{}_{}", first["scene"], first["detection"]);
    for t in 0..=2 {
        let csv = fs::read_to_string(pred.join(format!("traj/{stem}_{t}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 8);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 8);
    }
    assert!(!pred.join(format!("traj/{stem}_3.csv")).exists());
    // Same inputs, same bytes.
    let again = f.infer(&model, "pred2", &["--emit-trajectory", "--superpixels", "on", "--iterations", "2"]);
    let strip = |t: Vec<(String, Vec<u8>)>| t.into_iter().filter(|(n, _)| n != "run_manifest.json").collect::<Vec<_>>();
    assert_eq!(strip(tree(&pred)), strip(tree(&again)));
}

/// Writes a predictions directory whose regions are the ground-truth masks.
fn ground_truth_predictions(f: &Fixture, name: &str) -> PathBuf {
    let ds = Dataset::load(&f.data).unwrap();
    let dir = f.path(name);
    fs::create_dir_all(dir.join("regions")).unwrap();
    let mut dets = Vec::new();
    let mut scenes = Vec::new();
    for r in ds.scenes_in(Split::Val) {
        scenes.push(r.scene.id);
        for (i, inst) in r.scene.instances.iter().enumerate() {
            let d = r.detections.iter().position(|d| d.instance == i).expect("every instance is detected");
            let region = format!("regions/{}_{d}.pgm", r.scene.id);
            let gray: Vec<u8> = inst.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            fs::write(dir.join(&region), encode_pgm(r.scene.size, r.scene.size, &gray)).unwrap();
            dets.push(serde_json::json!({
                "scene": r.scene.id, "detection": d, "category": inst.category, "score": 1.0,
                "bbox": r.detections[d].bbox, "region": region, "heat": "",
            }));
        }
    }
    let preds = serde_json::json!({"iterations": 0, "superpixels": false, "scenes": scenes, "detections": dets});
    fs::write(dir.join("predictions.json"), serde_json::to_vec(&preds).unwrap()).unwrap();
    dir
}

#[test]
fn ground_truth_predictions_score_full_marks() {
    let f = Fixture::new(SMALL);
    let pred = ground_truth_predictions(&f, "gt");
    let r = f.evaluate(&pred, "eval", &[]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report = read_json(&f.path("eval").join("eval_report.json"));
    assert_eq!(mean_ap(&report), vec![(0.5, 1.0), (0.7, 1.0)]);
    assert!(f.path("eval").join("pr_0_0.5.csv").exists());
    assert!(f.path("eval").join("pr_3_0.7.csv").exists());

    // Against itself as baseline every point sits on the diagonal.
    let r = f.evaluate(&pred, "eval_scatter", &["--baseline", p(&pred)]);
    assert!(r.status.success());
    let report = read_json(&f.path("eval_scatter").join("eval_report.json"));
    assert_eq!(report["scatter"]["improved"], 0.0);
    let rows = fs::read_to_string(f.path("eval_scatter").join("scatter.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + report["detections"].as_u64().unwrap() as usize);
}

#[test]
fn empty_predictions_score_zero() {
    let f = Fixture::new(SMALL);
    let pred = ground_truth_predictions(&f, "gt");
    let mut preds = read_json(&pred.join("predictions.json"));
    preds["detections"] = Value::Array(Vec::new());
    fs::write(pred.join("predictions.json"), serde_json::to_vec(&preds).unwrap()).unwrap();
    let r = f.evaluate(&pred, "eval", &[]);
    assert!(r.status.success());
    let report = read_json(&f.path("eval").join("eval_report.json"));
    assert_eq!(mean_ap(&report), vec![(0.5, 0.0), (0.7, 0.0)]);
}

#[test]
fn unknown_scene_ids_exit_5_and_are_listed() {
    let f = Fixture::new(SMALL);
    let pred = ground_truth_predictions(&f, "gt");
    let mut preds = read_json(&pred.join("predictions.json"));
    preds["scenes"].as_array_mut().unwrap().push(Value::from(9999));
    fs::write(pred.join("predictions.json"), serde_json::to_vec(&preds).unwrap()).unwrap();
    let r = f.evaluate(&pred, "eval", &[]);
    assert_eq!(r.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&r.stderr).contains("9999"));
}

#[test]
fn trained_predictions_evaluate_end_to_end() {
    let f = Fixture::new(SMALL);
    let train = f.train("train");
    let pred = f.infer(&train.join("model.iseg"), "pred", &[]);
    let base = f.infer(&train.join("stage_1.iseg"), "base", &["--iterations", "1"]);
    let r = f.evaluate(&pred, "eval", &["--baseline", p(&base)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report = read_json(&f.path("eval").join("eval_report.json"));
    let means = mean_ap(&report);
    assert_eq!(means.len(), 2);
    assert!(means[0].1 >= means[1].1);
    assert!(report["scatter"]["count"].as_u64().unwrap() > 0);
}

#[test]
fn probe_writes_one_map_per_category_and_a_symmetric_matrix() {
    let f = Fixture::new(SMALL);
    let model = f.train("train").join("model.iseg");
    let out = f.path("probe");
    let r = iterseg(&[
        "probe",
        "--checkpoint",
        p(&model),
        "--data",
        p(&f.data),
        "--samples",
        "2",
        "--out",
        p(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let maps = fs::read_dir(out.join("heat")).unwrap().count();
    assert_eq!(maps, 2 * 4);
    let csv = fs::read_to_string(out.join("distance_matrix.csv")).unwrap();
    let m: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(m.len(), 4);
    for a in 0..4 {
        assert_eq!(m[a][a], 0.0);
        for b in 0..4 {
            assert_eq!(m[a][b], m[b][a]);
        }
    }
    assert!(read_json(&out.join("probe_report.json"))["mean_off_diagonal"].is_number());
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let ok = iterseg(&["gradcheck", "--seed", "4"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("P=16 H=8"));
    assert!(stdout.contains("PASS"));
    let bad = iterseg(&["gradcheck", "--seed", "4", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
