use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use capcrop::imagecore::{build_pyramid, load_image, save_image};
use capcrop::landscape::grid_coords;
use capcrop::objective::fixtures::BagFixture;
use capcrop::objective::synthetic::heatmap_scorer;
use capcrop::objective::{bag_from_text, caption_loss_eps, CaptionBag};
use capcrop::pipeline::CropObjective;
use capcrop::sampler::theta_to_pixel_box;
use capcrop::synth::blob_image;
use capcrop::{CropParams, PixelBox, RunConfig, Scorer};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_capcrop");

fn capcrop(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("run capcrop")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn write_blob(dir: &Path, name: &str, center: (f64, f64), channels: usize) -> PathBuf {
    let path = dir.join(name);
    save_image(&blob_image(128, 128, channels, center, 0.12, 0.85, 0.05), &path).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn json_box(v: &Value) -> PixelBox {
    serde_json::from_value(v["box"].clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_bad_flags() {
    assert!(capcrop(&["--help"]).status.success());
    assert_eq!(capcrop(&["crop", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(capcrop(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn empty_caption_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_blob(dir.path(), "b.png", (0.0, 0.0), 1);
    let out = capcrop(&["crop", path_str(&img), "--caption", "  "]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("caption"));
    assert!(!dir.path().join("b.crop.png").exists());
}

#[test]
fn missing_image_and_unknown_words_fail() {
    let out = capcrop(&["crop", "/nonexistent/x.png", "--caption", "dog"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let img = write_blob(dir.path(), "b.png", (0.0, 0.0), 1);
    let out = capcrop(&["crop", path_str(&img), "--caption", "zebra", "--scorer", "builtin:heatmap"]);
    assert_eq!(out.status.code(), Some(1));
}

// The bowl fixture: a 128x128 blob and the best box of an exhaustive grid
// search under the settings used by `crop_recovers_the_bowl_box`.

const BOWL_GRID: usize = 41;
const BOWL_OUT: usize = 48;

fn bowl_config() -> RunConfig {
    RunConfig { out_size: BOWL_OUT, ..RunConfig::default() }
}

fn bowl_loss(theta: CropParams) -> f64 {
    let image = load_image(fixture("bowl.png")).unwrap();
    let cfg = bowl_config();
    let scorer = heatmap_scorer();
    let user = bag_from_text("subject", scorer.vocabulary()).unwrap();
    let pyramid = build_pyramid(&image, &cfg.scale_set, cfg.blur).unwrap();
    CropObjective::new(&pyramid, &user, &scorer, &cfg).value(theta).unwrap().total
}

#[test]
#[ignore = "exhaustive grid search, about a minute"]
fn regenerate_bowl_fixture() {
    std::fs::create_dir_all(fixture("")).unwrap();
    save_image(&blob_image(128, 128, 1, (0.3, -0.2), 0.12, 0.85, 0.05), fixture("bowl.png")).unwrap();
    let image = load_image(fixture("bowl.png")).unwrap();
    let cfg = bowl_config();
    let scorer = heatmap_scorer();
    let user = bag_from_text("subject", scorer.vocabulary()).unwrap();
    let pyramid = build_pyramid(&image, &cfg.scale_set, cfg.blur).unwrap();
    let objective = CropObjective::new(&pyramid, &user, &scorer, &cfg);
    let mut best = (f64::INFINITY, CropParams::new(0.0, 0.0, 1.0));
    for s in cfg.scale_schedule() {
        let coords = grid_coords(BOWL_GRID, s);
        for &y in &coords {
            for &x in &coords {
                let theta = CropParams::new(x, y, s);
                let loss = objective.value(theta).unwrap().total;
                if loss < best.0 {
                    best = (loss, theta);
                }
            }
        }
    }
    let record = serde_json::json!({
        "caption": "subject",
        "scorer": "heatmap",
        "out_size": BOWL_OUT,
        "grid": BOWL_GRID,
        "theta": best.1,
        "box": theta_to_pixel_box(best.1, 128, 128),
        "loss": best.0,
    });
    std::fs::write(fixture("bowl.json"), serde_json::to_string_pretty(&record).unwrap() + "\n").unwrap();
}

#[test]
fn crop_recovers_the_bowl_box() {
    let oracle = read_json(&fixture("bowl.json"));
    let theta: CropParams = serde_json::from_value(oracle["theta"].clone()).unwrap();
    assert_eq!(bowl_loss(theta), oracle["loss"].as_f64().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let out = capcrop(&[
        "crop",
        path_str(&fixture("bowl.png")),
        "--caption",
        "subject",
        "--scorer",
        "builtin:heatmap",
        "--out-size",
        "48",
        "--out-dir",
        path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record = read_json(&dir.path().join("bowl.crop.json"));
    let iou = json_box(&record).iou(&json_box(&oracle));
    assert!(iou >= 0.85, "IoU {iou}");
    for suffix in ["crop.png", "overlay.png", "trace.txt"] {
        assert!(dir.path().join(format!("bowl.{suffix}")).exists(), "{suffix}");
    }
    let printed: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(printed, record);
}

fn quick_crop(image: &Path, dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["crop", path_str(image), "--out-size", "24", "--out-dir", path_str(dir)];
    args.extend_from_slice(extra);
    let out = capcrop(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stem = image.file_stem().unwrap().to_str().unwrap();
    read_json(&dir.join(format!("{stem}.crop.json")))
}

#[test]
fn aesthetic_weight_changes_the_box() {
    // flat caption term: with λ = 0 no crop beats the first one, the whole
    // image; otherwise the aesthetic moves the box
    let dir = tempfile::tempdir().unwrap();
    let img = write_blob(dir.path(), "a.png", (0.45, 0.3), 1);
    let base = ["--scorer", "builtin:aesthetic", "--caption", "dog", "--min-scale", "0.6"];
    let flat = quick_crop(&img, dir.path(), &[&base[..], &["--lambda", "0"]].concat());
    let weighted = quick_crop(&img, dir.path(), &base);
    assert_eq!(json_box(&flat), PixelBox { x0: 0, y0: 0, x1: 128, y1: 128 });
    assert_ne!(json_box(&flat), json_box(&weighted));
}

#[test]
fn overlay_outline_matches_the_sidecar_box() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_blob(dir.path(), "o.png", (-0.3, 0.2), 3);
    let record = quick_crop(&img, dir.path(), &["--scorer", "builtin:heatmap", "--caption", "subject", "--min-scale", "0.7"]);
    let b = json_box(&record);
    let theta: CropParams = serde_json::from_value(record["best_theta"].clone()).unwrap();
    assert_eq!(b, theta_to_pixel_box(theta, 128, 128));

    let overlay = load_image(dir.path().join("o.overlay.png")).unwrap();
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for i in 0..overlay.height() {
        for j in 0..overlay.width() {
            if overlay.get(i, j, 0) == 1.0 && overlay.get(i, j, 1) == 0.0 && overlay.get(i, j, 2) == 0.0 {
                (x0, y0, x1, y1) = (x0.min(j as i64), y0.min(i as i64), x1.max(j as i64 + 1), y1.max(i as i64 + 1));
            }
        }
    }
    assert_eq!(PixelBox { x0, y0, x1, y1 }, b);
    let crop = load_image(dir.path().join("o.crop.png")).unwrap();
    assert_eq!((crop.width() as i64, crop.height() as i64), (b.width(), b.height()));
}

#[test]
fn crop_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_blob(dir.path(), "d.png", (0.1, 0.1), 3);
    let args = ["--caption", "dog", "--min-scale", "0.8", "--seed", "7"];
    let a = quick_crop(&img, dir.path(), &args);
    let trace_a = std::fs::read(dir.path().join("d.trace.txt")).unwrap();
    let b = quick_crop(&img, dir.path(), &args);
    let trace_b = std::fs::read(dir.path().join("d.trace.txt")).unwrap();
    assert_eq!(a, b);
    assert_eq!(trace_a, trace_b);
}

fn landscape(image: &Path, dir: &Path, extra: &[&str]) -> Vec<Vec<f64>> {
    let mut args = vec!["landscape", path_str(image), "--out-size", "24", "--scales", "0.5", "--grid", "21", "--out-dir", path_str(dir)];
    args.extend_from_slice(extra);
    let out = capcrop(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stem = image.file_stem().unwrap().to_str().unwrap();
    assert!(dir.join(format!("{stem}.landscape.0.5.png")).exists());
    let text = std::fs::read_to_string(dir.join(format!("{stem}.landscape.0.5.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,scale,caption,aesthetic,total"));
    lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn constant_scorer_landscape_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_blob(dir.path(), "c.png", (0.2, 0.0), 1);
    let rows = landscape(&img, dir.path(), &["--scorer", "builtin:constant", "--caption", "dog"]);
    assert_eq!(rows.len(), 21 * 21);
    assert!(rows.iter().all(|r| r[5] == rows[0][5]));
}

#[test]
fn bowl_landscape_minimum_sits_on_the_blob() {
    let dir = tempfile::tempdir().unwrap();
    let center = (0.2, -0.15);
    let img = write_blob(dir.path(), "w.png", center, 1);
    let rows = landscape(&img, dir.path(), &["--scorer", "builtin:heatmap", "--caption", "subject", "--lambda", "0"]);
    let best = rows.iter().min_by(|a, b| a[5].total_cmp(&b[5])).unwrap();
    let cell = 2.0 * 0.5 / 20.0;
    assert!((best[0] - center.0).abs() <= cell && (best[1] - center.1).abs() <= cell, "argmin {best:?}");
}

#[test]
fn landscape_rejects_tiny_grids() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_blob(dir.path(), "t.png", (0.0, 0.0), 1);
    let out = capcrop(&["landscape", path_str(&img), "--caption", "dog", "--grid", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let a = capcrop(&["gradcheck", "--trials", "20", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert!(stdout(&a).lines().last() == Some("PASS"));
    let b = capcrop(&["gradcheck", "--trials", "20", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn corrupted_jacobian_fails_gradcheck() {
    let out = capcrop(&["gradcheck", "--trials", "5", "--corrupt-jacobian"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn bench_table_schema() {
    let empty = capcrop(&["bench", "--iters", "0"]);
    assert!(empty.status.success());
    let text = stdout(&empty);
    assert_eq!(text.lines().count(), 1);
    let header = text.lines().next().unwrap().to_owned();

    let out = capcrop(&["bench", "--iters", "2", "--size", "64", "--out-size", "16", "--restarts", "3"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], header);
    assert_eq!(lines.len(), 3);
    let columns = header.split('\t').count();
    for (k, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), columns);
        assert_eq!(fields[0], k.to_string());
        assert!(fields.iter().all(|f| f.parse::<f64>().is_ok()), "{line}");
    }
    assert_eq!(capcrop(&["bench", "--scorer", "cmd:true"]).status.code(), Some(1));
}

fn vocab_file(dir: &Path) -> PathBuf {
    let path = dir.join("vocab.txt");
    std::fs::write(&path, "sky\ndog\ncat\ntree\n").unwrap();
    path
}

#[test]
fn crop_through_an_echo_scorer_process() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = vocab_file(dir.path());
    let img = write_blob(dir.path(), "e.png", (0.3, 0.3), 3);
    let scorer = format!("cmd:{BIN} echo-scorer --vocab {}", vocab.display());
    let common = ["--scorer", &scorer, "--vocab", path_str(&vocab), "--caption", "dog", "--max-iterations", "3", "--restarts", "3"];
    let numeric = quick_crop(&img, dir.path(), &common);
    let analytic = quick_crop(&img, dir.path(), &[&common[..], &["--scorer-gradients"]].concat());
    for record in [&numeric, &analytic] {
        assert_eq!(record["iterations"], 3);
        // uniform captions: the caption term is the cross-entropy against 1/4
        assert!((record["caption_loss"].as_f64().unwrap() - 4f64.ln()).abs() < 1e-6);
    }
    let bright = |r: &Value| -r["aesthetic_loss"].as_f64().unwrap();
    assert!(bright(&numeric) > 0.05 && bright(&analytic) > 0.05);
}

#[test]
fn stalled_scorer_process_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = vocab_file(dir.path());
    let img = write_blob(dir.path(), "s.png", (0.0, 0.0), 1);
    let scorer = format!("cmd:{BIN} echo-scorer --vocab {} --stall-after 2", vocab.display());
    let started = Instant::now();
    let out = capcrop(&[
        "crop",
        path_str(&img),
        "--caption",
        "dog",
        "--scorer",
        &scorer,
        "--vocab",
        path_str(&vocab),
        "--timeout",
        "0.5",
        "--out-size",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(started.elapsed() < Duration::from_secs(20));
    assert!(String::from_utf8_lossy(&out.stderr).contains("did not answer within"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dead_scorer_process_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = vocab_file(dir.path());
    let img = write_blob(dir.path(), "k.png", (0.0, 0.0), 1);
    let scorer = format!("cmd:{BIN} echo-scorer --vocab {}", dir.path().join("missing.txt").display());
    let started = Instant::now();
    let out = capcrop(&["crop", path_str(&img), "--caption", "dog", "--scorer", &scorer, "--vocab", path_str(&vocab)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(started.elapsed() < Duration::from_secs(20));
}

#[test]
fn bag_fixtures_reproduce_the_loss() {
    let out = capcrop(&["bag-fixtures", "--count", "25", "--seed", "4"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 25);
    for line in text.lines() {
        let f: BagFixture = serde_json::from_str(line).unwrap();
        let loss = caption_loss_eps(&CaptionBag::from_probs(f.user.clone(), 1), &f.steps, f.eps).unwrap().value;
        assert!((loss - f.expected).abs() <= 1e-12, "{}", f.id);
    }
    let again = capcrop(&["bag-fixtures", "--count", "25", "--seed", "4"]);
    assert_eq!(out.stdout, again.stdout);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bags.jsonl");
    assert!(capcrop(&["bag-fixtures", "--count", "25", "--seed", "4", "--out", path_str(&path)]).status.success());
    assert_eq!(std::fs::read(&path).unwrap(), out.stdout);
}
