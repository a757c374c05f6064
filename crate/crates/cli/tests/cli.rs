use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use invrender_core::scene::image::read_pfm;
use invrender_core::scene::load_scene;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_invrender"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny synthetic scene directory with `truth.toml` and `start.toml`.
fn synthetic(views: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "make-synthetic",
        "--views",
        &views.to_string(),
        "--width",
        "16",
        "--height",
        "16",
        "--spp",
        "4",
        "--bounces",
        "2",
        "--out-dir",
        p(dir.path()),
    ]);
    dir
}

fn view_pose(scene: &Path, index: usize) -> Vec<String> {
    let loaded = load_scene(scene).unwrap();
    loaded.observations[index]
        .camera
        .world_to_camera
        .to_row_major()
        .iter()
        .map(|v| format!("{v:e}"))
        .collect()
}

#[test]
fn make_synthetic_writes_truth_and_start() {
    let dir = synthetic(3);
    let truth = load_scene(&dir.path().join("truth.toml")).unwrap();
    let start = load_scene(&dir.path().join("start.toml")).unwrap();
    assert_eq!(truth.observations.len(), 3);
    assert_eq!(start.observations.len(), 3);
    assert_eq!(truth.observations[1].image, start.observations[1].image);
    assert_ne!(truth.scene.mesh.vertices, start.scene.mesh.vertices);
}

#[test]
fn render_is_byte_identical_across_worker_counts() {
    let dir = synthetic(2);
    let scene = dir.path().join("truth.toml");
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("r{threads}"));
        let status = bin()
            .env("RAYON_NUM_THREADS", threads)
            .args(["render", p(&scene), "--seed", "7", "--spp", "4", "--out", p(&out)])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        assert!(out.with_extension("png").exists());
        outputs.push(fs::read(out.with_extension("pfm")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn zero_bounces_render_black() {
    let dir = synthetic(2);
    let out = dir.path().join("black");
    ok(&["render", p(&dir.path().join("truth.toml")), "--bounces", "0", "--out", p(&out)]);
    let img = read_pfm(&out.with_extension("pfm")).unwrap();
    assert!(img.pixels.iter().all(|s| s.r == 0.0 && s.g == 0.0 && s.b == 0.0));
}

#[test]
fn missing_camera_is_a_validation_error() {
    let dir = synthetic(2);
    let out = run(&["render", p(&dir.path().join("truth.toml")), "--camera", "9", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("camera index 9"));
}

#[test]
fn novel_view_at_an_input_pose_matches_render() {
    let dir = synthetic(2);
    let scene = dir.path().join("truth.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["render", p(&scene), "--camera", "1", "--seed", "3", "--spp", "2", "--out", p(&a)]);
    let pose = view_pose(&scene, 1);
    let mut args = vec!["novel-view", p(&scene), "--intrinsics-from", "1", "--seed", "3", "--spp", "2", "--out", p(&b), "--pose"];
    args.extend(pose.iter().map(String::as_str));
    ok(&args);
    assert_eq!(fs::read(a.with_extension("pfm")).unwrap(), fs::read(b.with_extension("pfm")).unwrap());
}

#[test]
fn novel_view_facing_away_is_black() {
    let dir = synthetic(2);
    let scene = dir.path().join("truth.toml");
    let loaded = load_scene(&scene).unwrap();
    let pose = loaded.observations[0].camera.world_to_camera.to_row_major();
    // Rotate 180° about the camera's y axis: flip the x and z rows.
    let mut flipped = pose;
    for i in [0, 1, 2, 3, 8, 9, 10, 11] {
        flipped[i] = -flipped[i];
    }
    let out = dir.path().join("away");
    let strs: Vec<String> = flipped.iter().map(|v| format!("{v:e}")).collect();
    let mut args = vec!["novel-view", p(&scene), "--out", p(&out), "--pose"];
    args.extend(strs.iter().map(String::as_str));
    ok(&args);
    let img = read_pfm(&out.with_extension("pfm")).unwrap();
    assert!(img.pixels.iter().all(|s| s.r == 0.0 && s.g == 0.0 && s.b == 0.0));
}

#[test]
fn novel_view_rejects_non_rigid_pose() {
    let dir = synthetic(2);
    let out = run(&[
        "novel-view",
        p(&dir.path().join("truth.toml")),
        "--out",
        p(&dir.path().join("x")),
        "--pose",
        "2", "0", "0", "0", "0", "1", "0", "0", "0", "0", "1", "-5",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn relight_with_own_lights_reproduces_render() {
    let dir = synthetic(2);
    let scene = dir.path().join("truth.toml");
    let text = fs::read_to_string(&scene).unwrap();
    let table: toml::Table = toml::from_str(&text).unwrap();
    let mut spec_table = toml::Table::new();
    spec_table.insert("lights".into(), table["lights"].clone());
    let lights = toml::to_string(&spec_table).unwrap();
    let spec = dir.path().join("lights.toml");
    fs::write(&spec, lights).unwrap();
    let out_dir = dir.path().join("relit");
    ok(&["relight", p(&scene), p(&spec), "--views", "0", "--seed", "5", "--spp", "2", "--out-dir", p(&out_dir)]);
    let reference = dir.path().join("ref");
    ok(&["render", p(&scene), "--camera", "0", "--seed", "5", "--spp", "2", "--out", p(&reference)]);
    assert_eq!(
        fs::read(out_dir.join("view_000.pfm")).unwrap(),
        fs::read(reference.with_extension("pfm")).unwrap()
    );
}

#[test]
fn relight_is_linear_in_light_intensity() {
    let dir = synthetic(2);
    let scene = dir.path().join("truth.toml");
    let mut images = Vec::new();
    for (name, l) in [("one", "0.5, 1.0, 0.25"), ("two", "1.0, 2.0, 0.5")] {
        let spec = dir.path().join(format!("{name}.toml"));
        let body = format!(
            "[[lights]]\nkind = \"ambient\"\nintensity = [{l}]\n\n\
             [[lights]]\nkind = \"point\"\nposition = [1.0, -1.0, 3.0]\nintensity = [{l}]\n"
        );
        fs::write(&spec, body).unwrap();
        let out_dir = dir.path().join(name);
        ok(&["relight", p(&scene), p(&spec), "--views", "1", "--seed", "9", "--spp", "2", "--out-dir", p(&out_dir)]);
        images.push(read_pfm(&out_dir.join("view_001.pfm")).unwrap());
    }
    assert!(images[0].pixels.iter().any(|s| s.g > 0.0));
    for (a, b) in images[0].pixels.iter().zip(&images[1].pixels) {
        for (x, y) in [(a.r, b.r), (a.g, b.g), (a.b, b.b)] {
            assert!((2.0 * x - y).abs() <= 1e-5 * y.abs().max(1e-3), "{x} {y}");
        }
    }
}

#[test]
fn relight_rejects_malformed_spec() {
    let dir = synthetic(2);
    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "[[lights]]\nkind = \"spot\"\nintensity = [1.0, 1.0, 1.0]\n").unwrap();
    let out = run(&["relight", p(&dir.path().join("truth.toml")), p(&spec), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grad_check_reports_and_signals_tolerance() {
    let dir = synthetic(2);
    let scene = dir.path().join("start.toml");
    let text = ok(&["grad-check", p(&scene), "--group", "lights", "--bounces", "1", "--downsample", "1", "--params", "6"]);
    assert!(text.contains("lights") && text.contains(" ok"), "{text}");
    let out = run(&[
        "grad-check", p(&scene), "--group", "diffuse", "--downsample", "1", "--params", "4", "--tolerance", "0",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn metrics_of_identical_images_hit_the_cap() {
    let dir = synthetic(2);
    let img = dir.path().join("truth_views/view_000.pfm");
    let text = ok(&["metrics", p(&img), p(&img)]);
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("99.000000,1.000000,"), "{row}");
}

#[test]
fn optimize_with_zero_cycles_copies_the_scene() {
    let dir = synthetic(2);
    let out_dir = dir.path().join("opt0");
    ok(&["optimize", p(&dir.path().join("start.toml")), "--cycles", "0", "--downsample", "1", "--out-dir", p(&out_dir)]);
    let a = load_scene(&dir.path().join("start.toml")).unwrap();
    let b = load_scene(&out_dir.join("scene.toml")).unwrap();
    assert_eq!(a.scene, b.scene);
    assert_eq!(a.observations.len(), b.observations.len());
}

#[test]
fn optimize_writes_checkpoints_traces_and_metrics() {
    let dir = synthetic(3);
    let out_dir = dir.path().join("opt");
    ok(&[
        "optimize",
        p(&dir.path().join("start.toml")),
        "--cycles", "1", "--inner", "3", "--downsample", "1", "--eval-spp", "2", "--out-dir", p(&out_dir),
    ]);
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4 * 3);
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("view,psnr,ssim,masked_pixels\n2,"), "{metrics}");
    let checkpoints: Vec<PathBuf> = fs::read_dir(out_dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    assert_eq!(checkpoints.len(), 4);
    load_scene(&out_dir.join("scene.toml")).unwrap();
}

#[test]
fn optimize_single_view_warns_and_skips_geometry() {
    let dir = synthetic(2);
    let scene = dir.path().join("start.toml");
    // Drop the second view from the scene file.
    let text = fs::read_to_string(&scene).unwrap();
    let mut table: toml::Table = toml::from_str(&text).unwrap();
    table["views"].as_array_mut().unwrap().truncate(1);
    let single = dir.path().join("single.toml");
    fs::write(&single, toml::to_string(&table).unwrap()).unwrap();
    let out_dir = dir.path().join("opt1");
    let out = bin()
        .env("RUST_LOG", "warn")
        .args(["optimize", p(&single), "--cycles", "1", "--inner", "2", "--downsample", "1", "--out-dir", p(&out_dir)])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("geometry"));
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(!trace.contains("geometry"));
}

#[test]
fn optimize_rejects_held_out_view_below_ssim_window() {
    let dir = synthetic(2);
    let out_dir = dir.path().join("small");
    let out = run(&["optimize", p(&dir.path().join("start.toml")), "--downsample", "2", "--out-dir", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SSIM window"));
    assert!(!out_dir.join("trace.csv").exists());
}
