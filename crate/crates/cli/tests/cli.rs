//! End-to-end runs of the compiled binary over a miniature pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hpbrdf"));
    c.env_remove("HPBRDF_CONFIG");
    c
}

const TINY_CONFIG: &str = r#"
[acquisition]
light_arm_deg = [60.0, 90.0]
noise_rel = 0.0

[acquisition.wavelengths]
start_nm = 450.0
step_nm = 100.0
count = 3

[scene.camera]
width = 24
height = 24

[material]
eta = 1.4
albedo = 0.4
lobe_width = 0.2

[table]
dims = { bands = 3, phi_d = 12, theta_d = 9, theta_h = 9 }

[train]
batch = 16
step = 0.003
iterations = 60
seed = 1

[train.model]
hidden_layers = 1
hidden_width = 8
pe_frequencies = 1
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("pipeline.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn run(dir: &Path, config: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.code() == Some(0),
        "{what} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn report(dir: &Path, name: &str) -> serde_json::Value {
    let text = fs::read_to_string(dir.join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir);

    assert_ok(&run(dir, &config, &["simulate", "--seed", "3"]), "simulate");
    let r = report(dir, "capture.hpma.json");
    assert_eq!(r["command"], "simulate");
    assert_eq!(r["arms"], 2);
    assert!(r["on_sphere_fraction"].as_f64().unwrap() > 0.05);

    assert_ok(&run(dir, &config, &["reconstruct"]), "reconstruct");
    let r = report(dir, "stack.hpmi.json");
    assert!(r["solved_fraction"].as_f64().unwrap() > 0.05);
    assert!(r["physical_fraction_of_solved"].as_f64().unwrap() > 0.99);

    assert_ok(&run(dir, &config, &["tabulate"]), "tabulate");
    let r = report(dir, "table.hpbt.json");
    assert!(r["splats_accepted"].as_u64().unwrap() > 0);
    assert!(r["filled_fraction"].as_f64().unwrap() > 0.0);

    assert_ok(&run(dir, &config, &["inpaint"]), "inpaint");
    let r = report(dir, "inpainted.hpbt.json");
    assert!(r["filled_after"].as_u64().unwrap() >= r["filled_before"].as_u64().unwrap());

    let out = run(dir, &config, &["validate"]);
    assert_ok(&out, "validate");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains('%'), "validate stdout: {stdout}");
    let r = report(dir, "stack.hpmi.validity.json");
    assert!(r["physical_percent"].as_f64().unwrap() > 99.0);
    assert_eq!(r["stored_flags_agree"], true);

    assert_ok(
        &run(dir, &config, &["decompose", "--arm", "0", "--band", "1"]),
        "decompose",
    );
    for map in ["diattenuation", "polarizance", "retardance", "preservation"] {
        assert!(dir.join("maps").join(format!("{map}.pfm")).exists());
    }
    assert_eq!(report(dir, "maps/report.json")["band"], 1);

    assert_ok(&run(dir, &config, &["pca", "-k", "4"]), "pca");
    let csv = fs::read_to_string(dir.join("variance.csv")).unwrap();
    assert!(csv.starts_with("component,explained_variance,cumulative_fraction"));
    let r = report(dir, "variance.csv.json");
    assert_eq!(r["explained_variance"].as_array().unwrap().len(), 4);

    assert_ok(&run(dir, &config, &["fit-mlp"]), "fit-mlp");
    let r = report(dir, "model.hpnn.json");
    assert!(r["final_loss"].as_f64().unwrap().is_finite());
    assert!(r["compression_vs_full_table"].as_f64().unwrap() > 1e4);

    // Same seed, second fit: the model file must come out byte-identical.
    assert_ok(
        &run(dir, &config, &["fit-mlp", "--output", "model2.hpnn"]),
        "fit-mlp rerun",
    );
    assert_eq!(
        fs::read(dir.join("model.hpnn")).unwrap(),
        fs::read(dir.join("model2.hpnn")).unwrap()
    );

    let scene_arg = config.to_str().unwrap();
    assert_ok(&run(dir, &config, &["render", scene_arg]), "render");
    assert!(dir.join("renders/color.png").exists());
    assert!(dir.join("renders/dop.pfm").exists());
    assert!(dir.join("renders/aolp.pfm").exists());
    assert_eq!(report(dir, "renders/report.json")["material"], "analytic");

    assert_ok(
        &run(
            dir,
            &config,
            &["render", scene_arg, "--table", "inpainted.hpbt", "--out-dir", "renders2"],
        ),
        "table render",
    );
    assert_eq!(report(dir, "renders2/report.json")["material"], "table");

    for (file, kind) in [
        ("capture.hpma", "capture"),
        ("stack.hpmi", "stack"),
        ("table.hpbt", "table"),
        ("model.hpnn", "model"),
    ] {
        let out = run(dir, &config, &["info", file]);
        assert_ok(&out, file);
        let v: serde_json::Value =
            serde_json::from_slice(&out.stdout).expect("info emits JSON");
        assert_eq!(v["kind"], kind, "{file}");
    }
}

#[test]
fn identical_seeds_make_identical_archives() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // Noise makes the seed matter.
    let config = dir.join("noisy.toml");
    fs::write(&config, TINY_CONFIG.replace("noise_rel = 0.0", "noise_rel = 0.001")).unwrap();

    assert_ok(
        &run(dir, &config, &["simulate", "--seed", "7", "--output", "a.hpma"]),
        "first run",
    );
    assert_ok(
        &run(dir, &config, &["simulate", "--seed", "7", "--output", "b.hpma"]),
        "second run",
    );
    assert_ok(
        &run(dir, &config, &["simulate", "--seed", "8", "--output", "c.hpma"]),
        "third run",
    );
    let a = fs::read(dir.join("a.hpma")).unwrap();
    let b = fs::read(dir.join("b.hpma")).unwrap();
    let c = fs::read(dir.join("c.hpma")).unwrap();
    assert_eq!(a, b, "same seed must reproduce the archive bit for bit");
    assert_ne!(a, c, "a different seed must change the noise");
}

#[test]
fn render_without_a_scene_file_is_a_usage_error() {
    let out = bin().arg("render").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_bins_argument_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .args(["tabulate", "--bins", "12x9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error: Usage:"), "stderr: {stderr}");
}

#[test]
fn runtime_failures_are_single_line_categorized() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .args(["reconstruct", "--input", "missing.hpma"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let error_lines: Vec<_> =
        stderr.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(error_lines.len(), 1, "stderr: {stderr}");
    let line = error_lines[0];
    let mut parts = line.splitn(3, ": ");
    assert_eq!(parts.next(), Some("error"));
    assert_eq!(parts.next(), Some("Capture"));
    assert!(parts.next().is_some_and(|m| !m.is_empty()), "line: {line}");
}

#[test]
fn unknown_config_keys_fail_loudly() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "warp_drive = true").unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .arg("--config")
        .arg(&path)
        .arg("validate")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error: Config:"), "stderr: {stderr}");
    assert!(stderr.contains("warp_drive"), "stderr: {stderr}");
}

#[test]
fn config_comes_from_the_environment_when_unflagged() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir);
    let out = bin()
        .current_dir(dir)
        .env("HPBRDF_CONFIG", &config)
        .args(["simulate", "--seed", "1", "--output", "env.hpma"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let r = report(dir, "env.hpma.json");
    assert_eq!(r["bands"], 3);
}

#[test]
fn info_reports_the_full_scale_payload() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("huge.hpbt");
    let mut header = Vec::new();
    header.extend_from_slice(b"HPBT");
    header.extend_from_slice(&1u32.to_le_bytes());
    for dim in [68u32, 361, 91, 91] {
        header.extend_from_slice(&dim.to_le_bytes());
    }
    header.extend_from_slice(&414.0f64.to_le_bytes());
    header.extend_from_slice(&8.0f64.to_le_bytes());
    fs::write(&path, header).unwrap();

    let out = bin().arg("info").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["payload_bytes"].as_u64(), Some(13_010_047_232));
}
