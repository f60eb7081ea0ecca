use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
layer_scale = 0.25
[fovea]
n_spheres = 6
n_layers = 2
n_channels = 16
bands = 4
[periphery]
n_spheres = 4
n_layers = 2
n_channels = 16
bands = 4
[display]
width = 72
height = 80
fov_deg = 110.0
[train]
views = 4
holdout_views = 2
max_aim_deg = 10.0
resolution_scale = 0.125
epochs = 1
batch_rays = 256
"#;

fn fovnerf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fovnerf"))
        .current_dir(dir)
        .env_remove("FOVNERF_CONFIG")
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn json_line(bytes: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(bytes);
    let line = text.lines().last().unwrap_or_else(|| panic!("no output"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

#[test]
fn render_writes_pair_anaglyph_and_timing() {
    let dir = setup();
    let out = fovnerf(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "render",
            "--out",
            "r",
            "--random-weights",
            "--gaze",
            "0.4,0.5",
            "--yaw",
            "-20",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["left.png", "right.png", "anaglyph.png"] {
        assert!(dir.path().join("r").join(f).is_file(), "{f}");
    }
    let v = json_line(&out.stdout);
    assert!(v["timing"]["total_ms"].as_f64().unwrap() > 0.0);
    assert_eq!(v["mode"], "adaptive");
}

#[test]
fn train_then_render_from_models() {
    let dir = setup();
    for layer in ["fovea", "periphery"] {
        let out = fovnerf(
            dir.path(),
            &["--config", "small.toml", "train", "--layer", layer, "--out", "models"],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v = json_line(&out.stdout);
        assert!(v["psnr"].as_f64().unwrap().is_finite());
    }
    let out = fovnerf(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "render",
            "--out",
            "r",
            "--fovea",
            "models/fovea.fnrf",
            "--periphery",
            "models/periphery.fnrf",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // shape mismatch between model and config
    let out = fovnerf(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "render",
            "--out",
            "r",
            "--fovea",
            "models/periphery.fnrf",
            "--periphery",
            "models/periphery.fnrf",
        ],
    );
    assert!(!out.status.success());
    assert_eq!(json_line(&out.stderr)["error"]["kind"], "config");
}

#[test]
fn dataset_gen_writes_manifest() {
    let dir = setup();
    let out = fovnerf(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "dataset",
            "gen",
            "--layer",
            "fovea",
            "--out",
            "ds",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_line(&out.stdout)["views"], 4);
    assert!(dir.path().join("ds/manifest.json").is_file());
}

#[test]
fn optimize_writes_table_heatmaps_and_choice() {
    let dir = setup();
    let out = fovnerf(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "optimize",
            "--out",
            "opt",
            "--n",
            "4,6",
            "--nm",
            "1,2",
            "--nc",
            "8,16",
            "--reference",
            "8,2,32",
            "--epochs",
            "1",
            "--probes",
            "128",
            "--trajectory-ms",
            "100",
            "--points",
            "32",
            "--rays",
            "64",
            "--budget-ms",
            "1000",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("opt/search.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    for f in ["heatmap_e.png", "heatmap_latency.png", "chosen.toml", "latency.json"] {
        assert!(dir.path().join("opt").join(f).is_file(), "{f}");
    }
    assert_eq!(json_line(&out.stdout)["outcome"]["status"], "optimal");
}

#[test]
fn bench_compares_modes() {
    let dir = setup();
    let out = fovnerf(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "bench",
            "--out",
            "b",
            "--random-weights",
            "--mode",
            "adaptive",
            "--mode",
            "naive",
            "--frames",
            "20",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("b/timing.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("adaptive,20,"));
    assert!(rows[2].starts_with("naive,20,"));

    let out = fovnerf(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "bench",
            "--out",
            "b",
            "--random-weights",
            "--frames",
            "5",
        ],
    );
    assert_eq!(json_line(&out.stderr)["error"]["kind"], "too_few_frames");
}

#[test]
fn errors_are_json_lines_with_nonzero_exit() {
    let dir = setup();
    let out = fovnerf(dir.path(), &["render", "--out", "r", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json_line(&out.stderr)["error"]["kind"], "usage");

    let out = fovnerf(dir.path(), &["--config", "missing.toml", "render", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json_line(&out.stderr)["error"]["kind"], "io");

    let out = fovnerf(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "train",
            "--layer",
            "fovea",
            "--out",
            "m",
            "--data",
            "nowhere",
        ],
    );
    assert!(!out.status.success());
    assert_eq!(json_line(&out.stderr)["error"]["kind"], "manifest_missing_file");
}

#[test]
fn config_env_var_is_the_default_path() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "ipd = -1.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fovnerf"))
        .current_dir(dir.path())
        .env("FOVNERF_CONFIG", dir.path().join("bad.toml"))
        .args(["render", "--out", "r", "--random-weights"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = json_line(&out.stderr);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("bad.toml"));
}
