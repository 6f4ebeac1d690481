use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bsm-moe"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SHORT_SCENE: &str = r#"
schema_version = 1
seed = 4
methods = ["bsm", "moe-compass"]

[scene.trajectory]
start_position = [7.0, 4.0, 2.0]
azimuth_step_deg = 6.0
step_duration = 0.167
num_steps = 8

[moe]
lambda = 0.98
"#;

#[test]
fn gamma_out_of_range_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "schema_version = 1\n[fov]\ngamma = 2.0\n[fov.region]\nkind = \"azimuth\"\ncenter_deg = 0.0\nwidth_deg = 60.0\n",
    );
    let out = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fov.gamma") && err.contains("[0, 1]"), "{err}");
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "schema_version = 1\n[moe]\nlamda = 0.9\n");
    let out = run(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn unknown_method_flag_is_rejected() {
    let cfg = configs().join("paper_scene.toml");
    let out = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "magic",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "schema_version = 1\n");
    let out = run(&[
        "process",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        dir.path().join("absent.wav").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("input"));
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical_and_manifest_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_SCENE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--quiet",
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(o.stdout.is_empty());
    }
    let (fa, fb) = (artifacts(&a), artifacts(&b));
    assert_eq!(fa, fb);
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "bsm.wav",
        "moe-compass.wav",
        "reference.wav",
        "truth.csv",
        "moe_tracking.csv",
        "summary.json",
    ] {
        assert!(
            names.contains(&expected),
            "{expected} missing from {names:?}"
        );
    }

    let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    let listed = m["artifacts"].as_array().unwrap();
    assert_eq!(listed.len(), fa.len());
    for art in listed {
        let p = a.join(art["path"].as_str().unwrap());
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
    }
    let wav = listed.iter().find(|x| x["path"] == "bsm.wav").unwrap();
    assert!(wav["gain"].as_f64().unwrap() > 0.0);
}

#[test]
fn seed_flag_changes_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_SCENE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, seed) in [(&a, "1"), (&b, "2")] {
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
            "--quiet",
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert_ne!(
        std::fs::read(a.join("mics.wav")).unwrap(),
        std::fs::read(b.join("mics.wav")).unwrap()
    );
}

#[test]
fn simulated_recording_can_be_processed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_SCENE);
    let sim = dir.path().join("sim");
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        sim.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = dir.path().join("proc");
    let o = run(&[
        "process",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        sim.join("mics.wav").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--method",
        "moe-bsm",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(out.join("moe-bsm.wav").exists());
    assert!(out.join("moe-bsm_weights.csv").exists());
}

#[test]
fn pattern_export_for_bundled_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("fov_pattern.toml");
    let o = run(&[
        "pattern",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("pattern.csv")).unwrap();
    assert!(text.starts_with("gamma,azimuth_deg,in_fov,left_db,right_db,combined_db"));
    // Five γ values times 60 directions.
    assert_eq!(text.lines().count(), 1 + 5 * 60);
}

#[test]
fn bundled_paper_config_tracks_in_six_degree_plateaus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("paper_scene.toml");
    let o = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--method",
        "moe-compass",
        "--quiet",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("moe_tracking.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "true_az_deg").unwrap();
    let mut plateaus: Vec<f64> = Vec::new();
    for rec in rdr.records() {
        let az: f64 = rec.unwrap()[col].parse().unwrap();
        if plateaus.last().is_none_or(|p| (p - az).abs() > 1e-6) {
            plateaus.push(az);
        }
    }
    assert!(plateaus.len() > 50, "{} plateaus", plateaus.len());
    for w in plateaus.windows(2) {
        let d = (w[1] - w[0]).rem_euclid(360.0);
        assert!((d - 6.0).abs() < 1e-6, "plateau step {d}");
    }
}
