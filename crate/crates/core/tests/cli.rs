use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn trajrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajrep"))
        .args(args)
        .env_remove("TRAJREP_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn run_dir(parent: &Path, command: &str) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(parent)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().contains(&format!("-{command}-")))
        .collect();
    dirs.sort();
    dirs.pop().unwrap_or_else(|| panic!("no {command} run directory"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        r#"
[data]
synthetic = true
cache_dir = "{}"
synthetic_patients = 40
synthetic_image_size = 32

[model]
stage_widths = [2, 4, 4, 8, 8, 4]
image_size = [32, 32]
scale_projection = 8
projector_hidden = 16
embed_dim = 16

[train]
epochs = 1
batch_images = 16
val_probe_every = 1

[eval]
runs = 2
"#,
        dir.join("cache").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn preprocess_train_eval_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let runs = tmp.path().join("runs");
    let runs_s = runs.to_str().unwrap();

    let out = ok(trajrep(&["--config", cfg, "preprocess"]));
    assert!(out.contains("40 patients"), "{out}");
    assert!(tmp.path().join("cache/manifest.csv").is_file());

    ok(trajrep(&["--config", cfg, "--out-dir", runs_s, "--seed", "3", "train"]));
    let train_dir = run_dir(&runs, "train");
    for file in ["config.toml", "train_log.jsonl", "final.safetensors", "last.safetensors"] {
        assert!(train_dir.join(file).is_file(), "missing {file}");
    }
    let ck = train_dir.join("final.safetensors");

    let out = ok(trajrep(&[
        "--config",
        cfg,
        "--out-dir",
        runs_s,
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--subsets",
        "t0,t0t3",
    ]));
    assert!(out.contains("balanced_accuracy"), "{out}");
    let eval_dir = run_dir(&runs, "eval");
    assert_eq!(fs::read_to_string(eval_dir.join("reports.jsonl")).unwrap().lines().count(), 2);
    let embeddings = eval_dir.join("embeddings_test.csv");
    assert!(embeddings.is_file());

    ok(trajrep(&[
        "--config",
        cfg,
        "--out-dir",
        runs_s,
        "plot",
        "--embeddings",
        embeddings.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]));
    let plot_dir = run_dir(&runs, "plot");
    for file in ["projection_time.svg", "projection_outcome.svg", "feature_maps_scale0_gated.png"] {
        assert!(plot_dir.join(file).is_file(), "missing {file}");
    }
}

#[test]
fn unknown_config_keys_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = trajrep(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn plot_without_inputs_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trajrep(&["--synthetic", "--out-dir", tmp.path().to_str().unwrap(), "plot"]);
    assert_eq!(out.status.code(), Some(2));
}
