use decompnet::network::{load_model, write_model};
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_decompnet"));
    c.env_remove("DECOMPNET_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Toy run config: bias-free 2-8-8-2 ReLU MLP on two moons.
fn toy_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
output = "run"
checkpoint_every = 2
{extra}
[arch]
input = {{ height = 1, width = 1, channels = 2 }}
layers = [
  {{ type = "dense", units = 8, bias = false }},
  {{ type = "dense", units = 8, bias = false }},
  {{ type = "dense", units = 2, bias = false, activation = "softmax" }},
]

[data]
source = {{ type = "two_moons", samples = 200, seed = 3 }}
validation = 0.25

[train]
epochs = 4
batch_size = 32
seed = 5
"#
    );
    let path = dir.join("toy.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train_toy(dir: &TempDir, out: &str, seed: Option<&str>) -> PathBuf {
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join(out);
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_usage_error() {
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot read config"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = toy_config(dir.path(), "learning_speed = 3");
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_speed"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(
        run(&["compress", "m.dcmp", "--budget", "z=2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["compress", "m.dcmp", "--budget", "size=3"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let o = bin()
        .args(["inspect", "m.dcmp"])
        .env("DECOMPNET_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("DECOMPNET_THREADS"));
}

#[test]
fn training_writes_round_tripping_checkpoints() {
    let dir = TempDir::new().unwrap();
    let out = train_toy(&dir, "a", None);
    let model = out.join("model.dcmp");
    let bytes = fs::read(&model).unwrap();
    let file = load_model(&model).unwrap();
    let mut again = Vec::new();
    write_model(&mut again, &file).unwrap();
    assert_eq!(again, bytes);
    assert_eq!(file.metadata["epoch"], 4);
    for e in ["epoch_0002.dcmp", "epoch_0004.dcmp"] {
        assert!(out.join("checkpoints").join(e).exists());
    }
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = TempDir::new().unwrap();
    let a = train_toy(&dir, "a", None);
    let b = train_toy(&dir, "b", None);
    let c = train_toy(&dir, "c", Some("6"));
    for f in ["model.dcmp", "train_log.csv", "checkpoints/epoch_0002.dcmp"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join("model.dcmp")).unwrap(),
        fs::read(c.join("model.dcmp")).unwrap()
    );
}

fn all_rank_vectors(full: &[usize]) -> Vec<Vec<usize>> {
    full.iter().fold(vec![vec![]], |acc, &r| {
        acc.into_iter()
            .flat_map(|p| {
                (1..=r).map(move |k| {
                    let mut v = p.clone();
                    v.push(k);
                    v
                })
            })
            .collect()
    })
}

#[test]
fn compress_matches_exhaustive_oracle() {
    let dir = TempDir::new().unwrap();
    let out = train_toy(&dir, "a", None);
    let model = out.join("model.dcmp");

    let id = stdout_json(&run(&["compress", s(&model), "--budget", "z=1.0"]));
    assert_eq!(id["ranks"], serde_json::json!([2, 8, 2]));
    assert_eq!(id["dropped"], 0);
    assert_eq!(id["params"], id["full_params"]);

    let spectra: Vec<Vec<f64>> = load_model(&model)
        .unwrap()
        .model
        .spectra()
        .unwrap()
        .into_iter()
        .map(|f| f.s)
        .collect();
    let full = [2, 8, 2];
    for z in ["0.2", "0.5", "0.75"] {
        let rep = stdout_json(&run(&[
            "compress",
            s(&model),
            "--criterion",
            "sv",
            "--budget",
            &format!("z={z}"),
        ]));
        let ranks: Vec<usize> = serde_json::from_value(rep["ranks"].clone()).unwrap();
        let kept: usize = ranks.iter().sum();
        // drop the smallest singular values: maximize the kept sum at equal size
        let best = all_rank_vectors(&full)
            .into_iter()
            .filter(|v| v.iter().sum::<usize>() == kept)
            .max_by(|a, b| {
                let sum = |v: &[usize]| -> f64 {
                    v.iter()
                        .zip(&spectra)
                        .map(|(&r, s)| s[..r].iter().sum::<f64>())
                        .sum()
                };
                sum(a).total_cmp(&sum(b))
            })
            .unwrap();
        assert_eq!(ranks, best, "z={z}");
    }

    let o = run(&["compress", s(&model), "--budget", "macs=10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("below the smallest reachable model"),
        "{}",
        stderr(&o)
    );

    let o = run(&[
        "compress",
        s(&model),
        "--budget",
        "z=0.5",
        "--out",
        s(&dir.path().join("cmp")),
    ]);
    assert!(o.status.success());
    let saved: Value =
        serde_json::from_slice(&fs::read(dir.path().join("cmp/assignment.json")).unwrap()).unwrap();
    assert_eq!(saved["criterion"], "sv");
}

#[test]
fn eval_sweep_and_analyze() {
    let dir = TempDir::new().unwrap();
    let out = train_toy(&dir, "a", None);
    let model = out.join("model.dcmp");
    let plain = stdout_json(&run(&["eval", s(&model)]));
    let z1 = stdout_json(&run(&["eval", s(&model), "--budget", "z=1"]));
    assert_eq!(plain["accuracy"], z1["accuracy"]);
    assert_eq!(plain["loss"], z1["loss"]);
    assert_eq!(plain["split"], "validation");
    assert_eq!(plain["samples"], 50);

    let o = run(&[
        "sweep",
        s(&model),
        "--budget",
        "z=0.1",
        "--budget",
        "z=0.3",
        "--budget",
        "z=0.9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1 + 3);
    let o = run(&["sweep", s(&model), "--out", s(&dir.path().join("sw"))]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);

    let o = run(&["analyze", "prop2", s(&model), "--budget", "z=0.3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stderr(&o).contains(" 0 violations over 50 samples"),
        "{}",
        stderr(&o)
    );
    let o = run(&["analyze", "prop1", s(&model)]);
    assert!(o.status.success());
    let o = run(&[
        "analyze",
        "lipschitz",
        s(&model),
        "--budget",
        "z=0.3",
        "--out",
        s(&dir.path().join("an")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("an/lipschitz.csv").exists());
    assert_eq!(run(&["analyze", "prop2", s(&model)]).status.code(), Some(2));

    let info = stdout_json(&run(&["inspect", s(&model)]));
    assert_eq!(info["total_rank"], 12);
    assert_eq!(info["metadata"]["train"]["seed"], 5);
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join("busy");
    fs::create_dir_all(&out).unwrap();
    let lock = fs::File::create(out.join(".decompnet.lock")).unwrap();
    lock.lock().unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in use"));
    drop(lock);
    assert!(run(&["train", "--config", s(&cfg), "--out", s(&out)])
        .status
        .success());
}

#[test]
fn inputs_are_not_modified() {
    let dir = TempDir::new().unwrap();
    let out = train_toy(&dir, "a", None);
    let model = out.join("model.dcmp");
    let before = fs::read(&model).unwrap();
    for args in [
        vec!["eval", s(&model), "--budget", "z=0.2"],
        vec!["compress", s(&model), "--budget", "params=100"],
        vec!["inspect", s(&model)],
    ] {
        assert!(run(&args).status.success());
    }
    assert_eq!(fs::read(&model).unwrap(), before);
}
