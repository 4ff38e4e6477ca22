use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use criticvio_core::checkpoint;
use criticvio_core::data::load_sequence;
use criticvio_core::training::{evaluate, EvalConfig, EvalReport};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_criticvio"));
    c.env_remove("CRITICVIO_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    let seed = seed.to_string();
    ok(&[
        "synth",
        "--seed",
        &seed,
        "--sequences",
        "3",
        "--frames",
        "24",
        "--height",
        "8",
        "--width",
        "16",
        "--imu-k",
        "5",
        "--out",
        s(&data),
    ]);
    data
}

const MODEL: &str = r#"
[model]
imu_k = 5
image = [8, 16]

[model.encoder]
n_c = 8
conv_channels = [4, 8]
residual_blocks = 1
imu_channels = 8
imu_blocks = 1

[model.policy]
hidden = 16
blocks = 1

[model.transformer]
layers = 1
hidden = 16
heads = 2
iterations = 3

[model.critic]
layers = 1
hidden = 16
heads = 2
"#;

fn config(dir: &Path, data: &Path, name: &str, epochs: usize) -> PathBuf {
    let out = dir.join(name);
    let text = format!(
        "out_dir = {:?}\neval_repeats = 2\n\n[data]\nroot = {:?}\neval = [\"02\"]\n\n[train]\nbatch = 8\nepochs = {epochs}\nseed = 5\n{MODEL}",
        s(&out),
        s(data)
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for seq in fs::read_dir(dir).unwrap() {
        let seq = seq.unwrap().path();
        for f in fs::read_dir(&seq).unwrap() {
            let f = f.unwrap().path();
            let name = format!(
                "{}/{}",
                seq.file_name().unwrap().to_string_lossy(),
                f.file_name().unwrap().to_string_lossy()
            );
            out.push((name, fs::read(&f).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 1);
    let f = files(&a);
    let names: Vec<&str> = f.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(f.len(), 12, "{names:?}");
    for id in ["00", "01", "02"] {
        for file in ["flow.bin", "flow.json", "imu.csv", "poses.txt"] {
            assert!(names.contains(&format!("{id}/{file}").as_str()));
        }
    }
    let poses = fs::read_to_string(a.join("00/poses.txt")).unwrap();
    assert_eq!(poses.lines().count(), 24);

    let b = dir.path().join("again");
    ok(&["synth", "--seed", "1", "--sequences", "3", "--frames", "24", "--height", "8", "--width", "16", "--imu-k", "5", "--out", s(&b)]);
    assert_eq!(f, files(&b));
    let c = synth(dir.path(), 2);
    assert_ne!(f, files(&c));

    // The environment seed overrides the flag.
    let d = dir.path().join("env");
    let out = bin()
        .env("CRITICVIO_SEED", "2")
        .args(["synth", "--seed", "1", "--sequences", "3", "--frames", "24", "--height", "8", "--width", "16", "--imu-k", "5", "--out", s(&d)])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(files(&c), files(&d));
}

fn csv_rows(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn train_eval_infer_and_bench_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let cfg = config(dir.path(), &data, "run", 2);
    ok(&["train", "--config", s(&cfg)]);
    let out = dir.path().join("run");
    // Two training sequences of 24 frames give 42 windows, 6 batches of 8.
    let log = csv_rows(&out.join("train_log.csv"));
    assert_eq!(log.len(), 12);
    assert_eq!(csv_rows(&out.join("epoch_metrics.csv")).len(), 2);
    for e in ["epoch_0001.ckpt", "epoch_0002.ckpt"] {
        assert!(out.join("checkpoints").join(e).exists());
    }
    let last = out.join("last.ckpt");
    assert_eq!(checkpoint::read_header(&last).unwrap().epoch, 2);
    let metrics: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.repeats, 2);
    assert_eq!(metrics.selection_histogram.iter().sum::<usize>(), 2 * metrics.windows);

    // eval agrees exactly with the library.
    let report = dir.path().join("eval.json");
    ok(&["eval", "--checkpoint", s(&last), "--data", s(&data), "--sequences", "01,02", "--repeats", "3", "--seed", "4", "--out", s(&report)]);
    let cli: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let (model, norm, _) = checkpoint::load_model(&last).unwrap();
    let seqs: Vec<_> = ["01", "02"]
        .iter()
        .map(|id| load_sequence(&data, id, 5, (8, 16)).unwrap())
        .collect();
    let lib = evaluate(&model, &norm, &seqs, &EvalConfig::new(3, 3, 4)).unwrap();
    assert_eq!(cli, lib);
    assert_eq!(cli.selection_histogram.iter().sum::<usize>(), 3 * cli.windows);

    // infer writes one pose per frame and normalized weights in [0, 1].
    let inf = dir.path().join("infer");
    ok(&["infer", "--checkpoint", s(&last), "--data", s(&data), "--sequences", "02", "--out", s(&inf)]);
    let poses = fs::read_to_string(inf.join("02/poses.txt")).unwrap();
    assert_eq!(poses.lines().count(), 24);
    assert_eq!(csv_rows(&inf.join("02/policy.csv")).len(), 23);
    let path_rows = csv_rows(&inf.join("02/path.csv"));
    assert_eq!(path_rows.len(), 23);
    for row in &path_rows {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[4..].iter().all(|n| (0.0..=1.0).contains(n)), "{row}");
    }
    let inf2 = dir.path().join("infer2");
    ok(&["infer", "--checkpoint", s(&last), "--data", s(&data), "--sequences", "02", "--out", s(&inf2)]);
    assert_eq!(files(&inf), files(&inf2));

    let bench = dir.path().join("bench.json");
    ok(&["bench", "--checkpoint", s(&last), "--data", s(&data), "--sequences", "02", "--iterations", "1,3", "--timing-repeats", "1", "--out", s(&bench)]);
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[1]["relative"], 1.0);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6);
    let full = config(dir.path(), &data, "full", 2);
    ok(&["train", "--config", s(&full)]);

    let part = config(dir.path(), &data, "part", 2);
    ok(&["train", "--config", s(&part)]);
    let first = dir.path().join("part/checkpoints/epoch_0001.ckpt");
    ok(&["train", "--config", s(&part), "--resume", s(&first)]);

    let a = dir.path().join("full");
    let b = dir.path().join("part");
    assert_eq!(fs::read(a.join("last.ckpt")).unwrap(), fs::read(b.join("last.ckpt")).unwrap());
    assert_eq!(csv_rows(&a.join("train_log.csv")), csv_rows(&b.join("train_log.csv")));
    assert_eq!(csv_rows(&a.join("epoch_metrics.csv")), csv_rows(&b.join("epoch_metrics.csv")));
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    // Bad arguments and configurations.
    assert_eq!(code(&run(&["synth"])), 2);
    assert_eq!(code(&run(&["synth", "--frames", "1", "--out", s(&p.join("x"))])), 2);
    let bad = p.join("bad.toml");
    fs::write(&bad, "out_dir = \"o\"\nnope = 1\n[data]\nroot = \"d\"\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", s(&bad)])), 2);

    // Missing or malformed files.
    assert_eq!(code(&run(&["train", "--config", s(&p.join("missing.toml"))])), 3);
    let data = synth(p, 7);
    fs::write(data.join("01/poses.txt"), "1 2 3\n").unwrap();
    let cfg = config(p, &data, "broken", 1);
    assert_eq!(code(&run(&["train", "--config", s(&cfg)])), 3);

    // Checkpoints from another format version.
    let ck = p.join("old.ckpt");
    let header = br#"{"format_version": 2}"#;
    let mut bytes = b"CVIOCKPT\n".to_vec();
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header);
    fs::write(&ck, bytes).unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&ck), "--data", s(&data)])), 5);
    fs::write(&ck, b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&ck), "--data", s(&data)])), 5);
}
