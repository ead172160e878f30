use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ckafscil"))
}

fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .env_remove("CKAFSCIL_DATA")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    let o = run(&["gen", "--preset", "synth-small", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn strip_timestamp(text: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v.as_object_mut().unwrap().remove("created_unix");
    v
}

#[test]
fn pipeline_writes_report_and_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = (tmp.path().join("data"), tmp.path().join("ckpt"));
    small_dataset(&data);
    let o = run(&[
        "train-base",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--base-epochs",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "train-inc",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--inc-epochs",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PD:"));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ckpt.join("eval-composition.json")).unwrap())
            .unwrap();
    assert_eq!(report["sessions"].as_array().unwrap().len(), 3);
    assert_eq!(report["head"], "composition");
    let prov: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(ckpt.join("eval-composition.provenance.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(prov["command"], "eval");
    assert!(prov["versions"]["ckafscil"].is_string());
    assert!(prov["config"]["hyperparams"]["tau"].is_number());
    assert!(prov["created_unix"].is_u64());

    for (args, file) in [
        (vec!["importance", "--keep", "1,4"], "importance.json"),
        (vec!["reuse-eval", "--ratios", "0,0.5"], "reuse.json"),
    ] {
        let mut full = args.clone();
        full.extend(["--ckpt", p(&ckpt), "--data", p(&data)]);
        let o = run(&full);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(ckpt.join(file).exists());
    }
}

#[test]
fn reruns_are_byte_identical_apart_from_the_timestamp() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let ckpt = tmp.path().join("ckpt");
    let train = [
        "train-base",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--base-epochs",
        "3",
    ];
    let eval = [
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--head",
        "baseline",
    ];
    let files = [
        "bank.ckat",
        "weights.ckat",
        "bank.json",
        "state.json",
        "eval-baseline.json",
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        assert_eq!(code(&run(&train)), 0);
        assert_eq!(code(&run(&eval)), 0);
        let bytes: Vec<Vec<u8>> = files
            .iter()
            .map(|f| fs::read(ckpt.join(f)).unwrap())
            .collect();
        let prov = strip_timestamp(&fs::read_to_string(ckpt.join("provenance.json")).unwrap());
        snapshots.push((bytes, prov));
    }
    assert_eq!(snapshots[0], snapshots[1]);

    let again = tmp.path().join("data2");
    small_dataset(&again);
    for f in [
        "manifest.json",
        "train_s0.ckat",
        "test_s0.ckat",
        "pool.ckat",
    ] {
        assert_eq!(
            fs::read(data.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn data_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let ckpt = tmp.path().join("ckpt");
    let o = bin()
        .args(["train-base", "--out", p(&ckpt), "--base-epochs", "1"])
        .env("CKAFSCIL_DATA", &data)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["train-base", "--out", p(&ckpt)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn compare_reps_on_identical_files_prints_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let t = data.join("test_s0.ckat");
    let o = run(&["compare-reps", p(&t), p(&t)]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "1.0");
    let o = run(&["compare-reps", p(&t), p(&data.join("test_s1.ckat"))]);
    assert_eq!(code(&o), 2, "batch sizes differ");
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["eval", "--nope"])), 1);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(
        code(&run(&[
            "gen",
            "--out",
            "/dev/null/x",
            "--preset",
            "synth-huge"
        ])),
        1
    );

    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "eval",
        "--ckpt",
        p(&tmp.path().join("missing")),
        "--data",
        p(tmp.path()),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[hyperparams]\ntua = 3.0\n").unwrap();
    let o = run(&[
        "gen",
        "--out",
        p(&tmp.path().join("d")),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&o), 2);
    let o = run(&["gen", "--out", p(&tmp.path().join("d")), "--sigma=-1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 9] = [
        (
            "gen",
            &[
                "--out",
                "--preset",
                "--config",
                "--pool-size",
                "--sigma",
                "--seed",
            ],
        ),
        (
            "train-base",
            &[
                "--data",
                "--out",
                "--tau",
                "--lambda2",
                "--init",
                "--stop-attention-grad",
            ],
        ),
        (
            "train-inc",
            &[
                "--ckpt",
                "--session",
                "--inc-epochs",
                "--cls-in-incremental",
            ],
        ),
        ("eval", &["--ckpt", "--data", "--head", "--out"]),
        ("sweep", &["--n-values", "--head", "--out", "--n-prims"]),
        ("importance", &["--keep", "--rank-by", "--top-k"]),
        ("reuse-eval", &["--ratios", "--seed"]),
        ("compare-reps", &["--centering", "--out"]),
        ("bench", &["--classes", "--dim", "--reps"]),
    ];
    for (cmd, flags) in cases {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        for flag in flags.iter().chain(&["--threads"]) {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn config_file_sets_hyperparameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "preset = \"cub-like\"\n[hyperparams]\nbase_epochs = 2\ntau = 4.0\n",
    )
    .unwrap();
    let ckpt = tmp.path().join("ckpt");
    let o = run(&[
        "train-base",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--config",
        p(&cfg),
        "--tau",
        "6",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let state: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ckpt.join("state.json")).unwrap()).unwrap();
    let hp = &state["hyperparams"];
    assert_eq!(
        (
            hp["tau"].as_f64(),
            hp["alpha"].as_f64(),
            hp["base_epochs"].as_u64()
        ),
        (Some(6.0), Some(0.5), Some(2))
    );
}
