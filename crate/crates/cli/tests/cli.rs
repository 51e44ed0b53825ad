use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_amped"));
    c.env("AMPED_LOG", "error");
    c
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json")
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

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("error is JSON")
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v = read_json(smoke_config());
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_from_data_to_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = smoke_config();
    let (data, trained, inferred, scored, sweep) = (
        root.join("data"),
        root.join("train"),
        root.join("infer"),
        root.join("eval"),
        root.join("sweep"),
    );
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(data.join("dataset/manifest.json").is_file());
    assert!(data.join("dataset/test").join("6018027440424182932-0000.gt0.pbm").is_file());

    ok(&["train", "--config", s(&cfg), "--out", s(&trained)]);
    let ckpt = trained.join("checkpoint.safetensors");
    assert!(ckpt.is_file());
    assert!(trained.join("checkpoints/step-000003.safetensors").is_file());
    let log = std::fs::read_to_string(trained.join("train-log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["iteration"], i);
        assert!(l["total"].as_f64().unwrap().is_finite());
        assert_eq!(l["retained_fraction"].as_array().unwrap().len(), 3);
    }
    let manifest = read_json(trained.join("run-manifest.json"));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["versions"]["amped"], env!("CARGO_PKG_VERSION"));

    ok(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&inferred)]);
    let trace = read_json(inferred.join("infer/6018027440424182932-0000.trace.json"));
    assert_eq!(trace["token_counts"].as_array().unwrap().len(), 6);
    assert_eq!(trace["stages"].as_array().unwrap().len(), 3);

    ok(&[
        "eval",
        "--pred",
        s(&inferred.join("infer")),
        "--gt",
        s(&data.join("dataset/test")),
        "--out",
        s(&scored),
    ]);
    let summary = read_json(scored.join("eval.json"));
    assert_eq!(summary["images"], 3);
    let pr = std::fs::read_to_string(scored.join("pr.csv")).unwrap();
    assert_eq!(pr.lines().count(), 100);

    ok(&["prune-sweep", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&sweep)]);
    let csv = std::fs::read_to_string(sweep.join("prune-sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][0], "\"origin\"");
    assert_eq!(rows[2][0], "\"[0.3");
    let reductions: Vec<f64> = rows.iter().map(|r| r.last().unwrap().parse().unwrap()).collect();
    assert!(
        reductions.windows(2).all(|w| w[1] >= w[0]),
        "reduction column not monotone: {reductions:?}"
    );

    let retention = inferred.join("infer/6018027440424182932-0000.trace.json");
    ok(&["flops", "--config", s(&cfg), "--retention", s(&retention), "--out", s(&root.join("flops"))]);
    let report = read_json(root.join("flops/flops.json"));
    assert_eq!(report["report"]["total"], trace["macs"]);
}

#[test]
fn training_is_reproducible_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b), "--jobs", "2"]);
    let bytes = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(&a, "checkpoint.safetensors"), bytes(&b, "checkpoint.safetensors"));
    assert_eq!(bytes(&a, "train-log.jsonl"), bytes(&b, "train-log.jsonl"));

    let manifest = a.join("run-manifest.json");
    ok(&["replay", s(&manifest), "--out", s(&c)]);
    let recorded = read_json(&manifest);
    for out in recorded["outputs"].as_array().unwrap() {
        let rel = out.as_str().unwrap();
        if a.join(rel).is_file() {
            assert_eq!(bytes(&a, rel), bytes(&c, rel), "{rel} differs after replay");
        }
    }

    let d = tmp.path().join("d");
    ok(&["train", "--config", s(&cfg), "--out", s(&d), "--seed", "8"]);
    assert_ne!(bytes(&a, "checkpoint.safetensors"), bytes(&d, "checkpoint.safetensors"));
    assert_eq!(read_json(d.join("run-manifest.json"))["seed"], 8);
}

#[test]
fn flops_reproduces_base_anchor() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["flops", "--arch", "vit-b", "--out", s(tmp.path())]);
    let report = read_json(tmp.path().join("flops.json"));
    let g = report["report"]["total"].as_f64().unwrap() / 1e9;
    assert!((g - 663.7).abs() / 663.7 <= 0.02, "{g}");
    let csv = std::fs::read_to_string(tmp.path().join("flops.csv")).unwrap();
    assert!(csv.starts_with("layer,kind,macs,cumulative,reduction_pct"));
    assert_eq!(read_json(tmp.path().join("run-manifest.json"))["config"], Value::Null);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&smoke_config()), "--out", s(&data)]);
    let test = data.join("dataset/test");
    let pred = tmp.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    for entry in std::fs::read_dir(&test).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if let Some(id) = name.strip_suffix(".gt0.pbm") {
            let gt = amped::data::read_pnm(&path).unwrap();
            let map = amped::data::BinaryMap::from_pnm(&gt).unwrap();
            let values: Vec<f32> = map.bits().iter().map(|&b| f32::from(u8::from(b))).collect();
            let pnm = amped::data::Pnm::from_normalized(
                amped::data::PnmKind::Gray,
                map.width(),
                map.height(),
                255,
                &values,
            )
            .unwrap();
            amped::data::write_pnm(&pnm, pred.join(format!("{id}.pgm"))).unwrap();
        }
    }
    let out = tmp.path().join("eval");
    for jobs in ["1", "3"] {
        let dir = out.join(jobs);
        ok(&[
            "eval", "--pred", s(&pred), "--gt", s(&test), "--out", s(&dir), "--no-nms", "--jobs", jobs,
        ]);
        let summary = read_json(dir.join("eval.json"));
        assert_eq!(summary["ods"], 1.0);
        assert_eq!(summary["ois"], 1.0);
        assert_eq!(summary["ap"], 1.0);
    }
    assert_eq!(
        std::fs::read(out.join("1/eval.json")).unwrap(),
        std::fs::read(out.join("3/eval.json")).unwrap()
    );
}

#[test]
fn schema_violations_are_reported_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| {
        v["model"]["activation"] = "relu".into();
        v["unknown"] = 1.into();
    });
    let out = run(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "schema");
    let details: Vec<&str> = err["error"]["details"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d.as_str().unwrap())
        .collect();
    assert!(details.iter().any(|d| d.starts_with("/model/activation")), "{details:?}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn decreasing_schedule_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| {
        v["schedule"][0]["threshold"] = 0.9.into();
    });
    let out = run(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "prune");
    assert!(err["error"]["message"].as_str().unwrap().contains("stage 2"), "{err}");
}

#[test]
fn missing_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["infer", "--config", s(&smoke_config()), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");

    let out = run(&[
        "infer",
        "--config",
        s(&smoke_config()),
        "--checkpoint",
        s(&tmp.path().join("absent.safetensors")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"]["kind"], "io");

    let out = run(&["flops", "--arch", "vit-b"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| {
        v["train"]["learning_rate"] = 1e30.into();
        v["train"]["optimizer"] = serde_json::json!({"kind": "sgd_momentum", "momentum": 0.0});
        v["train"]["iterations"] = 20.into();
    });
    let out = run(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["error"]["kind"], "divergence");
}
