use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
categories = 6
styles = 3
catalog_size = 150
outfits = 400
dim = 8
min_items = 3
max_items = 5

[match]
epochs = 3
batch_size = 8

[match.model]
encoder_layers = 1
head_hidden = 8

[match.model.attention]
dim = 8
heads = 2
ff_hidden = 8

[train]
epochs = 6
batch_size = 8
val_k = 4

[train.model]
categories = 6
slot_layers = 2
sab_layers = 1
st_layers = 1

[train.model.attention]
dim = 8
heads = 2
ff_hidden = 8

[eval]
k = 4

[index]
clusters = 8
probes = 2

[bench]
max_m = 3
repeats = 3
warmup = 1
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_setcomplete"));
    c.env("SETCOMPLETE_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
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

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let gen = dir.join("gen");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--seed",
        "7",
        "--out",
        s(&gen),
    ]);
    (cfg, gen)
}

#[test]
fn gen_data_is_reproducible_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, gen) = setup(dir.path());
    let other = dir.path().join("gen2");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--seed",
        "7",
        "--out",
        s(&other),
    ]);
    let a = std::fs::read(gen.join("data.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(other.join("data.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(gen.join("index.bin")).unwrap(),
        std::fs::read(other.join("index.bin")).unwrap()
    );

    let again = run(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--seed",
        "7",
        "--out",
        s(&gen),
    ]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--seed",
        "8",
        "--out",
        s(&gen),
        "--force",
    ]);
    assert_ne!(a, std::fs::read(gen.join("data.jsonl")).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gen.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 8);
    assert!(manifest["finished_unix"].as_f64().is_some());
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = run(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = run(&[
        "gen-data",
        "--config",
        s(&missing),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("nope.toml"));
}

#[test]
fn full_pipeline_completes_requested_categories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (cfg, gen) = setup(d);
    let data = gen.join("data.jsonl");
    let m = d.join("match");
    ok(&[
        "train-match",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&m),
    ]);
    let scorer = m.join("scorer.bin");

    let missing = run(&[
        "train-cst",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--variant",
        "CR",
        "--out",
        s(&d.join("bad")),
    ]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("scorer"));

    let t = d.join("cr");
    ok(&[
        "train-cst",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--scorer",
        s(&scorer),
        "--variant",
        "CR",
        "--out",
        s(&t),
    ]);
    let ckpt = t.join("CR.ckpt");
    let log = std::fs::read_to_string(t.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,ce,sm,chamfer,total"));

    let wrong = run(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--variant",
        "Cx",
        "--out",
        s(&d.join("wrong")),
    ]);
    assert!(!wrong.status.success());

    let e = d.join("eval");
    let table = ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--scorer",
        s(&scorer),
        "--out",
        s(&e),
    ]);
    assert!(table.contains("recall@4"));
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(e.join("metrics.json")).unwrap()).unwrap();
    let acc = reports[0]["retrieval"]["accuracy"]["value"]
        .as_f64()
        .unwrap();
    assert!(acc > 0.9, "accuracy {acc}");
    assert!(std::fs::read_to_string(e.join("samples.csv"))
        .unwrap()
        .contains("smd_raw"));

    let f = d.join("finb");
    let finb = ok(&[
        "finb",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--scorer",
        s(&scorer),
        "--out",
        s(&f),
    ]);
    assert!(finb.contains("scorer") && finb.contains("CR"));

    let b = d.join("bench");
    let bench = ok(&[
        "bench",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--index",
        s(&gen.join("index.bin")),
        "--out",
        s(&b),
    ]);
    assert!(bench.contains("cst t(3)/t(1)"));

    let text = std::fs::read_to_string(&data).unwrap();
    let mut line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let items = line["items"].as_array_mut().unwrap();
    items.truncate(2);
    let taken: Vec<u64> = items
        .iter()
        .map(|i| i["item_id"].as_u64().unwrap())
        .collect();
    let query = d.join("query.jsonl");
    std::fs::write(&query, format!("{line}\n")).unwrap();
    let out = ok(&[
        "complete",
        "--checkpoint",
        s(&ckpt),
        "--query",
        s(&query),
        "--labels",
        "1,4",
        "--index",
        s(&gen.join("index.bin")),
    ]);
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "1");
    assert_eq!(rows[1][1], "4");
    for r in &rows {
        assert!(!taken.contains(&r[0].parse::<u64>().unwrap()));
    }
}
