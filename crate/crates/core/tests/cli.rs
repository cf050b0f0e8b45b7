use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cgbridge::store::{dataset_stats, DatasetStats};
use serde_json::Value;

const TOY: &[&str] = &[
    "cge.input=16",
    "cge.hidden=16",
    "cge.output=16",
    "cge.heads=2",
    "cge.batch_size=8",
    "cge.epochs=2",
    "cge.lr=3e-3",
    "bridge.queries=4",
    "bridge.layers=2",
    "bridge.d_model=16",
    "bridge.heads=2",
    "bridge.ffn=32",
    "bridge.max_len=48",
    "stage2.epochs=1",
    "stage2.batch_size=4",
    "stage3.epochs=1",
    "stage3.batch_size=4",
    "stage3.max_new_tokens=8",
    "decoder.d_llm=16",
    "decoder.layers=1",
    "decoder.heads=2",
    "decoder.ffn=32",
    "decoder.context=320",
    "decoder.pretrain_epochs=1",
];

fn cgb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgb"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .env_remove("CGB_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = cgb(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn with_toy<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    for s in TOY {
        v.extend(["--set", s]);
    }
    v
}

const VALID: [&str; 3] = [
    "def add(a, b):\n    return a + b\n",
    "def loop(xs):\n    t = 0\n    for x in xs:\n        t += x\n    return t\n",
    "x = 1\nwhile x < 10:\n    x = x * 2\n",
];

#[test]
fn extract_writes_one_line_per_valid_file() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir_all(src.join("nested")).unwrap();
    fs::write(src.join("a.py"), VALID[0]).unwrap();
    fs::write(src.join("b.py"), VALID[1]).unwrap();
    fs::write(src.join("nested/c.py"), VALID[2]).unwrap();
    let r = ok(dir.path(), &["extract", "--input", "src", "--out", "graphs.jsonl", "--verify"]);
    assert_eq!((r["parsed"].as_u64(), r["rejected"].as_u64()), (Some(3), Some(0)));
    let text = fs::read_to_string(dir.path().join("graphs.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let ids: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids, ["a", "b", "nested/c"]);
}

#[test]
fn broken_files_are_rejected_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir_all(&src).unwrap();
    fs::write(src.join("good.py"), VALID[0]).unwrap();
    fs::write(src.join("bad.py"), "def f(\n").unwrap();
    let r = ok(dir.path(), &["extract", "--input", "src", "--out", "graphs.jsonl"]);
    assert_eq!((r["parsed"].as_u64(), r["rejected"].as_u64()), (Some(1), Some(1)));
    assert_eq!(fs::read_to_string(dir.path().join("graphs.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn obfuscated_extraction_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir_all(&src).unwrap();
    for (i, code) in VALID.iter().enumerate() {
        fs::write(src.join(format!("f{i}.py")), code).unwrap();
    }
    ok(dir.path(), &["extract", "--input", "src", "--out", "a.jsonl", "--obfuscate-seed", "7"]);
    ok(dir.path(), &["extract", "--input", "src", "--out", "b.jsonl", "--obfuscate-seed", "7"]);
    ok(dir.path(), &["extract", "--input", "src", "--out", "plain.jsonl"]);
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("plain.jsonl")).unwrap());
}

#[test]
fn stats_report_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("one.py"), VALID[1]).unwrap();
    ok(dir.path(), &["extract", "--input", "one.py", "--out", "graphs.jsonl"]);
    ok(dir.path(), &["featurize", "--graphs", "graphs.jsonl", "--out", "ds", "--dim", "8"]);
    let r = ok(dir.path(), &["stats", "--dataset", "ds", "--out", "stats.json"]);
    let want = dataset_stats(&dir.path().join("ds")).unwrap();
    assert_eq!(serde_json::from_value::<DatasetStats>(r).unwrap(), want);
    let file: DatasetStats = serde_json::from_slice(&fs::read(dir.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(file, want);
    assert_eq!(want.total_samples, 1);
}

fn toy_dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "8", "--heldout", "2", "--seed", "3", "--out", "corpus"]);
    ok(dir.path(), &["extract", "--input", "corpus/src", "--out", "graphs.jsonl"]);
    ok(dir.path(), &["featurize", "--graphs", "graphs.jsonl", "--out", "ds", "--dim", "16"]);
    dir
}

#[test]
fn pretrain_applies_the_default_patience() {
    let dir = toy_dataset();
    fs::write(dir.path().join("run.toml"), "[cge]\ninput = 16\nepochs = 1\n").unwrap();
    let r = ok(dir.path(), &["pretrain", "--dataset", "ds", "--out", "cge", "--config", "run.toml"]);
    assert_eq!(r["config"]["cge"]["patience"], 20);
    assert_eq!(r["config"]["cge"]["epochs"], 1);
    assert_eq!(r["stage1"]["epochs_run"], 1);
    let file: Value = serde_json::from_slice(&fs::read(dir.path().join("cge.report.json")).unwrap()).unwrap();
    assert_eq!(file, r);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = toy_dataset();
    fs::write(dir.path().join("run.toml"), "[cge]\ninput = 16\nlearning_rat = 0.1\n").unwrap();
    let out = cgb(dir.path(), &["pretrain", "--dataset", "ds", "--out", "cge", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = cgb(dir.path(), &["pretrain", "--dataset", "ds", "--out", "cge", "--set", "cge.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn diverging_loss_exits_3() {
    let dir = toy_dataset();
    ok(dir.path(), &with_toy(&["pretrain", "--dataset", "ds", "--out", "cge"]));
    ok(dir.path(), &with_toy(&["align", "--dataset", "ds", "--cge", "cge", "--out", "bridge"]));
    let mut args = with_toy(&[
        "adapt", "--dataset", "ds", "--tasks", "corpus/tasks.jsonl", "--cge", "cge", "--bridge", "bridge", "--decoder",
        "decoder", "--out", "adapted",
    ]);
    args.extend(["--set", "decoder.pretrain_epochs=2", "--set", "decoder.pretrain_lr=1e300"]);
    let out = cgb(dir.path(), &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn seed_precedence() {
    let dir = toy_dataset();
    fs::write(dir.path().join("seeded.toml"), "seed = 5\n[cge]\ninput = 16\n").unwrap();
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let mut args = with_toy(&["pretrain", "--dataset", "ds", "--out", "cge"]);
        args.extend_from_slice(extra);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cgb"));
        cmd.arg("--workdir").arg(dir.path()).args(&args).env_remove("CGB_SEED");
        if let Some(v) = env {
            cmd.env("CGB_SEED", v);
        }
        let out = cmd.output().unwrap();
        match out.status.code() {
            Some(0) => serde_json::from_slice::<Value>(&out.stdout).unwrap()["seed"].as_i64().unwrap(),
            c => -(c.unwrap() as i64),
        }
    };
    assert_eq!(seed_of(&[], None), 0);
    assert_eq!(seed_of(&[], Some("9")), 9);
    assert_eq!(seed_of(&["--config", "seeded.toml"], Some("9")), 5);
    assert_eq!(seed_of(&["--config", "seeded.toml", "--seed", "3"], Some("9")), 3);
    assert_eq!(seed_of(&[], Some("nine")), -2);
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let dir = toy_dataset();
    ok(dir.path(), &with_toy(&["pretrain", "--dataset", "ds", "--out", "cge"]));
    let align = ok(
        dir.path(),
        &with_toy(&["align", "--dataset", "ds", "--tasks", "corpus/tasks.jsonl", "--cge", "cge", "--out", "bridge"]),
    );
    assert_eq!(align["pairs"], 8);
    let adapt = ok(
        dir.path(),
        &with_toy(&[
            "adapt", "--dataset", "ds", "--tasks", "corpus/tasks.jsonl", "--heldout", "corpus/heldout.jsonl",
            "--cge", "cge", "--bridge", "bridge", "--decoder", "decoder", "--out", "adapted",
        ]),
    );
    assert_eq!(adapt["examples"], 8);
    assert_eq!(adapt["decoder"]["pretrain_trace"].as_array().unwrap().len(), 1);
    assert_eq!(adapt["stage3"]["decoder_checksum_before"], adapt["stage3"]["decoder_checksum_after"]);
    assert!(adapt["heldout"]["last"].as_f64().unwrap().is_finite());
    let gen = ok(
        dir.path(),
        &with_toy(&[
            "generate", "--dataset", "ds", "--tasks", "corpus/heldout.jsonl", "--cge", "cge", "--bridge", "adapted",
            "--decoder", "decoder", "--out", "gen.jsonl",
        ]),
    );
    assert_eq!(gen["generated"], 2);
    assert_eq!(fs::read_to_string(dir.path().join("gen.jsonl")).unwrap().lines().count(), 2);

    // a second adapt reuses the stored decoder
    let again = ok(
        dir.path(),
        &with_toy(&[
            "adapt", "--dataset", "ds", "--tasks", "corpus/tasks.jsonl", "--cge", "cge", "--bridge", "bridge",
            "--decoder", "decoder", "--out", "adapted2",
        ]),
    );
    assert!(again["decoder"]["pretrain_trace"].as_array().unwrap().is_empty());
    assert_eq!(again["decoder"]["checksum"], adapt["decoder"]["checksum"]);
    assert_eq!(again["checksum"], adapt["checksum"]);
}

#[test]
fn gradcheck_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let r = ok(dir.path(), &["gradcheck", "--component", "gtg", "--seed", "1"]);
    assert_eq!(r["pass"], true);
    assert!(r["max_rel_error"].as_f64().unwrap() <= 1e-4);
    let probes = r["probes"].as_array().unwrap();
    assert!(probes.iter().any(|p| p["name"] == "causal_mask" && p["pass"] == true));

    let r = ok(dir.path(), &["gradcheck", "--component", "stage1", "--seed", "0"]);
    assert_eq!(r["pass"], true);
    let groups = r["groups"].as_array().unwrap();
    let target = groups[groups.len() / 2]["group"].as_str().unwrap().to_string();
    let flipped = ok(dir.path(), &["gradcheck", "--component", "stage1", "--seed", "0", "--flip", &target]);
    assert_eq!(flipped["pass"], false);
    let failed: Vec<&str> = flipped["groups"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|g| g["pass"] == false)
        .map(|g| g["group"].as_str().unwrap())
        .collect();
    assert_eq!(failed, [target.as_str()]);
}

#[test]
fn bad_arguments_use_the_usage_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cgb(dir.path(), &["gradcheck", "--component", "nope"]).status.code(), Some(2));
    assert_eq!(cgb(dir.path(), &["frobnicate"]).status.code(), Some(2));
}
