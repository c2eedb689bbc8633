use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use versemi_core::data::{load_mask, load_volume, read_meta};
use versemi_core::model::load_checkpoint;
use versemi_core::trainer::{read_log, LOG_HEADER};

const TINY: &str = r#"
name = "tiny"
output_dir = "runs"
tasks = ["a", "b", "c"]

[corpus]
root = "corpus"
samples_per_task = 10
seed = 3
shape = { d = 16, h = 16, w = 16 }

[model]
base_width = 4
depth = 3
head_hidden = 4
seed = 1

[train]
labeled_batch = 2
synthetic_batch = 2
unlabeled_batch = 2
max_steps = 4
val_interval = 2
patch = { d = 8, h = 8, w = 8 }
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_versemi"));
    c.env_remove("VERSEMI_RUN_DIR")
        .env_remove("VERSEMI_MAX_STEPS")
        .env_remove("VERSEMI_SEED")
        .env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_dir() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let o = run(&["synth-data", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (dir, cfg)
}

fn trained() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let (dir, cfg) = tiny_dir();
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = dir.path().join("runs/tiny/ckpt_best");
    (dir, cfg, ckpt)
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_config_writes_four_tasks_of_forty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.toml");
    fs::write(&cfg, "").unwrap();
    let o = run(&["synth-data", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let root = dir.path().join("data/corpus");
    for task in ["lumpy", "sphere", "bean", "multifocal"] {
        let images = fs::read_dir(root.join(task).join("images")).unwrap();
        let raws = images.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "raw")).count();
        assert_eq!(raws, 40, "task {task}");
        assert!(stdout(&o).contains(task));
    }
}

#[test]
fn synth_refuses_to_overwrite_and_force_is_reproducible() {
    let (dir, cfg) = tiny_dir();
    let root = dir.path().join("corpus");
    let before = tree_bytes(&root);
    let o = run(&["synth-data", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = run(&["synth-data", "--config", p(&cfg), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(before, tree_bytes(&root));
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[corpus]\nsamples_per_tsk = 3\n").unwrap();
    let o = run(&["synth-data", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("samples_per_tsk"), "{}", stderr(&o));
}

#[test]
fn train_writes_run_layout_and_log() {
    let (dir, _cfg, _) = trained();
    let run_dir = dir.path().join("runs/tiny");
    for f in ["config.toml", "log.csv", "val.csv", "ckpt_best", "ckpt_last"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let text = fs::read_to_string(run_dir.join("log.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    let rows = read_log(&run_dir.join("log.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(rows.iter().all(|r| r.l_total.is_finite()));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (dir, cfg) = tiny_dir();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let o = bin().args(["train", "--config", p(&cfg)]).env("VERSEMI_RUN_DIR", &full).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["train", "--config", p(&cfg), "--output-dir", p(&part), "--halt-after", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_checkpoint(&part.join("tiny/ckpt_last")).unwrap().state.step, 3);
    let o = run(&["train", "--config", p(&cfg), "--output-dir", p(&part), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["ckpt_last", "ckpt_best", "log.csv", "val.csv"] {
        assert_eq!(fs::read(full.join("tiny").join(f)).unwrap(), fs::read(part.join("tiny").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_environment() {
    let (dir, cfg) = tiny_dir();
    let o = bin()
        .args(["train", "--config", p(&cfg), "--max-steps", "2"])
        .env("VERSEMI_MAX_STEPS", "3")
        .env("VERSEMI_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let saved = fs::read_to_string(dir.path().join("runs/tiny/config.toml")).unwrap();
    assert!(saved.contains("max_steps = 2"), "{saved}");
    assert!(saved.contains("seed = 9"), "{saved}");
}

#[test]
fn eval_supports_both_modes_with_table_schema() {
    let (dir, cfg, ckpt) = trained();
    for mode in ["with-task-info", "task-agnostic"] {
        let out = dir.path().join("eval");
        let o = run(&["eval", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--mode", mode, "--per-sample", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let table = stdout(&o);
        for col in ["Dice (%)", "Jaccard (%)", "ASD (voxel)", "95HD (voxel)"] {
            assert!(table.contains(col), "{table}");
        }
        for name in ["a", "b", "c", "overall"] {
            assert!(table.lines().any(|l| l.starts_with(name)), "{table}");
        }
        assert!(out.join(format!("metrics_test_{mode}.csv")).exists());
        assert!(out.join(format!("samples_test_{mode}.csv")).exists());
    }
}

#[test]
fn missing_checkpoint_is_a_clear_io_error() {
    let (dir, cfg) = tiny_dir();
    let missing = dir.path().join("nope/ckpt_best");
    let o = run(&["eval", "--checkpoint", p(&missing), "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint not found"), "{}", stderr(&o));
}

#[test]
fn predict_routes_prompts_and_is_deterministic() {
    let (dir, _cfg, ckpt) = trained();
    let input = dir.path().join("corpus/a/images/a_000.raw");
    let shape = load_volume(&input).unwrap().shape();
    let mut outputs = Vec::new();
    for (prompt, name) in [("a", "m1.raw"), ("a", "m2.raw"), ("all-foreground", "all.raw")] {
        let out = dir.path().join(name);
        let o = run(&["predict", "--checkpoint", p(&ckpt), "--input", p(&input), "--prompt", prompt, "--output", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(load_mask(&out).unwrap().shape(), shape);
        outputs.push(out);
    }
    assert_eq!(fs::read(&outputs[0]).unwrap(), fs::read(&outputs[1]).unwrap());
    assert_eq!(read_meta(&outputs[0]).unwrap().task, Some(1));
    assert_eq!(read_meta(&outputs[2]).unwrap().task, Some(4));

    let o = run(&["predict", "--checkpoint", p(&ckpt), "--input", p(&input), "--prompt", "zzz", "--output", p(&outputs[0])]);
    assert_eq!(code(&o), 1);
}

#[test]
fn diagnose_exports_one_row_per_sample() {
    let (dir, cfg, ckpt) = trained();
    let out = dir.path().join("diag");
    let args = ["diagnose", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--split", "test", "--out", p(&out)];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let emb = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    let hist = fs::read_to_string(out.join("histograms.csv")).unwrap();
    // 10 per task leaves 2 test samples per task
    assert_eq!(emb.lines().count(), 1 + 6);
    assert_eq!(hist.lines().count(), 1 + 6);
    let embed_dim = load_checkpoint(&ckpt).unwrap().state.config().embed_dim();
    assert!(emb.lines().all(|l| l.split(',').count() == 2 + embed_dim));
    assert!(hist.lines().all(|l| l.split(',').count() == 2 + 20));
    for row in hist.lines().skip(1) {
        let total: u64 = row.split(',').skip(2).map(|v| v.parse::<u64>().unwrap()).sum();
        assert_eq!(total, 16 * 16 * 16);
    }
    let o = run(&args);
    assert_eq!(code(&o), 0);
    assert_eq!(emb, fs::read_to_string(out.join("embeddings.csv")).unwrap());
    assert_eq!(hist, fs::read_to_string(out.join("histograms.csv")).unwrap());
}

#[test]
fn numerical_abort_exits_three() {
    let (dir, _) = tiny_dir();
    let cfg = dir.path().join("hot.toml");
    fs::write(&cfg, TINY.replace("[train]\n", "[train]\nlr = 1e38\n")).unwrap();
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("batch seed"), "{}", stderr(&o));
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let expected: &[(&str, &[&str])] = &[
        ("synth-data", &["--config", "--force"]),
        ("train", &["--config", "--resume", "--output-dir", "--max-steps", "--seed", "--halt-after"]),
        ("eval", &["--checkpoint", "--config", "--split", "--mode", "--per-sample", "--out"]),
        ("predict", &["--checkpoint", "--input", "--prompt", "--output"]),
        ("diagnose", &["--checkpoint", "--config", "--split", "--out"]),
    ];
    for (cmd, flags) in expected {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let help = stdout(&o);
        for f in *flags {
            assert!(help.contains(f), "{cmd}: {f}\n{help}");
        }
        let o = run(&[cmd, "--definitely-not-a-flag"]);
        assert_eq!(code(&o), 1, "{cmd}");
    }
}

#[test]
fn smoke_profile_trains_within_ten_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")).unwrap();
    let cfg = dir.path().join("smoke.toml");
    fs::write(&cfg, smoke.replace("\"../runs\"", "\"runs\"").replace("\"../data/corpus\"", "\"corpus\"")).unwrap();
    let o = run(&["synth-data", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t0 = Instant::now();
    let o = run(&["train", "--config", p(&cfg)]);
    let secs = t0.elapsed().as_secs_f64();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    println!("smoke profile: 200 steps in {secs:.1} s");
    assert!(secs < 600.0, "smoke run took {secs:.1} s");
    assert_eq!(read_log(&dir.path().join("runs/smoke/log.csv")).unwrap().len(), 200);
}
