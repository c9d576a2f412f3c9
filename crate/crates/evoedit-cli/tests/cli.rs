use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn evoedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evoedit"))
        .args(args)
        .env_remove("V4E_CACHE")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn exit_codes() {
    assert_eq!(evoedit(&["--help"]).status.code(), Some(0));
    assert_eq!(evoedit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(evoedit(&["synth", "--n", "many", "--out", "x"]).status.code(), Some(1));
    // Parses fine but there is nothing to load.
    let dir = tempfile::tempdir().unwrap();
    let o = evoedit(&["precompute-tail", "--workdir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain-vae"));
}

#[test]
fn synth_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = evoedit(&["synth", "--n", "40", "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = evoedit::synthworld::load_manifest(&out).unwrap();
    assert_eq!(records.len(), 40);
    for r in &records {
        assert!(out.join(&r.source).exists() && out.join(&r.edited).exists() && out.join(&r.mask).exists());
    }
    let mut per_task: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *per_task.entry(r.task.to_string()).or_default() += 1;
    }
    assert!(per_task.len() >= 8, "{per_task:?}");
}

#[test]
fn synth_task_filter_and_clips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = evoedit(&[
        "synth",
        "--n",
        "3",
        "--tasks",
        "color_alteration",
        "--clip-frames",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = evoedit::synthworld::load_manifest(&out).unwrap();
    assert!(records.iter().all(|r| r.task == evoedit::synthworld::EditTask::ColorAlteration));
    assert!(records.iter().all(|r| r.frames.len() == 8));
}

#[test]
fn caption_plain_and_json() {
    let o = evoedit(&["caption", "Change", "the", "car", "color", "to", "blue"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.to_lowercase().contains("blue"), "{text}");
    let o = evoedit(&["caption", "--json", "Change the car color to blue"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.get("text").is_some());
}

#[test]
fn check_suite_passes() {
    let o = evoedit(&["check", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let v: Vec<serde_json::Value> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.len(), 12);
    assert!(v.iter().all(|c| c["passed"] == true));
}

const MINI: &str = r#"
train_triplets = 4
vae_hidden = 8
vae_steps = 2
dit_depth = 2
dit_width = 16
dit_heads = 2
text_dim = 8
taps = [0, 1]
teacher_steps = 2
teacher_grad_accum = 1
student_steps = 2
grad_accum = 1
eval_per_task = 1
"#;

fn phase(dir: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    let cfg = dir.join("mini.toml");
    let work = dir.join("work");
    all.extend(["--config", cfg.to_str().unwrap(), "--workdir", work.to_str().unwrap()]);
    let o = evoedit(&all);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn phases_chain_through_the_workdir() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("mini.toml"), MINI).unwrap();
    for cmd in ["pretrain-vae", "precompute-tail", "pretrain-teacher"] {
        phase(dir.path(), &[cmd]);
    }
    phase(dir.path(), &["train"]);
    let work = dir.path().join("work");
    for f in ["vae.ckpt", "tail_cache.bin", "teacher.ckpt", "student-full.ckpt", "logs/teacher.jsonl"] {
        assert!(work.join(f).exists(), "{f} missing");
    }

    let src = dir.path().join("src.png");
    let t = evoedit::synthworld::make_triplet(1, evoedit::synthworld::EditTask::SubjectRemoval, 32).unwrap();
    t.source.save_png(&src).unwrap();
    let out = dir.path().join("out.png");
    let o = phase(
        dir.path(),
        &["infer", "--src", src.to_str().unwrap(), "--instruction", &t.instruction, "--out", out.to_str().unwrap()],
    );
    assert!(stdout(&o).contains("8 model evaluations"));
    let img = evoedit::image::Image::load_png(&out).unwrap();
    assert_eq!((img.width, img.height), (32, 32));

    let o = phase(dir.path(), &["eval", "--csv"]);
    assert!(stdout(&o).lines().count() >= 12);

    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(work.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["input_hash"].as_str().unwrap().len(), 64);
    assert!(m["artifacts"]["student-full.ckpt"]["sha256"].is_string());
    let phases: Vec<&str> = m["phases"].as_array().unwrap().iter().map(|p| p["command"].as_str().unwrap()).collect();
    assert_eq!(phases, ["pretrain-vae", "precompute-tail", "pretrain-teacher", "train"]);
}
