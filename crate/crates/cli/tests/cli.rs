use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"
name = "smoke"
seeds = [0]
checkpoint_every = 2

[data]
num_classes = 3
train_per_class = 12
test_per_class = 4
image_size = 16
atypical_fraction = 0.2

[noise]
ratio = 0.25

[encoder]
image_size = 16
num_classes = 3
block_channels = [4, 8]
proj_hidden = 8
proj_dim = 8

[pretrain]
epochs = 2
batch_size = 16

[train]
epochs = 4
batch_size = 16
warmup_epochs = 1
knn_k = 3

[experiments]
strategies = ["ALTERNATE_MOD2", "Z_ONLY"]
cotrain = ["INDEP", "OURS"]
"#;

fn lsa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsa"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("LSA_DEVICE")
        .output()
        .expect("spawn lsa")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.toml"), config).unwrap();
    d
}

fn step(dir: &Path, cmd: &str) -> Output {
    let o = lsa(&[cmd, "--config", "c.toml", "--out", "out"], dir);
    assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    o
}

#[test]
fn unknown_flag_is_a_user_error() {
    let d = setup(SMOKE);
    assert_eq!(code(&lsa(&["build-data", "--config", "c.toml", "--bogus"], d.path())), 1);
    assert_eq!(code(&lsa(&["frobnicate"], d.path())), 1);
}

#[test]
fn missing_or_bad_config_is_a_user_error() {
    let d = setup("[train]\nlearning_rate = 0.1\n");
    assert_eq!(code(&lsa(&["build-data"], d.path())), 1);
    assert_eq!(code(&lsa(&["build-data", "--config", "nope.toml"], d.path())), 1);
    let o = lsa(&["build-data", "--config", "c.toml"], d.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_name_the_stage_to_run() {
    let d = setup(SMOKE);
    let o = lsa(&["pretrain", "--config", "c.toml", "--out", "out"], d.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("build-data"), "{}", stderr(&o));
}

#[test]
fn unsupported_device_is_rejected() {
    let d = setup(SMOKE);
    let o = Command::new(env!("CARGO_BIN_EXE_lsa"))
        .args(["build-data", "--config", "c.toml"])
        .current_dir(d.path())
        .env("LSA_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn divergence_is_a_runtime_failure() {
    let cfg = SMOKE.replace("epochs = 2\nbatch_size = 16", "epochs = 2\nbatch_size = 16\nlr = 1e30\ngrad_clip = 0.0");
    let d = setup(&cfg);
    step(d.path(), "build-data");
    let o = lsa(&["pretrain", "--config", "c.toml", "--out", "out"], d.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let partial = fs::read_dir(d.path().join("out/seed-0"))
        .unwrap()
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().starts_with("pretrain-") && !e.file_name().to_string_lossy().ends_with(".partial"));
    assert!(!partial, "a failed stage must not look complete");
}

#[test]
fn end_to_end_pipeline_and_idempotence() {
    let d = setup(SMOKE);
    let p = d.path();
    for cmd in ["build-data", "pretrain", "probe", "detect", "train", "cotrain"] {
        step(p, cmd);
    }
    let report = step(p, "report");
    let text = String::from_utf8_lossy(&report.stdout);
    for needle in ["Oracle", "Z_PLS", "W", "ALTERNATE_MOD2", "CE_MIXUP", "INDEP", "OURS", " ± "] {
        assert!(text.contains(needle), "report lacks {needle}:\n{text}");
    }

    let hash = fs::read_dir(p.join("out/seed-0"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .find_map(|n| n.strip_prefix("data-").map(str::to_string))
        .expect("data stage directory");
    let seed = p.join("out/seed-0");
    for f in [
        format!("data-{hash}/manifest.tsv"),
        format!("pretrain-{hash}/encoder.ckpt"),
        format!("pretrain-{hash}/metrics.jsonl"),
        format!("probe-{hash}/block-0.feat"),
        format!("probe-{hash}/block_auroc.csv"),
        format!("detect-{hash}/table1.csv"),
        format!("detect-{hash}/scores_W.csv"),
        format!("train-ALTERNATE_MOD2-{hash}/metrics.jsonl"),
        format!("train-ALTERNATE_MOD2-{hash}/best.ckpt"),
        format!("train-ALTERNATE_MOD2-{hash}/epoch-2.ckpt"),
        format!("train-ALTERNATE_MOD2-{hash}/final.ckpt"),
        format!("cotrain-OURS-{hash}/summary.json"),
    ] {
        assert!(seed.join(&f).is_file(), "missing {f}");
    }
    assert!(p.join(format!("out/report-{hash}.md")).is_file());
    assert!(p.join(format!("out/report-{hash}.json")).is_file());

    let log = fs::read_to_string(seed.join(format!("train-ALTERNATE_MOD2-{hash}/metrics.jsonl"))).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (e, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], e);
        for key in ["active", "auroc_z", "auroc_w", "pearson_z_w", "recall_clean_z", "test_accuracy"] {
            assert!(l.get(key).is_some(), "metrics line lacks {key}");
        }
    }
    let cot = fs::read_to_string(seed.join(format!("cotrain-OURS-{hash}/metrics.jsonl"))).unwrap();
    let first: serde_json::Value = serde_json::from_str(cot.lines().next().unwrap()).unwrap();
    for key in ["net_a", "net_b", "ensemble_accuracy"] {
        assert!(first.get(key).is_some());
    }

    let before = fs::read(seed.join(format!("train-Z_ONLY-{hash}/summary.json"))).unwrap();
    let again = lsa(&["train", "--strategy", "Z_ONLY", "--config", "c.toml", "--out", "out"], p);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let forced = lsa(&["train", "--strategy", "Z_ONLY", "--config", "c.toml", "--out", "out", "--force"], p);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    assert_eq!(fs::read(seed.join(format!("train-Z_ONLY-{hash}/summary.json"))).unwrap(), before);
}

#[test]
fn report_without_results_is_a_user_error() {
    let d = setup(SMOKE);
    assert_eq!(code(&lsa(&["report", "--config", "c.toml", "--out", "out"], d.path())), 1);
}

#[test]
fn default_config_parses_back() {
    let d = tempfile::tempdir().unwrap();
    let o = lsa(&["default-config"], d.path());
    assert_eq!(code(&o), 0);
    fs::write(d.path().join("c.toml"), &o.stdout).unwrap();
    let o = lsa(&["build-data", "--config", "c.toml", "--seed", "0", "--out", "out"], d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}
