use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[world]
height = 6
width = 6
max_objects = 3

[data]
n_train = 12
n_val = 6

[train]
epochs = 1
batch_size = 4
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reasonedit"));
    c.env_remove("RGENIE_DATA_DIR").env("RUST_LOG", "warn");
    c
}

fn run(c: &mut Command) -> Output {
    let out = c.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn pipeline_end_to_end_on_a_tiny_world() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");

    // the data root comes from the environment when --data is absent
    run(bin().env("RGENIE_DATA_DIR", &data).arg("--config").arg(&cfg).arg("gen-data"));
    for f in ["train.jsonl", "val.jsonl", "world.json", "specials.txt", "config.toml"] {
        assert!(data.join(f).is_file(), "{f} missing");
    }
    let train_text = read(&data.join("train.jsonl"));
    assert_eq!(train_text.lines().count(), 13);

    let ckpt_dir = root.join("run");
    let out = run(bin().arg("--config").arg(&cfg).arg("--data").arg(&data).arg("train").arg("--out").arg(&ckpt_dir));
    let hash = String::from_utf8(out.stdout).unwrap();
    let ckpt = ckpt_dir.join("model.ckpt");
    assert!(ckpt.is_file());
    assert!(hash.starts_with(read(&ckpt_dir.join("model.ckpt.sha256")).split_whitespace().next().unwrap()));
    let log = read(&ckpt_dir.join("train_log.tsv"));
    assert!(log.starts_with("epoch\tL_con\tL_recon\tlambda_con\tlambda_recon"));
    assert_eq!(log.lines().count(), 2);
    assert!(ckpt_dir.join("config.toml").is_file());

    let edit_dir = root.join("edit");
    run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .args(["edit", "--mask", "oracle", "--limit", "4", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(&edit_dir));
    let edits = read(&edit_dir.join("edits.jsonl"));
    assert_eq!(edits.lines().count(), 5);
    assert!(edits.lines().next().unwrap().contains("\"split\":\"edits\""));
    assert_eq!(read(&edit_dir.join("traces.jsonl")).lines().count(), 4);

    let eval = |dir: &str| {
        let d = root.join(dir);
        run(bin()
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .args(["eval", "--mask", "oracle", "--checkpoint"])
            .arg(&ckpt)
            .arg("--out")
            .arg(&d));
        read(&d.join("report.tsv"))
    };
    let a = eval("eval_a");
    let b = eval("eval_b");
    assert_eq!(a, b, "reruns must give identical reports");
    assert!(a.contains("# summary"));
    assert_eq!(a.lines().take_while(|l| !l.is_empty()).count(), 7);
}

#[test]
fn missing_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(tmp.path().join("nope.ckpt"))
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn bad_ablation_and_unknown_config_keys_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["--ablate", "wings=off", "verify", "--only", "contract"]).output().unwrap();
    assert!(!out.status.success());
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = bin().arg("--config").arg(&cfg).args(["verify", "--only", "contract"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn verify_lists_each_check() {
    let out = run(bin().args(["--ablate", "hrm=off", "verify", "--only", "oracle"]));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS")).collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert!(text.contains("4 checks, 0 failed"));
}
