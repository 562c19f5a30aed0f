use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.train_classes=4",
    "data.holdout_classes=2",
    "data.per_class_train=2",
    "data.per_class_val=2",
    "data.per_class_holdout=2",
    "data.frames=4",
    "data.height=16",
    "data.width=16",
    "model.video_layers=2",
    "model.text_layers=2",
    "model.video_width=16",
    "model.text_width=16",
    "model.joint_width=8",
    "model.video_heads=2",
    "model.text_heads=2",
    "model.mlp_ratio=2",
    "train.epochs=1",
];

fn m2clip(args: &[&str], out: &Path, tiny: bool) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_m2clip"));
    cmd.args(args).arg("--out").arg(out);
    if tiny {
        for s in TINY {
            cmd.args(["--set", s]);
        }
    }
    cmd.output().expect("spawn m2clip")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_and_key_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_m2clip")).arg("bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = m2clip(&["params", "--set", "train.epoch=3"], dir.path(), false);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("train.epoch"));
    let o = m2clip(&["params", "--set", "train.epochs"], dir.path(), false);
    assert_eq!(o.status.code(), Some(2));
    let o = m2clip(&["params", "--set", "adapter.temporal_kernel=4"], dir.path(), false);
    assert_eq!(o.status.code(), Some(2));
    let o = m2clip(&["ablate", "--suite", "nope"], dir.path(), true);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let o = Command::new(env!("CARGO_BIN_EXE_m2clip")).args(["train", "--help"]).output().unwrap();
    assert!(o.status.success());
    let help = stdout(&o);
    for (key, _) in m2clip::config::KEYS {
        assert!(help.contains(key), "{key} missing from --help");
    }
    let defaults = m2clip::Config::default();
    assert!(help.contains(&defaults.get("train.learning_rate").unwrap()));
}

#[test]
fn params_prints_the_table_and_warns_on_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let o = m2clip(
        &["params", "--set", "placement.text_layers=none", "--set", "placement.text_layers=all"],
        dir.path(),
        false,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("placement.text_layers set more than once"));
    let table = std::fs::read_to_string(dir.path().join("params.txt")).unwrap();
    assert_eq!(table, stdout(&o));
    assert!(table.contains("text.layer1.adapter"));
}

#[test]
fn config_file_is_read_and_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "# text adapters everywhere\nplacement.text_layers = all\nseed = 3\nseed = 4\n").unwrap();
    let o = m2clip(
        &["params", "--config", file.to_str().unwrap(), "--set", "placement.text_layers=none"],
        dir.path(),
        false,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed set more than once"));
    assert!(!stdout(&o).lines().any(|l| l.starts_with("text.") && l.contains("adapter")));

    std::fs::write(&file, "this is not a config\n").unwrap();
    let o = m2clip(&["params", "--config", file.to_str().unwrap()], dir.path(), false);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_evaluate_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = m2clip(&["train"], dir.path(), true);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "metrics.tsv", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with("epoch\tstep\t"));
    assert_eq!(metrics.lines().count(), 2);

    let ckpt = dir.path().join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let o = m2clip(&["eval", "--checkpoint", ckpt], dir.path(), false);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = std::fs::read_to_string(dir.path().join("eval.tsv")).unwrap();
    assert!(eval.lines().nth(1).unwrap().starts_with("vc\t"));

    let o = m2clip(&["zeroshot", "--checkpoint", ckpt], dir.path(), false);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("over 4 clips of 2 classes"));

    // Overrides that change the architecture cannot reuse the weights.
    let o = m2clip(&["eval", "--checkpoint", ckpt, "--set", "model.joint_width=4"], dir.path(), false);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shape mismatch"), "{}", stderr(&o));
}

#[test]
fn corrupt_or_missing_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOPE\x01\x00\x00\x00").unwrap();
    let o = m2clip(&["eval", "--checkpoint", bad.to_str().unwrap()], dir.path(), false);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));

    let missing = dir.path().join("missing.ckpt");
    let o = m2clip(&["zeroshot", "--checkpoint", missing.to_str().unwrap()], dir.path(), false);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(m2clip(&["gen-data"], a.path(), true).status.success());
    assert!(m2clip(&["gen-data"], b.path(), true).status.success());
    let read = |d: &Path| std::fs::read(d.join("dataset.bin")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn gradcheck_reports_pass_and_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = m2clip(&["gradcheck", "--entries", "2"], dir.path(), true);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("pass"));
    // A tolerance no finite-difference estimate can meet.
    let o = m2clip(&["gradcheck", "--entries", "2", "--tol", "1e-300"], dir.path(), true);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}
