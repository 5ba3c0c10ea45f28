use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avwatch_core::featureio::{
    read_mask, write_features, FeatureSequence, Manifest, Modality, SynthConfig,
};
use avwatch_core::trainer::TrainConfig;

fn avwatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avwatch"))
        .current_dir(dir)
        .env("AVWATCH_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 8] = [
    "--set",
    "synth.n_train=10",
    "--set",
    "synth.n_test=6",
    "--set",
    "synth.dim=16",
    "--set",
    "train.epochs=1",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = SMALL.to_vec();
    v.extend_from_slice(args);
    v
}

fn synth(dir: &Path) {
    let o = avwatch(dir, &with_small(&["synth", "--out", "ds"]));
    assert!(o.status.success(), "{}", stderr(&o));
}

fn keys(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, c) in m {
                keys(&format!("{prefix}.{k}"), c, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = avwatch(dir.path(), &["--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    let mut expected = vec!["seed".to_string()];
    keys("synth", &serde_json::to_value(SynthConfig::default()).unwrap(), &mut expected);
    keys("train", &serde_json::to_value(TrainConfig::default()).unwrap(), &mut expected);
    for k in ["stride", "max_len", "train_manifest", "test_manifest", "classes", "class_embeddings"] {
        expected.push(format!("data.{k}"));
    }
    for key in &expected {
        let line = help
            .lines()
            .find(|l| l.split_whitespace().next() == Some(key.as_str()))
            .unwrap_or_else(|| panic!("{key} missing from --help"));
        assert!(line.split_whitespace().count() >= 2, "{key} has no default: {line}");
    }
    assert!(help.contains("train.learning_rate") && help.contains("0.001"));
    assert!(help.contains("AVWATCH_LOG"));
}

#[test]
fn gradcheck_passes_and_prints_the_worst_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = avwatch(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("max relative error:")).unwrap();
    let worst: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst < 1e-4);
    assert!(!out.contains("FAIL"));
}

#[test]
fn zero_epoch_training_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = avwatch(dir.path(), &with_small(&["--set", "train.epochs=0", "train", "--out", "r"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("trained 0 epochs"));
    let ckpt = avwatch_core::avmodel::load_checkpoint(dir.path().join("r/model.avck")).unwrap();
    assert_eq!(ckpt.config.dim, 16);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["epochs"], serde_json::json!([]));
    assert_eq!(report["config"]["train"]["epochs"], 0);
    assert_eq!(report["config"]["synth"]["dim"], 16);
}

#[test]
fn oracle_score_dumps_reach_ap_one() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let manifest = Manifest::read(dir.path().join("ds/test.jsonl")).unwrap();
    let scores = dir.path().join("oracle");
    fs::create_dir_all(&scores).unwrap();
    for rec in &manifest.records {
        let gt = read_mask(manifest.resolve(rec.frame_gt_path.as_ref().unwrap())).unwrap();
        let mut data = Vec::new();
        for &c in &gt {
            data.push(if c > 0 { 1.0f32 } else { 0.0 });
            data.extend((0..4).map(|k| if k == c as usize { 1.0f32 } else { 0.0 }));
        }
        let seq = FeatureSequence::new(rec.video_id.clone(), Modality::Scores, gt.len(), 5, data).unwrap();
        write_features(&seq, scores.join(format!("{}.scores.avfe", rec.video_id))).unwrap();
    }
    let o = avwatch(
        dir.path(),
        &["eval", "--scores", "oracle", "--manifest", "ds/test.jsonl", "--out", "eval.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("frame AP: 1.0000"), "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["frame_ap"], 1.0);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = avwatch(dir.path(), &with_small(&["--deterministic", "synth", "--out", out]));
        assert!(o.status.success());
        let o = avwatch(
            dir.path(),
            &with_small(&["--deterministic", "train", "--out", &format!("{out}/run")]),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["run/model.avck", "run/report.json", "train.jsonl", "synth_report.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn full_pipeline_from_manifests() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::write(
        dir.path().join("run.toml"),
        "[data]\ntrain_manifest = \"ds/train.jsonl\"\ntest_manifest = \"ds/test.jsonl\"\n[train]\nepochs = 1\n",
    )
    .unwrap();
    let o = avwatch(dir.path(), &["--config", "run.toml", "train", "--out", "teacher"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = avwatch(
        dir.path(),
        &["--config", "run.toml", "distill", "--teacher", "teacher/model.avck", "--out", "student"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = avwatch(
        dir.path(),
        &["score", "--checkpoint", "student/model.avck", "--manifest", "ds/test.jsonl", "--out", "dumps"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let from_dumps = avwatch(dir.path(), &["eval", "--scores", "dumps", "--manifest", "ds/test.jsonl"]);
    let from_model = avwatch(
        dir.path(),
        &["eval", "--checkpoint", "student/model.avck", "--manifest", "ds/test.jsonl"],
    );
    assert!(from_dumps.status.success() && from_model.status.success());
    let ap = |o: &Output| stdout(o).lines().find(|l| l.contains("frame AP")).unwrap().to_string();
    assert_eq!(ap(&from_dumps), ap(&from_model));
}

#[test]
fn set_overrides_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[train]\nepochs = 3\n").unwrap();
    let o = avwatch(
        dir.path(),
        &with_small(&["--config", "c.toml", "--set", "train.epochs=0", "train", "--out", "r"]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("trained 0 epochs"));
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nbogus = 1\n").unwrap();
    let o = avwatch(dir.path(), &["--config", "bad.toml", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.bogus"));

    let o = avwatch(dir.path(), &["--set", "train.batch_size=0", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.batch_size"));

    let o = avwatch(dir.path(), &["distill"]);
    assert_eq!(o.status.code(), Some(1));

    let o = avwatch(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = avwatch(dir.path(), &["--set", "data.train_manifest=missing.jsonl", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.jsonl"));

    synth(dir.path());
    let o = avwatch(dir.path(), &with_small(&["--set", "train.epochs=0", "train", "--out", "r"]));
    assert!(o.status.success());
    let path = dir.path().join("r/model.avck");
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let o = avwatch(dir.path(), &["eval", "--checkpoint", "r/model.avck", "--manifest", "ds/test.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.avck"));
}
