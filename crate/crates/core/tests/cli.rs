use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn seqsleep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqsleep"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = seqsleep(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const MODEL: [&str; 10] = [
    "--n-filters", "4", "--ernn-hidden", "4", "--attention-size", "4", "--seqrnn-hidden", "4", "--seq-len", "4",
];

fn pretrained(dir: &Path) {
    ok(dir, &["synth", "--out", "src", "--subjects", "2", "--epochs", "20", "--seed", "1"]);
    let mut args = vec!["pretrain", "--data", "src", "--out", "pre.ckpt", "--epochs", "1", "--max-steps", "3"];
    args.extend_from_slice(&MODEL);
    ok(dir, &args);
}

#[test]
fn synth_writes_requested_cohort_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(d, &["synth", "--out", out, "--subjects", "3", "--epochs", "7", "--seed", "4"]);
    }
    ok(d, &["synth", "--out", "c", "--subjects", "3", "--epochs", "7", "--seed", "4", "--mismatch", "heavy"]);
    let recs = seqsleep::dataio::load_cohort(&d.join("a")).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.n_epochs() == 7));
    let manifest = fs::read_to_string(d.join("a/manifest")).unwrap();
    for line in manifest.lines() {
        let file = line.split('\t').next().unwrap();
        assert_eq!(fs::read(d.join("a").join(file)).unwrap(), fs::read(d.join("b").join(file)).unwrap());
        assert_ne!(fs::read(d.join("a").join(file)).unwrap(), fs::read(d.join("c").join(file)).unwrap());
    }
}

#[test]
fn direct_finetune_copies_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pretrained(d);
    ok(d, &["finetune", "--init", "pre.ckpt", "--data", "src", "--regime", "direct", "--out", "ft.ckpt"]);
    assert_eq!(fs::read(d.join("pre.ckpt")).unwrap(), fs::read(d.join("ft.ckpt")).unwrap());
}

#[test]
fn eval_writes_report_and_hypnograms() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pretrained(d);
    ok(d, &["eval", "--model", "pre.ckpt", "--data", "src", "--out", "ev"]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    for key in ["accuracy", "kappa", "mf1", "sensitivity", "specificity", "confusion"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let text = fs::read_to_string(d.join("ev/report.txt")).unwrap();
    assert!(text.contains("accuracy"));
    let hyp = fs::read_to_string(d.join("ev/hypnograms/S01.txt")).unwrap();
    assert_eq!(hyp.lines().count(), 20);
}

#[test]
fn loso_writes_one_report_per_subject() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pretrained(d);
    ok(d, &["synth", "--out", "tgt", "--subjects", "6", "--epochs", "12", "--seed", "2"]);
    ok(d, &["loso", "--data", "tgt", "--init", "pre.ckpt", "--regime", "softmax", "--out", "cv", "--max-steps", "2"]);
    let folds = fs::read_dir(d.join("cv"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("fold_"))
        .count();
    assert_eq!(folds, 6);
    assert!(d.join("cv/pooled.txt").exists());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cv/loso.json")).unwrap()).unwrap();
    assert_eq!(json["folds"].as_array().unwrap().len(), 6);
}

#[test]
fn help_lists_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let help = String::from_utf8(ok(tmp.path(), &["loso", "--help"]).stdout).unwrap();
    for needle in ["--seq-len", "[default: 20", "--lr", "[default: 0.0001", "--scratch", "--jobs"] {
        assert!(help.contains(needle), "help lacks {needle}");
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // missing required setting
    assert_eq!(seqsleep(d, &["pretrain", "--out", "x.ckpt"]).status.code(), Some(2));
    fs::write(d.join("bad.cfg"), "colour = red\n").unwrap();
    assert_eq!(seqsleep(d, &["synth", "--config", "bad.cfg", "--out", "o"]).status.code(), Some(2));
    // unreadable cohort
    assert_eq!(seqsleep(d, &["eval", "--model", "nope.ckpt", "--data", "nowhere", "--out", "o"]).status.code().map(|c| c != 0), Some(true));
    let out = seqsleep(d, &["pretrain", "--data", "nowhere", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data error"));
}
