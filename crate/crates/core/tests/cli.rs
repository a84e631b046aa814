//! Command-line contract: exit codes, file outputs and seeded determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn amcrn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amcrn"))
        .current_dir(dir)
        .env("AMCRN_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = amcrn(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Toy corpus split into train/test plus a small trained checkpoint.
fn trained(dir: &Path) -> PathBuf {
    ok(dir, &["toygen", "--out", "toy", "--speakers", "3", "--utts", "4", "--seconds", "1.5", "--heldout", "2"]);
    ok(
        dir,
        &[
            "train", "--data", "toy/train", "--out", "m.ckpt", "--tiny", "--epochs", "2", "--batch-size", "3",
            "--set", "val_fraction=0.3", "--set", "blstm_hidden=8", "--set", "initial_channels=16",
            "--set", "mcb_channels=16,16,16", "--seed", "5",
        ],
    );
    dir.join("m.ckpt")
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    for f in ["m.ckpt", "m.ckpt.config", "m.ckpt.loss.csv", "m.ckpt.plda"] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(d.join("m.ckpt.loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(csv.lines().count(), 3);
    let first = std::fs::read(d.join("m.ckpt")).unwrap();
    std::fs::create_dir(d.join("again")).unwrap();
    std::fs::rename(d.join("toy"), d.join("again/toy")).unwrap();
    trained(&d.join("again"));
    assert_eq!(std::fs::read(d.join("again/m.ckpt")).unwrap(), first);
    assert_eq!(std::fs::read_to_string(d.join("again/m.ckpt.loss.csv")).unwrap(), csv);
}

#[test]
fn toy_training_directive() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "train", "--toy", "speakers=3", "utts=4", "seconds=1", "--epochs", "1", "--tiny", "--out", "t.ckpt",
            "--set", "val_fraction=0.3", "--set", "blstm_hidden=8", "--set", "initial_channels=16",
            "--set", "mcb_channels=16,16,16",
        ],
    );
    ok(dir.path(), &["toygen", "--out", "w", "--speakers", "2", "--utts", "1", "--seconds", "1"]);
    let e = ok(dir.path(), &["embed", "--checkpoint", "t.ckpt", "w/spk00/utt00.wav"]);
    assert_eq!(e.split_whitespace().count(), 256);
}

#[test]
fn enroll_verify_embed_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let wav = "toy/test/spk00/utt02.wav";
    let other = "toy/test/spk01/utt02.wav";

    let e1 = ok(d, &["embed", "--checkpoint", "m.ckpt", wav]);
    assert_eq!(e1.split_whitespace().count(), 256);
    assert_eq!(ok(d, &["embed", "--checkpoint", "m.ckpt", wav]), e1);

    ok(d, &["enroll", "--checkpoint", "m.ckpt", "--store", "s.txt", "--speaker", "alice", wav]);
    let store = std::fs::read_to_string(d.join("s.txt")).unwrap();
    let (head, values) = store.trim_end().rsplit_once('\t').unwrap();
    assert_eq!(head, "alice\t1");
    assert_eq!(values, e1.trim_end());

    let dup = amcrn(d, &["enroll", "--checkpoint", "m.ckpt", "--store", "s.txt", "--speaker", "alice", wav]);
    assert_eq!(dup.status.code(), Some(2));
    ok(d, &["enroll", "--checkpoint", "m.ckpt", "--store", "s.txt", "--speaker", "alice", "--overwrite", wav, wav]);
    let store = std::fs::read_to_string(d.join("s.txt")).unwrap();
    assert!(store.starts_with("alice\t2\t"));
    assert_eq!(store.trim_end().rsplit_once('\t').unwrap().1, e1.trim_end());

    let v = amcrn(d, &["verify", "--checkpoint", "m.ckpt", "--store", "s.txt", "--speaker", "alice", wav]);
    assert_eq!(v.status.code(), Some(0));
    let text = String::from_utf8(v.stdout).unwrap();
    assert!(text.contains("score=1 ") && text.contains("threshold=0.5") && text.contains("decision=accept"));

    let r = amcrn(
        d,
        &["verify", "--checkpoint", "m.ckpt", "--store", "s.txt", "--speaker", "alice", other, "--threshold", "1.5"],
    );
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8(r.stdout).unwrap().contains("decision=reject"));

    let u = amcrn(d, &["verify", "--checkpoint", "m.ckpt", "--store", "s.txt", "--speaker", "bob", wav]);
    assert_eq!(u.status.code(), Some(2));
    assert!(String::from_utf8(u.stderr).unwrap().contains("bob"));

    let p = amcrn(
        d,
        &["verify", "--checkpoint", "m.ckpt", "--store", "s.txt", "--speaker", "alice", wav, "--backend", "plda"],
    );
    assert!(matches!(p.status.code(), Some(0 | 1)));

    std::fs::write(d.join("self.txt"), format!("1 {wav} {wav}\n0 {wav} {other}\n")).unwrap();
    let report = ok(d, &["eval", "--checkpoint", "m.ckpt", "--trials", "self.txt", "--audio-root", "."]);
    assert!(report.contains("eer=0\n"));
    let scores = std::fs::read_to_string(d.join("self.txt.scores")).unwrap();
    assert!(scores.starts_with(&format!("1 {wav} {wav} 1\n")));
    assert_eq!(std::fs::read_to_string(d.join("self.txt.report")).unwrap(), report);

    let args = [
        "eval", "--checkpoint", "m.ckpt", "--trials", "toy/test/trials.txt", "--audio-root", "toy/test",
        "--truncate", "1", "--backend", "plda", "--seed", "3", "--scores", "a.scores", "--sweep", "sweep.csv",
    ];
    let first = ok(d, &args);
    let first_scores = std::fs::read_to_string(d.join("a.scores")).unwrap();
    assert_eq!(ok(d, &args), first);
    assert_eq!(std::fs::read_to_string(d.join("a.scores")).unwrap(), first_scores);
    assert!(std::fs::read_to_string(d.join("sweep.csv")).unwrap().starts_with("threshold,far,frr\n"));

    std::fs::write(d.join("bad.txt"), "1 a.wav b.wav\nyes a.wav b.wav\n").unwrap();
    let bad = amcrn(d, &["eval", "--checkpoint", "m.ckpt", "--trials", "bad.txt", "--audio-root", "."]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8(bad.stderr).unwrap().contains("bad.txt:2"));

    std::fs::write(d.join("missing.txt"), "1 nope.wav nope.wav\n0 nope.wav nope.wav\n").unwrap();
    let missing = amcrn(d, &["eval", "--checkpoint", "m.ckpt", "--trials", "missing.txt", "--audio-root", "."]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8(missing.stderr).unwrap().contains("nope.wav"));
}

#[test]
fn profile_reports_three_durations() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["profile", "--csv", "p.csv"]);
    let header = out.lines().next().unwrap();
    assert!(header.contains("params") && header.contains("MACs@2s") && header.contains("MACs@3s") && header.contains("MACs@5s"));
    let total: Vec<u64> = out
        .lines()
        .find(|l| l.starts_with("total"))
        .unwrap()
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    let r3 = total[2] as f64 / total[1] as f64;
    let r5 = total[3] as f64 / total[1] as f64;
    assert!((r3 - 1.5).abs() < 0.03 && (r5 - 2.5).abs() < 0.05, "{r3} {r5}");
    let csv = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let sum: u64 = csv
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("2,"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(sum, total[1]);
}

#[test]
fn toygen_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(d, &["toygen", "--out", out, "--speakers", "2", "--utts", "2", "--seconds", "0.5", "--seed", "4"]);
    }
    for f in ["spk00/utt00.wav", "spk01/utt01.wav"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# settings\nepochs = 2\nepoch = 3\n").unwrap();
    let out = amcrn(d, &["--config", "run.cfg", "profile"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("run.cfg:3"));

    std::fs::write(d.join("good.cfg"), "preset = tiny\n").unwrap();
    let tiny = ok(d, &["--config", "good.cfg", "profile"]);
    let flag = ok(d, &["profile", "--tiny"]);
    assert_eq!(tiny, flag);

    assert_eq!(amcrn(d, &["verify"]).status.code(), Some(2));
    assert_eq!(amcrn(d, &["train", "--out", "x.ckpt"]).status.code(), Some(2));
}
