use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use predloc::io::read_sequence;
use predloc::localizer::LocalizationRecord;
use serde_json::{json, Value};
use tempfile::TempDir;

fn predloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_predloc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = predloc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `count` synthetic videos with alternating labels and a manifest.
fn corpus(dir: &Path, count: usize, frames: usize, channels: usize) -> PathBuf {
    let mut manifest = String::new();
    for v in 0..count {
        let name = format!("v{v}.psvid");
        ok(&[
            "synth",
            "--out",
            p(&dir.join(&name)),
            "--video-id",
            &format!("v{v}"),
            "--label",
            &(v % 2).to_string(),
            "--width",
            "4",
            "--height",
            "4",
            "--channels",
            &channels.to_string(),
            "--frames",
            &frames.to_string(),
            "--seed",
            &v.to_string(),
        ]);
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).unwrap();
    path
}

const SMALL: [&str; 6] = ["--hidden-dim", "8", "--attention-dim", "4", "--K", "3"];

fn train(dir: &Path, manifest: &Path, name: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let ckpt = dir.join(format!("{name}.pstrm"));
    let metrics = dir.join(format!("{name}.jsonl"));
    let mut args = vec!["train", "--manifest", p(manifest), "--out", p(&ckpt), "--metrics", p(&metrics)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    ok(&args);
    (ckpt, metrics)
}

#[test]
fn empty_manifest_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("m.txt");
    fs::write(&manifest, "# nothing\n").unwrap();
    let out = predloc(&["train", "--manifest", p(&manifest), "--out", p(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(predloc(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn training_logs_one_row_per_update_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let manifest = corpus(dir.path(), 1, 10, 4);
    let (a, metrics) = train(dir.path(), &manifest, "a", &[]);
    let (b, _) = train(dir.path(), &manifest, "b", &[]);
    let (c, _) = train(dir.path(), &manifest, "c", &["--seed", "9"]);

    let rows: Vec<Value> = fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 9);
    for (t, r) in rows.iter().enumerate() {
        assert_eq!(r["frame"], json!(t));
        for key in ["event_scalar", "feature", "center", "geometry", "total", "lr", "wall_time_ms"] {
            assert!(r[key].is_number(), "{key}");
        }
        assert_eq!(r["event_map"].as_array().unwrap().len(), 16);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let info: Value = serde_json::from_slice(&ok(&["inspect", p(&a)]).stdout).unwrap();
    assert!(info.is_object());
}

#[test]
fn config_echo_precedes_work() {
    let dir = TempDir::new().unwrap();
    let manifest = corpus(dir.path(), 1, 3, 4);
    let out = ok(&[
        "train",
        "--manifest",
        p(&manifest),
        "--out",
        p(&dir.path().join("c")),
        "--hidden-dim",
        "8",
        "--attention-dim",
        "4",
        "--lambda1",
        "0.5",
    ]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let start = stderr.find('{').unwrap();
    let cfg: Value = serde_json::Deserializer::from_str(&stderr[start..]).into_iter().next().unwrap().unwrap();
    assert_eq!(cfg["lambda1"], json!(0.5));
    assert_eq!(cfg["hidden_dim"], json!(8));
}

#[test]
fn too_many_attended_cells_is_rejected() {
    let dir = TempDir::new().unwrap();
    let manifest = corpus(dir.path(), 1, 3, 4);
    let out = predloc(&[
        "train",
        "--manifest",
        p(&manifest),
        "--out",
        p(&dir.path().join("c")),
        "--hidden-dim",
        "8",
        "--K",
        "17",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn channel_mismatch_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let manifest = corpus(dir.path(), 1, 4, 4);
    let (ckpt, _) = train(dir.path(), &manifest, "a", &[]);
    let other = dir.path().join("wide");
    fs::create_dir(&other).unwrap();
    let wide = corpus(&other, 1, 4, 6);
    let out = predloc(&["localize", "--checkpoint", p(&ckpt), "--manifest", p(&wide)]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains('4') && stderr.contains('6'), "{stderr}");
}

#[test]
fn localize_output_is_sorted_and_covers_every_frame() {
    let dir = TempDir::new().unwrap();
    let manifest = corpus(dir.path(), 3, 6, 4);
    let (ckpt, _) = train(dir.path(), &manifest, "a", &[]);
    let preds = dir.path().join("preds.jsonl");
    let feats = dir.path().join("feats.jsonl");
    ok(&[
        "localize",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--out",
        p(&preds),
        "--features-out",
        p(&feats),
        "--K",
        "3",
    ]);
    let records: Vec<LocalizationRecord> =
        fs::read_to_string(&preds).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let keys: Vec<(String, usize)> = records.iter().map(|r| (r.video_id.clone(), r.frame)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(records.len(), 18);
    assert_eq!(fs::read_to_string(&feats).unwrap().lines().count(), 3);

    let continual = dir.path().join("cont.jsonl");
    ok(&["localize", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&continual), "--continual"]);
    assert_eq!(fs::read_to_string(&continual).unwrap().lines().count(), 18);
}

/// Ground-truth boxes as predictions, plus two well separated feature blobs.
fn perfect_inputs(dir: &Path, count: usize, flip_order: bool) -> (PathBuf, PathBuf) {
    let preds = dir.join("perfect.jsonl");
    let feats = dir.join(if flip_order { "feats_b.jsonl" } else { "feats_a.jsonl" });
    let mut pred_lines = String::new();
    let mut feat_lines = Vec::new();
    for v in 0..count {
        let seq = read_sequence(dir.join(format!("v{v}.psvid"))).unwrap();
        for f in &seq.frames {
            let b = f.gt_boxes[0];
            let rec = json!({"video_id": seq.video_id, "frame": f.index, "boxes": [[b.cx, b.cy, b.w, b.h, 1.0, false]], "grids": []});
            pred_lines.push_str(&format!("{rec}\n"));
        }
        let c = 10.0 * seq.label.unwrap() as f64;
        feat_lines.push(format!("{}\n", json!({"video_id": seq.video_id, "feature": [c + 0.1 * v as f64, c]})));
    }
    if flip_order {
        feat_lines.reverse();
    }
    fs::write(&preds, pred_lines).unwrap();
    fs::write(&feats, feat_lines.concat()).unwrap();
    (preds, feats)
}

#[test]
fn evaluation_of_perfect_predictions() {
    let dir = TempDir::new().unwrap();
    let manifest = corpus(dir.path(), 6, 5, 4);
    let (preds, feats) = perfect_inputs(dir.path(), 6, false);
    let report_path = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    ok(&[
        "evaluate",
        "--predictions",
        p(&preds),
        "--manifest",
        p(&manifest),
        "--features",
        p(&feats),
        "--out",
        p(&report_path),
        "--csv",
        p(&csv),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    for sigma in ["0.1", "0.2", "0.3", "0.5"] {
        assert_eq!(report["map"][sigma], json!(1.0), "{sigma}");
        assert_eq!(report["recall"][sigma], json!(1.0), "{sigma}");
    }
    assert_eq!(report["accuracy"], json!(1.0));
    assert_eq!(report["videos_evaluated"], json!(6));
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 1);

    // Relabelled clusters (another seed, another feature order) score the same.
    let (_, flipped) = perfect_inputs(dir.path(), 6, true);
    for (f, seed) in [(&feats, "3"), (&flipped, "0"), (&flipped, "11")] {
        let out = ok(&[
            "evaluate",
            "--predictions",
            p(&preds),
            "--manifest",
            p(&manifest),
            "--features",
            p(f),
            "--seed",
            seed,
        ]);
        let r: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(r["accuracy"], report["accuracy"]);
        assert_eq!(r["map"], report["map"]);
    }
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = TempDir::new().unwrap();
    let out = predloc(&["inspect", p(&dir.path().join("absent.psvid"))]);
    assert_eq!(out.status.code(), Some(3));
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a container").unwrap();
    assert_eq!(predloc(&["inspect", p(&junk)]).status.code(), Some(3));
}
