use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use entropy_monitor::dump::{write_dump_file, BatchLabel, ManifestBatch, RunManifest};
use entropy_monitor::entropy::ActivationBatch;
use entropy_monitor::pipeline::{BatchOutcome, DetectionReport, ProfileStore};
use entropy_monitor::profile::ThresholdSource;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_entropy-monitor"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// `k` activations in distinct `features.0` bins, so the entropy is log2(k).
fn spread(k: usize) -> Vec<f32> {
    (0..k).map(|i| 0.01 + 0.02 * i as f32).collect()
}

fn write_manifest(dir: &Path, batches: &[(BatchLabel, Vec<f32>)]) -> PathBuf {
    std::fs::create_dir_all(dir.join("dumps")).unwrap();
    let mut m = RunManifest {
        batch_size: 1,
        metadata: Default::default(),
        batches: vec![],
        base_dir: dir.to_path_buf(),
    };
    for (i, (label, values)) in batches.iter().enumerate() {
        let rel = PathBuf::from(format!("dumps/b{i}.admp"));
        let batch = ActivationBatch::new("features.0", vec![1, values.len()], values.clone()).unwrap();
        write_dump_file(&batch, &dir.join(&rel)).unwrap();
        m.batches.push(ManifestBatch {
            batch_id: i as u64,
            label: *label,
            files: [("features.0".to_string(), rel)].into(),
        });
    }
    let path = dir.join("manifest.toml");
    m.save(&path).unwrap();
    path
}

fn write_thresholds(dir: &Path, tau: f64, direction: &str) -> PathBuf {
    let path = dir.join("thresholds.json");
    let json = format!(
        r#"{{"format_version": 1, "thresholds": [{{"layer_key": "features.0", "tau": {tau},
        "direction": "{direction}", "source": "optimized", "train_fpr": 0.0, "train_fnr": 0.0}}]}}"#
    );
    std::fs::write(&path, json).unwrap();
    path
}

fn load_report(path: &Path) -> DetectionReport {
    DetectionReport::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn demo_writes_artifacts_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = run(&["demo", "--out", "a"], tmp.path());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = run(&["demo", "--out", "b"], tmp.path());
    assert_eq!(code(&b), 0);
    for f in ["report.json", "profiles.json", "thresholds.json", "entropies.csv", "hist_features.0.csv"] {
        let x = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let other = run(&["demo", "--seed", "7", "--out", "c"], tmp.path());
    assert_eq!(code(&other), 0);
    assert_ne!(
        std::fs::read(tmp.path().join("a/report.json")).unwrap(),
        std::fs::read(tmp.path().join("c/report.json")).unwrap()
    );
    let ev = run(&["eval", "--report", "a/report.json"], tmp.path());
    assert_eq!(code(&ev), 0, "{}", stderr(&ev));
}

#[test]
fn manifest_pipeline_reproduces_demo_detection() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&run(&["demo", "--dump", "--out", "demo"], d)), 0);
    let steps: [&[&str]; 4] = [
        &["profile", "--manifest", "demo/train.toml", "--out", "p.json"],
        &["calibrate", "--profiles", "p.json", "--out", "t.json"],
        &["detect", "--manifest", "demo/test.toml", "--thresholds", "t.json", "--profiles", "p.json", "--out", "r.json"],
        &["plot-data", "--manifest", "demo/test.toml", "--out", "plots"],
    ];
    for args in steps {
        let out = run(args, d);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    let demo = load_report(&d.join("demo/report.json"));
    let detect = load_report(&d.join("r.json"));
    for layer in ["features.0", "classifier.3"] {
        let want = demo.layer(layer, ThresholdSource::Optimized).unwrap();
        let got = detect.layer(layer, ThresholdSource::Optimized).unwrap();
        assert_eq!(want.threshold, got.threshold);
        assert_eq!(want.metrics, got.metrics);
    }
    assert!(detect.fused.is_some());
    let profiles = ProfileStore::load(&d.join("p.json")).unwrap();
    assert_eq!(profiles.profiles.len(), 2);
    let csv = std::fs::read_to_string(d.join("plots/entropies.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10 * 2);
}

#[test]
fn one_missed_attack_in_ten_yields_ninety_percent() {
    let tmp = TempDir::new().unwrap();
    let mut batches: Vec<(BatchLabel, Vec<f32>)> = (0..5).map(|_| (BatchLabel::Clean, spread(4))).collect();
    batches.extend((0..4).map(|_| (BatchLabel::Adversarial, spread(8))));
    batches.push((BatchLabel::Adversarial, spread(4)));
    let manifest = write_manifest(tmp.path(), &batches);
    let thresholds = write_thresholds(tmp.path(), 2.5, "adversarial_above");
    let out = run(
        &["detect", "--manifest", manifest.to_str().unwrap(), "--thresholds", thresholds.to_str().unwrap(), "--out", "r.json"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = load_report(&tmp.path().join("r.json"));
    let m = r.layers[0].metrics.as_ref().unwrap();
    assert_eq!((m.tp, m.tn, m.fp, m.fn_), (4, 5, 0, 1));
    assert_eq!((m.accuracy, m.fpr, m.fnr), (0.9, 0.0, 0.2));
}

#[test]
fn unlabelled_batches_get_verdicts_without_metrics() {
    let tmp = TempDir::new().unwrap();
    let batches = vec![(BatchLabel::Unknown, spread(2)), (BatchLabel::Unknown, spread(16))];
    write_manifest(tmp.path(), &batches);
    write_thresholds(tmp.path(), 2.5, "adversarial_above");
    let out = run(&["detect", "--manifest", "manifest.toml", "--thresholds", "thresholds.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = load_report(&tmp.path().join("report.json"));
    assert!(r.layers[0].metrics.is_none());
    assert_eq!(r.layers[0].verdicts.len(), 2);
    let text = std::fs::read_to_string(tmp.path().join("report.json")).unwrap();
    assert!(!text.contains("\"metrics\""));
}

#[test]
fn degenerate_batches_are_reported_not_scored() {
    let tmp = TempDir::new().unwrap();
    let batches = vec![
        (BatchLabel::Clean, spread(2)),
        (BatchLabel::Clean, vec![0.0, -1.0, 0.0]),
        (BatchLabel::Adversarial, spread(8)),
    ];
    write_manifest(tmp.path(), &batches);
    write_thresholds(tmp.path(), 2.5, "adversarial_above");
    let out = run(&["detect", "--manifest", "manifest.toml", "--thresholds", "thresholds.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = load_report(&tmp.path().join("report.json"));
    let l = &r.layers[0];
    assert_eq!(l.verdicts[1].outcome, BatchOutcome::Degenerate);
    let m = l.metrics.as_ref().unwrap();
    assert_eq!(m.tp + m.tn + m.fp + m.fn_, 2);
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();

    assert_eq!(code(&run(&["frobnicate"], d)), 2);
    assert_eq!(code(&run(&["calibrate", "--method", "magic", "--profiles", "x"], d)), 2);

    std::fs::write(d.join("bad_bins.toml"), "[layers]\n\"features.0\" = [0.0, 2.0, 1.0]\n").unwrap();
    let out = run(&["demo", "--bins", "bad_bins.toml", "--out", "x"], d);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert_eq!(code(&run(&["demo", "--layers", "conv9", "--out", "x"], d)), 3);
    std::fs::write(d.join("empty.toml"), "batch_size = 4\n").unwrap();
    write_thresholds(d, 1.0, "adversarial_above");
    let out = run(&["detect", "--manifest", "empty.toml", "--thresholds", "thresholds.json"], d);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let out = run(&["profile", "--manifest", "missing.toml"], d);
    assert_eq!(code(&out), 8);
    assert!(stderr(&out).contains("missing.toml"));

    let manifest = write_manifest(&d.join("m"), &[(BatchLabel::Clean, spread(2)), (BatchLabel::Clean, spread(4))]);
    let dump = d.join("m/dumps/b0.admp");
    let mut bytes = std::fs::read(&dump).unwrap();
    bytes[4] = 2; // version
    let crc_at = bytes.len() - 4 * 2 - 4;
    let crc = crc32fast::hash(&bytes[..crc_at]);
    bytes[crc_at..crc_at + 4].copy_from_slice(&crc.to_le_bytes());
    std::fs::write(&dump, &bytes).unwrap();
    let m = manifest.to_str().unwrap();
    assert_eq!(code(&run(&["profile", "--manifest", m], d)), 6);
    bytes[9] ^= 0x40;
    std::fs::write(&dump, &bytes).unwrap();
    assert_eq!(code(&run(&["profile", "--manifest", m], d)), 5);

    // clean-only profiles cannot be calibrated
    let manifest = write_manifest(&d.join("c"), &[(BatchLabel::Clean, spread(2)), (BatchLabel::Clean, spread(4))]);
    let out = run(&["profile", "--manifest", manifest.to_str().unwrap(), "--out", "clean_only.json"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(code(&run(&["calibrate", "--profiles", "clean_only.json"], d)), 7);

    let manifest = write_manifest(&d.join("n"), &[(BatchLabel::Clean, vec![1.0, 2.0])]);
    let dump = d.join("n/dumps/b0.admp");
    let mut bytes = std::fs::read(&dump).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&dump, &bytes).unwrap();
    let out = run(&["plot-data", "--manifest", manifest.to_str().unwrap()], d);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn tampered_report_fails_eval() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&run(&["demo", "--out", "o"], d)), 0);
    let path = d.join("o/report.json");
    let mut r = load_report(&path);
    r.layers[0].metrics.as_mut().unwrap().tn += 1;
    std::fs::write(&path, r.to_json()).unwrap();
    assert_eq!(code(&run(&["eval", "--report", "o/report.json"], d)), 4);
}
