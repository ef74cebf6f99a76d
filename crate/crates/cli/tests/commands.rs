use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fsl_core::embedio::{load_dataset, save_dataset, synth_dataset, SynthSpec};

fn fsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsl")).args(args).output().expect("spawn fsl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_args<'a>(out: &'a str, patients: &'a str, psigma: &'a str) -> Vec<&'a str> {
    vec![
        "synth",
        "--patients",
        patients,
        "--frames",
        "20",
        "--dim",
        "16",
        "--sep",
        "4",
        "--psigma",
        psigma,
        "--nsigma",
        "1",
        "--seed",
        "7",
        "--out",
        out,
    ]
}

fn quick_config(dir: &Path, dataset: Option<&str>, extra: &str) -> String {
    let dataset = dataset.map(|d| format!(r#""dataset": {{"path": "{d}"}},"#)).unwrap_or_default();
    let text = format!(
        r#"{{ {dataset} "train": {{"episodes": 20, "seed": 3}}, "eval": {{"episodes": 40}}, "cv": {{"k": 3}} {extra} }}"#
    );
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn synth_writes_a_readable_deterministic_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("vf_like.fsle");
    let b = dir.path().join("again.fsle");
    let out = fsl(&[
        "synth",
        "--patients",
        "11",
        "--frames",
        "100",
        "--dim",
        "16",
        "--sep",
        "4",
        "--psigma",
        "2",
        "--nsigma",
        "1",
        "--seed",
        "7",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = load_dataset(&a).unwrap();
    assert_eq!((ds.len(), ds.dim, ds.patients().len()), (2200, 16, 11));
    fsl(&[
        "synth",
        "--patients",
        "11",
        "--frames",
        "100",
        "--dim",
        "16",
        "--sep",
        "4",
        "--psigma",
        "2",
        "--nsigma",
        "1",
        "--seed",
        "7",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn synth_rejects_zero_patients() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fsle");
    let out = fsl(&synth_args(path.to_str().unwrap(), "0", "1"));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("num_patients"), "{}", stderr(&out));
}

#[test]
fn synth_reports_unwritable_output() {
    let out = fsl(&synth_args("/nonexistent-dir/x.fsle", "4", "1"));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

fn write_png(path: &Path, seed: u8) {
    let img = image::GrayImage::from_fn(48, 40, |x, y| image::Luma([(x as u8).wrapping_mul(seed) ^ y as u8]));
    img.save(path).unwrap();
}

#[test]
fn embed_three_frames() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("imgs");
    fs::create_dir(&images).unwrap();
    write_png(&images.join("P1_s0_0.png"), 3);
    write_png(&images.join("P1_s0_1.png"), 3);
    write_png(&images.join("P2_s1_0.png"), 5);
    fs::write(images.join("labels.csv"), "patient_id,sequence_id,label\nP1,s0,0\nP2,s1,1\n").unwrap();
    let out_path = dir.path().join("emb.fsle");
    let out = fsl(&["embed", "--images", images.to_str().unwrap(), "--grid", "4", "--out", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = load_dataset(&out_path).unwrap();
    assert_eq!((ds.len(), ds.dim), (3, 48));
    assert_eq!(ds.records[0].vector, ds.records[1].vector);

    let aug_path = dir.path().join("aug.csv");
    let out = fsl(&[
        "embed",
        "--images",
        images.to_str().unwrap(),
        "--augment",
        "2",
        "--circle",
        "24,20,20",
        "--out",
        aug_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(load_dataset(&aug_path).unwrap().len(), 6);

    fs::write(images.join("foo.png"), b"").unwrap();
    let out = fsl(&["embed", "--images", images.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("foo.png"), "{}", stderr(&out));
}

#[test]
fn embed_unreadable_image() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("P1_s0_0.png"), b"not a png").unwrap();
    fs::write(dir.path().join("labels.csv"), "patient_id,sequence_id,label\nP1,s0,0\n").unwrap();
    let out_path = dir.path().join("x.fsle");
    let out = fsl(&["embed", "--images", dir.path().to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn run_writes_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.fsle");
    assert_eq!(code(&fsl(&synth_args(data.to_str().unwrap(), "6", "0.5"))), 0);
    let config = quick_config(dir.path(), Some("d.fsle"), "");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["run", "--config", &config, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = fsl(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let a = run("a", &[]);
    let b = run("b", &["--sequential"]);
    let summary = fs::read(a.join("summary.csv")).unwrap();
    assert_eq!(summary, fs::read(b.join("summary.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&summary).lines().count(), 5);
    assert_eq!(fs::read_dir(a.join("reports")).unwrap().count(), 12);

    let threaded = Command::new(env!("CARGO_BIN_EXE_fsl"))
        .env("FSL_THREADS", "2")
        .args(["run", "--config", &config, "--out", dir.path().join("c").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&threaded), 0, "{}", stderr(&threaded));
    assert_eq!(summary, fs::read(dir.path().join("c/summary.csv")).unwrap());

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_fsl"))
        .env("FSL_THREADS", "lots")
        .args(["run", "--config", &config, "--out", dir.path().join("d").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&bad_threads), 2);
}

#[test]
fn run_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let config = quick_config(dir.path(), Some("d.fsle"), r#", "surprise": true"#);
    assert_eq!(code(&fsl(&["run", "--config", &config, "--out", out])), 2);

    let config = quick_config(dir.path(), Some("missing.fsle"), "");
    assert_eq!(code(&fsl(&["run", "--config", &config, "--out", out])), 3);

    let missing = dir.path().join("nope.json");
    assert_eq!(code(&fsl(&["run", "--config", missing.to_str().unwrap(), "--out", out])), 3);

    // a single malignant patient cannot sit on both sides of an episode
    let spec = SynthSpec {
        num_patients: 4,
        frames_per_patient_per_class: 10,
        dim: 4,
        class_separation: 1.0,
        patient_sigma: 0.1,
        noise_sigma: 1.0,
        malignant_patient_fraction: 0.25,
    };
    save_dataset(&dir.path().join("one.fsle"), &synth_dataset(&spec, 1).unwrap()).unwrap();
    let config = quick_config(dir.path(), Some("one.fsle"), "");
    let o = fsl(&["run", "--config", &config, "--out", out]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let config = quick_config(dir.path(), Some("one.fsle"), r#", "cv": {"k": 5}"#);
    assert_eq!(code(&fsl(&["run", "--config", &config, "--out", out])), 2);
}

#[test]
fn transfer_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("calm.fsle");
    let b = dir.path().join("diverse.fsle");
    assert_eq!(code(&fsl(&synth_args(a.to_str().unwrap(), "6", "0.5"))), 0);
    assert_eq!(code(&fsl(&synth_args(b.to_str().unwrap(), "6", "4"))), 0);
    let config = quick_config(dir.path(), None, r#", "heads": ["protonet", "matchingnet"]"#);
    let runs = dir.path().join("runs");
    let o = fsl(&[
        "transfer",
        "--train-data",
        a.to_str().unwrap(),
        "--eval-data",
        b.to_str().unwrap(),
        "--config",
        &config,
        "--out",
        runs.join("t").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let missing = dir.path().join("missing.fsle");
    let o = fsl(&[
        "transfer",
        "--train-data",
        a.to_str().unwrap(),
        "--eval-data",
        missing.to_str().unwrap(),
        "--config",
        &config,
        "--out",
        runs.join("u").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);

    let table = dir.path().join("table.csv");
    let o = fsl(&[
        "report",
        "--runs",
        runs.to_str().unwrap(),
        "--out",
        table.to_str().unwrap(),
        "--data",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("protonet,calm,diverse,3,"), "{text}");
    let pca = fs::read_to_string(dir.path().join("pca_calm.csv")).unwrap();
    assert!(pca.starts_with("x,y,patient_id,label\n"));
    assert_eq!(pca.lines().count(), 1 + 6 * 40);
}

#[test]
fn report_errors() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    let o = fsl(&["report", "--runs", dir.path().to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no reports found"));
    fs::write(dir.path().join("r.json"), "{ not json").unwrap();
    let o = fsl(&["report", "--runs", dir.path().to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&fsl(&["synth"])), 2);
    assert_eq!(code(&fsl(&["frobnicate"])), 2);
}
