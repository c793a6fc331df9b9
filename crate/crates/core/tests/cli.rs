use std::path::{Path, PathBuf};
use std::process::Command;

use densecam::cli::{command, resolve_matches, run, RunConfig, EXIT_OK, EXIT_USAGE};
use densecam::data::Pnm;
use proptest::prelude::*;

/// Settings for a fast pipeline: 16×16 images and a two-block network.
const TINY: &[&str] = &[
    "--num-images",
    "60",
    "--image-size",
    "16",
    "--blob-radius-min",
    "2",
    "--blob-radius-max",
    "4",
    "--block-sizes",
    "1,1",
    "--initial-channels",
    "4",
    "--growth-rate",
    "4",
    "--bootstrap-samples",
    "50",
];

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn densecam(out: &Path, cmd: &str, extra: &[&str]) -> Outcome {
    let mut args = vec![
        "densecam".to_string(),
        cmd.to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(TINY.iter().map(|s| s.to_string()));
    args.extend(extra.iter().map(|s| s.to_string()));
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = run(args, &mut o, &mut e);
    Outcome {
        code,
        stdout: String::from_utf8(o).unwrap(),
        stderr: String::from_utf8(e).unwrap(),
    }
}

fn ok(out: &Path, cmd: &str, extra: &[&str]) -> String {
    let r = densecam(out, cmd, extra);
    assert_eq!(r.code, EXIT_OK, "{cmd} failed: {}", r.stderr);
    r.stdout
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(d.path(), "synth", &["--seed", "7", "--num-images", "100"]);
    }
    assert_eq!(tree(a.path()), tree(b.path()));
    let labels = std::fs::read_to_string(a.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 101);
}

#[test]
fn validation_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let r = densecam(d.path(), "synth", &["--num-images", "0"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("num_images"));
    let r = densecam(d.path(), "synth", &["--seed", "minus-one"]);
    assert_eq!(r.code, EXIT_USAGE);
    let (mut o, mut e) = (Vec::new(), Vec::new());
    assert_eq!(run(["densecam", "frobnicate"], &mut o, &mut e), EXIT_USAGE);
    assert_eq!(run(["densecam", "--help"], &mut o, &mut e), EXIT_OK);
}

#[test]
fn train_needs_splits_first() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), "synth", &[]);
    let r = densecam(d.path(), "train", &[]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("densecam split"), "{}", r.stderr);
}

#[test]
fn pneumonia_without_positives_is_degenerate() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), "synth", &[]);
    let labels = d.path().join("labels.csv");
    let text = std::fs::read_to_string(&labels)
        .unwrap()
        .replace(",Pneumonia,", ",No Finding,");
    std::fs::write(&labels, text).unwrap();
    ok(d.path(), "split", &[]);
    let r = densecam(d.path(), "train", &["--max-epochs", "1"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("degenerate"), "{}", r.stderr);
}

#[test]
fn pipeline_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(d.path(), "synth", &["--seed", "3"]);
        ok(d.path(), "split", &["--seed", "3"]);
        ok(d.path(), "train", &["--seed", "3", "--max-epochs", "2"]);
        ok(d.path(), "eval", &["--seed", "3"]);
        ok(
            d.path(),
            "cam",
            &[
                "--seed",
                "3",
                "--cam-images",
                "synth_00000.pgm,synth_00001.pgm",
            ],
        );
    }
    assert_eq!(tree(a.path()), tree(b.path()));
    let history = std::fs::read_to_string(a.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,train_loss,val_loss,lr,checkpoint\n"));
    let best: usize = std::fs::read_to_string(a.path().join("best_epoch.txt"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((1..=2).contains(&best));
    for f in [
        "model.dcam",
        "report.csv",
        "auroc.csv",
        "predictions.csv",
        "cam/synth_00000.pgm",
        "cam/synth_00001.ppm",
    ] {
        assert!(a.path().join(f).exists(), "{f}");
    }
}

#[test]
fn cam_rejects_unknown_classes_and_renders_plain_overlay() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), "synth", &[]);
    ok(d.path(), "split", &[]);
    ok(d.path(), "train", &["--max-epochs", "1"]);
    let r = densecam(d.path(), "cam", &["--cam-class", "Fracture"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("Pleural Thickening"), "{}", r.stderr);
    let r = densecam(d.path(), "cam", &["--cam-class", "Mass"]);
    assert_eq!(r.code, EXIT_USAGE);

    ok(
        d.path(),
        "cam",
        &["--cam-alpha", "0", "--cam-images", "synth_00004.pgm"],
    );
    let input = Pnm::load(d.path().join("images/synth_00004.pgm")).unwrap();
    let overlay = Pnm::load(d.path().join("cam/synth_00004.ppm")).unwrap();
    let replicated: Vec<u8> = input.pixels.iter().flat_map(|&g| [g, g, g]).collect();
    assert_eq!(overlay.pixels, replicated);

    let stdout = ok(d.path(), "cam", &[]);
    let rate: f64 = stdout
        .lines()
        .find_map(|l| l.split("hit rate ").nth(1))
        .expect("pointing game summary")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn rater_eval_reports_and_rejects_malformed_files() {
    let d = tempfile::tempdir().unwrap();
    let raters = d.path().join("raters.csv");
    std::fs::write(
        &raters,
        "Image Index,r1,r2,r3,r4,model\na,1,1,1,1,1\nb,0,0,0,0,0\nc,1,1,1,1,1\n",
    )
    .unwrap();
    let path = raters.display().to_string();
    let stdout = ok(d.path(), "eval", &["--raters", &path]);
    assert!(stdout.contains("Radiologist Avg.,1.000,1.000,1.000,"));
    assert!(stdout.contains("Difference,0.000,0.000,0.000,no"));
    let first = std::fs::read(d.path().join("report.csv")).unwrap();
    ok(d.path(), "eval", &["--raters", &path]);
    assert_eq!(std::fs::read(d.path().join("report.csv")).unwrap(), first);

    std::fs::write(&raters, "Image Index,r1,r2\na,1,0\nb,1,x\n").unwrap();
    let r = densecam(d.path(), "eval", &["--raters", &path]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains(":3:"), "{}", r.stderr);
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_densecam");
    let d = tempfile::tempdir().unwrap();
    let status = |args: &[&str]| Command::new(exe).args(args).status().unwrap().code();
    let out = d.path().to_str().unwrap();
    assert_eq!(
        status(&["synth", "--out", out, "--num-images", "0"]),
        Some(2)
    );
    assert_eq!(
        status(&["synth", "--out", out, "--num-images", "5"]),
        Some(0)
    );
    // A regular file where the checkpoint directory should be.
    let blocker = d.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let bad_out = blocker.join("sub");
    assert_eq!(
        status(&[
            "synth",
            "--out",
            bad_out.to_str().unwrap(),
            "--num-images",
            "5"
        ]),
        Some(1)
    );
}

/// `(key, value A, value B)`; both values valid for a default run.
const SAMPLES: &[(&str, &str, &str)] = &[
    ("seed", "11", "12"),
    ("max_epochs", "3", "4"),
    ("learning_rate", "0.01", "0.002"),
    ("batch_size", "8", "4"),
    ("num_images", "50", "70"),
    ("noise_sigma", "0.1", "0.2"),
    ("plateau_delta", "0.001", "0.01"),
    ("min_lr", "0.00001", "0.0001"),
    ("flip_probability", "0", "1"),
    ("threshold", "0.3", "optimal"),
    ("bootstrap_samples", "100", "200"),
    ("cam_alpha", "0.25", "0.75"),
    ("growth_rate", "4", "6"),
    ("test_fraction", "0.3", "0.25"),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flag_beats_file_beats_default(choices in prop::collection::vec((any::<bool>(), any::<bool>()), SAMPLES.len())) {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        let mut text = String::from("# generated\n");
        let mut args = vec!["densecam".to_string(), "train".into(), "--config".into(), file.display().to_string()];
        for ((key, a, b), (in_file, as_flag)) in SAMPLES.iter().zip(&choices) {
            if *in_file {
                text.push_str(&format!("{key} = {a}\n"));
            }
            if *as_flag {
                args.push(format!("--{}", key.replace('_', "-")));
                args.push(b.to_string());
            }
        }
        std::fs::write(&file, text).unwrap();
        let matches = command().try_get_matches_from(args).unwrap();
        let cfg = resolve_matches(matches.subcommand().unwrap().1).unwrap();
        let defaults = RunConfig::default();
        for ((key, a, b), (in_file, as_flag)) in SAMPLES.iter().zip(&choices) {
            let expected = if *as_flag {
                set_one(key, b)
            } else if *in_file {
                set_one(key, a)
            } else {
                defaults.get(key).unwrap()
            };
            prop_assert_eq!(cfg.get(key).unwrap(), expected, "{}", key);
        }
    }
}

fn set_one(key: &str, value: &str) -> String {
    let mut c = RunConfig::default();
    c.set(key, value).unwrap();
    c.get(key).unwrap()
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.conf");
    std::fs::write(&file, "seed = 1\nlearning_rat = 0.1\n").unwrap();
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = run(
        ["densecam", "synth", "--config", file.to_str().unwrap()],
        &mut o,
        &mut e,
    );
    assert_eq!(code, EXIT_USAGE);
    let msg = String::from_utf8(e).unwrap();
    assert!(msg.contains(":2:") && msg.contains("learning_rat"), "{msg}");
}
