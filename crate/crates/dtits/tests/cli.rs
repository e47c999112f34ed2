use std::path::Path;

use dtits::cli::run;
use dtits::io;

fn dtits(args: &[&str]) -> i32 {
    run(std::iter::once("dtits").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_bad_usage_exit_codes() {
    assert_eq!(dtits(&["--help"]), 0);
    assert_eq!(dtits(&["--version"]), 0);
    assert_eq!(dtits(&["no-such-command"]), 1);
    assert_eq!(dtits(&["train", "--bogus"]), 1);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.txt");
    assert_eq!(dtits(&["preprocess", "--input", "/nonexistent/x.txt", "--output", p(&out)]), 2);
}

#[test]
fn invalid_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    // NaN at an observed stamp
    std::fs::write(&bad, "T=2,C=1,N=1,labeled=0\nNaN,1\n1,1\n").unwrap();
    let out = dir.path().join("out.txt");
    assert_eq!(dtits(&["preprocess", "--input", p(&bad), "--output", p(&out)]), 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "clases=3\n").unwrap();
    assert_eq!(dtits(&["synth", "--out-dir", p(dir.path()), "--config", p(&cfg)]), 1);
}

#[test]
fn warp_demo_matches_landmark_shifts() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dtits(&["warp-demo", "--out-dir", p(dir.path())]), 0);
    let lm = std::fs::read_to_string(dir.path().join("landmarks.csv")).unwrap();
    let rows: Vec<Vec<f64>> = lm.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert!((r[3] - r[1] - r[2]).abs() < 1e-9);
    }
    for f in ["warp.csv", "curves.csv", "curves.svg", "warp.svg", "config.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn grad_check_passes() {
    assert_eq!(dtits(&["grad-check", "--configs", "3", "--max-len", "16"]), 0);
}

#[test]
fn aggregate_commands() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.csv");
    let inst = dir.path().join("inst.csv");
    std::fs::write(&labels, "H=2,W=3\n1,1,2\n3,-1,2\n").unwrap();
    std::fs::write(&inst, "H=2,W=3\n1,1,1\n1,1,0\n").unwrap();
    let out = dir.path().join("out.csv");
    assert_eq!(dtits(&["aggregate", "--method", "instances", "--labels", p(&labels), "--instances", p(&inst), "--output", p(&out)]), 0);
    let r = io::read_label_raster(&out).unwrap();
    assert_eq!(r.data(), &[1, 1, 1, 1, -1, 2]);
    assert_eq!(dtits(&["aggregate", "--method", "window", "--window", "4", "--labels", p(&labels), "--output", p(&out)]), 1);
    assert_eq!(dtits(&["aggregate", "--method", "intersect", "--frames", p(&inst), "--output", p(&out)]), 0);
    assert_eq!(dtits(&["aggregate", "--method", "instances", "--output", p(&out)]), 1);
}

#[test]
fn synth_train_predict_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = dtits(&[
        "synth", "--out-dir", p(d), "--classes", "3", "--n-train", "60", "--n-test", "30", "--len", "30", "--channels", "2",
        "--missing-rate", "0.2", "--seed", "3",
    ]);
    assert_eq!(code, 0);
    let (train, test) = (d.join("train.txt"), d.join("test.txt"));
    assert!(d.join("templates.csv").exists() && d.join("config.txt").exists());

    let prep = d.join("prep.txt");
    assert_eq!(dtits(&["preprocess", "--input", p(&train), "--output", p(&prep), "--gap-fill", "gaussian", "--sigma", "2"]), 0);
    assert!(d.join("prep.config.txt").exists());

    let sup = d.join("sup");
    let common = ["--filters", "4,4,4", "--batch-size", "16", "--validation-interval", "3", "--patience", "1", "--max-steps", "30", "--lr", "1e-3"];
    let mut args = vec!["train", "--mode", "sup", "--train", p(&train), "--out-dir", p(&sup)];
    args.extend(common);
    assert_eq!(dtits(&args), 0);
    for f in ["model.ckpt", "log.csv", "config.txt", "prototypes.csv", "prototypes.svg"] {
        assert!(sup.join(f).exists(), "{f}");
    }
    let pred = d.join("pred.csv");
    let ck = sup.join("model.ckpt");
    assert_eq!(dtits(&["predict", "--checkpoint", p(&ck), "--input", p(&test), "--output", p(&pred)]), 0);
    assert_eq!(io::read_predictions(&pred).unwrap().len(), 30);
    assert_eq!(dtits(&["eval", "--predictions", p(&pred), "--truth", p(&test), "--confusion", p(&d.join("cm.csv"))]), 0);

    let unsup = d.join("unsup");
    let mut args = vec!["train", "--mode", "unsup", "--k", "4", "--train", p(&train), "--out-dir", p(&unsup), "--init", "kmeans"];
    args.extend(common);
    assert_eq!(dtits(&args), 0);
    let uck = unsup.join("model.ckpt");
    let clusters = d.join("clusters.csv");
    assert_eq!(dtits(&["cluster", "--checkpoint", p(&uck), "--input", p(&test), "--output", p(&clusters)]), 0);
    assert_eq!(std::fs::read_to_string(&clusters).unwrap().lines().count(), 31);
    assert_eq!(dtits(&["predict", "--checkpoint", p(&uck), "--input", p(&test), "--output", p(&pred)]), 0);
    let limited = ["predict", "--checkpoint", p(&uck), "--input", p(&test), "--output", p(&pred), "--train", p(&train), "--limited", "1"];
    assert_eq!(dtits(&limited), 0);

    for method in ["ncc", "1nn", "1nn-dtw"] {
        assert_eq!(dtits(&["baseline", "--method", method, "--train", p(&train), "--test", p(&test), "--output", p(&pred), "--band", "3"]), 0);
    }

    // shape mismatch between checkpoint and data
    let other = d.join("other");
    assert_eq!(dtits(&["synth", "--out-dir", p(&other), "--n-train", "8", "--n-test", "4", "--len", "20", "--channels", "2"]), 0);
    assert_eq!(dtits(&["predict", "--checkpoint", p(&ck), "--input", p(&other.join("test.txt")), "--output", p(&pred)]), 2);
}
