use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use voxcam::io::write_nifti;
use voxcam::stats::REPORT_HEADER;
use voxcam::Volume;

fn voxcam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxcam"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_vol(dir: &Path, name: &str, data: Vec<f32>) {
    let v = Volume::from_data([1, 1, data.len()], data).unwrap();
    write_nifti(&v, dir.join(name)).unwrap();
}

#[test]
fn heatscore_prints_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    write_vol(dir.path(), "h.nii", vec![1.0, 1.0, 0.0, 0.5, 0.0, 0.5]);
    write_vol(dir.path(), "s.nii", vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let o = voxcam(&["heatscore", "--heatmap", "h.nii", "--mask", "s.nii"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "3.000000\n");
}

#[test]
fn constant_heatmap_exits_with_degeneracy_code() {
    let dir = tempfile::tempdir().unwrap();
    write_vol(dir.path(), "h.nii", vec![0.4; 6]);
    write_vol(dir.path(), "s.nii", vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let o = voxcam(&["heatscore", "--heatmap", "h.nii", "--mask", "s.nii"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(o.stdout.is_empty());
}

#[test]
fn non_binary_mask_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_vol(dir.path(), "h.nii", vec![1.0, 1.0, 0.0, 0.5, 0.0, 0.5]);
    write_vol(dir.path(), "s.nii", vec![0.5; 6]);
    let o = voxcam(&["heatscore", "--heatmap", "h.nii", "--mask", "s.nii"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn ttest_prints_four_pair_example() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("accA.csv"), "1.1\n2.0\n3.2\n4.1\n").unwrap();
    fs::write(dir.path().join("accB.csv"), "1.0\n1.8\n3.0\n4.0\n").unwrap();
    let o = voxcam(&["ttest", "--a", "accA.csv", "--b", "accB.csv"], dir.path());
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("t,df,p"));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    let t: f64 = fields[0].parse().unwrap();
    let p: f64 = fields[2].parse().unwrap();
    assert!((t - 5.196).abs() < 1e-3, "t = {t}");
    assert_eq!(fields[1], "3");
    assert!((p - 0.0138).abs() < 1e-4, "p = {p}");
}

#[test]
fn ttest_selects_named_column() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "fold,accuracy\n0,1.1\n1,2.0\n2,3.2\n3,4.1\n").unwrap();
    fs::write(dir.path().join("b.csv"), "fold,accuracy\n0,1.0\n1,1.8\n2,3.0\n3,4.0\n").unwrap();
    let ambiguous = voxcam(&["ttest", "--a", "a.csv", "--b", "b.csv"], dir.path());
    assert_eq!(code(&ambiguous), 1);
    let o = voxcam(&["ttest", "--a", "a.csv", "--b", "b.csv", "--column", "accuracy"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("5.196"));
}

#[test]
fn identical_columns_are_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "1\n2\n3\n").unwrap();
    let o = voxcam(&["ttest", "--a", "a.csv", "--b", "a.csv"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&voxcam(&["no-such-command"], dir.path())), 1);
    assert_eq!(code(&voxcam(&["phantom-gen", "--out", "p", "--tier", "hard"], dir.path())), 1);
    fs::write(dir.path().join("run.cfg"), "manifest = m.csv\nlearning_rate = 0.1\n").unwrap();
    let o = voxcam(&["train", "--config", "run.cfg", "--out", "r"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert_eq!(code(&voxcam(&["--help"], dir.path())), 0);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = voxcam(&["train", "--manifest", "absent.csv", "--out", "r", "--fold", "0"], dir.path());
    assert_eq!(code(&o), 2);
    let o = voxcam(&["inspect-ckpt", "--checkpoint", "absent.hsck"], dir.path());
    assert_eq!(code(&o), 2);
}

fn phantoms(dir: &Path) {
    let o = voxcam(
        &["phantom-gen", "--out", "ph", "--n-per-class", "6", "--extent", "32", "--seed", "3"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "ph/manifest.csv");
}

const SMALL: [&str; 10] = [
    "--depth",
    "18",
    "--base-width",
    "4",
    "--max-epochs",
    "2",
    "--batch-size",
    "4",
    "--folds",
    "3",
];

#[test]
fn pipeline_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantoms(d);

    let mut split = vec!["split", "--manifest", "ph/manifest.csv", "--out", "plan"];
    split.extend(SMALL);
    assert_eq!(code(&voxcam(&split, d)), 0);
    let plan = fs::read_to_string(d.join("plan/plan.csv")).unwrap();
    assert!(d.join("plan/config.txt").exists());

    let mut train = vec!["train", "--manifest", "ph/manifest.csv", "--plan", "plan/plan.csv", "--out", "runs"];
    train.extend(SMALL);
    train.extend(["--fold", "all", "--tl", "none", "--seed", "7"]);
    let o = voxcam(&train, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..3 {
        let f = d.join(format!("runs/fold{k}"));
        assert!(f.join("checkpoint.hsck").exists());
        let epochs = fs::read_to_string(f.join("epochs.csv")).unwrap();
        assert_eq!(epochs.lines().count(), 3, "header plus two epochs");
    }
    assert_eq!(fs::read_to_string(d.join("runs/plan.csv")).unwrap(), plan);
    let resolved = fs::read_to_string(d.join("runs/config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed=7"));
    assert!(resolved.lines().any(|l| l == "fold=all"));

    let mut eval = vec!["evaluate", "--manifest", "ph/manifest.csv", "--plan", "plan/plan.csv", "--out", "ev"];
    eval.extend(SMALL);
    eval.extend(["--fold", "all", "--checkpoint", "runs", "--cam-layer", "stage2"]);
    let o = voxcam(&eval, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = stdout(&o);
    assert_eq!(metrics.lines().count(), 4);
    for f in ["predictions.csv", "heat_scores.csv", "heat_score_failures.csv", "metrics.csv", "config.txt"] {
        assert!(d.join("ev").join(f).exists(), "{f}");
    }
    let preds = fs::read_to_string(d.join("ev/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 12, "every scan is tested once");

    let o = voxcam(&["report", "--runs", "ev", "--out", "report.csv"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert_eq!(table.lines().next(), Some(REPORT_HEADER));
    assert_eq!(table.lines().count(), 2);
    assert_eq!(table.lines().nth(1).unwrap().split(',').count(), REPORT_HEADER.split(',').count());
    assert_eq!(fs::read_to_string(d.join("report.csv")).unwrap(), table);

    let o = voxcam(&["inspect-ckpt", "--checkpoint", "runs/fold0/checkpoint.hsck"], d);
    let listing = stdout(&o);
    assert!(listing.contains("depth=18\n"));
    assert!(listing.contains("base_width=4\n"));
    assert!(listing.contains("stem.conv.weight,4x1x7x7x7,1372\n"));
}

#[test]
fn train_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantoms(d);
    let run = |out: &str| {
        let mut args = vec!["train", "--manifest", "ph/manifest.csv", "--out", out, "--fold", "1", "--seed", "5"];
        args.extend(SMALL);
        let o = voxcam(&args, d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a");
    run("b");
    run("a");
    for f in ["checkpoint.hsck", "epochs.csv", "batches.csv", "plan.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantoms(d);
    fs::write(
        d.join("run.cfg"),
        "# small run\nmanifest = ph/manifest.csv\nfolds = 3\nfold = 0\ndepth = 18\nbase_width = 4\nmax_epochs = 3\nbatch_size = 4\n",
    )
    .unwrap();
    let o = voxcam(&["train", "--config", "run.cfg", "--out", "r", "--max-epochs", "1"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(d.join("r/epochs.csv")).unwrap().lines().count(), 2);
    let resolved = fs::read_to_string(d.join("r/config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "max_epochs=1"));
    assert!(resolved.lines().any(|l| l == "manifest=ph/manifest.csv"));
}

#[test]
fn gradcam_exports_volume_and_slice() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantoms(d);
    let mut train = vec!["train", "--manifest", "ph/manifest.csv", "--out", "r", "--fold", "0"];
    train.extend(SMALL);
    assert_eq!(code(&voxcam(&train, d)), 0);
    let o = voxcam(
        &[
            "gradcam",
            "--checkpoint",
            "r/checkpoint.hsck",
            "--image",
            "ph/pos000.nii",
            "--mask",
            "ph/pos000_mask.nii",
            "--layer",
            "stage2",
            "--out",
            "cam",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hs_line = stdout(&o).lines().find(|l| l.starts_with("heat_score=")).map(str::to_owned).unwrap();
    let pgm = fs::read(d.join("cam/heatmap.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    let h = voxcam::io::read_nifti(d.join("cam/heatmap.nii")).unwrap();
    assert_eq!(h.extents(), [32, 32, 32]);
    assert!(h.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let o = voxcam(&["heatscore", "--heatmap", "cam/heatmap.nii", "--mask", "ph/pos000_mask.nii"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(format!("heat_score={}", stdout(&o).trim()), hs_line);

    let bad = voxcam(&["gradcam", "--checkpoint", "r/checkpoint.hsck", "--image", "ph/pos000.nii", "--layer", "stage9", "--out", "x"], d);
    assert_eq!(code(&bad), 1);
}
