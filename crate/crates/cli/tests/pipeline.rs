use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use edmsr::metrics::ReportFormat;
use edmsr_cli::commands::{
    cmd_eval, cmd_infer, cmd_preprocess, cmd_synth, cmd_train, EvalInputs, TrainedModel, CHECKPOINT_FILE, LOSS_FILE,
};
use edmsr_cli::config::{Arch, RunConfig};
use edmsr_cli::synth::Manifest;

/// Small enough that a full train/infer/eval pass takes seconds.
fn tiny(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "seed=5",
        "data.n_subjects=3",
        "data.dims=[16, 16, 16]",
        "train.arch3d.updates_per_epoch=2",
        "train.arch3d.epochs=1",
        "train.arch3d.batch_size=2",
        "train.arch3d.grad_accum_steps=1",
        "train.arch25d.updates_per_epoch=2",
        "train.arch25d.epochs=1",
        "train.arch25d.batch_size=2",
        "train.arch25d.grad_accum_steps=1",
        "sampler.arch3d.steps=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::resolve("", &o).unwrap()
}

fn prepared(cfg: &RunConfig, root: &Path) -> PathBuf {
    cmd_synth(cfg, &root.join("raw")).unwrap();
    let data = root.join("data");
    cmd_preprocess(cfg, &root.join("raw"), &data).unwrap();
    data
}

#[test]
fn synth_writes_subjects_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let m = cmd_synth(&cfg, dir.path()).unwrap();
    assert_eq!(m.train.len() + m.test.len(), 3);
    assert_eq!(m.test.len(), 1);
    for id in m.subjects() {
        assert!(dir.path().join(format!("{id}.nii")).exists());
    }
    assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    // Same seed, same bytes.
    let again = tempfile::tempdir().unwrap();
    cmd_synth(&cfg, again.path()).unwrap();
    for id in m.subjects() {
        let f = format!("{id}.nii");
        assert_eq!(
            fs::read(dir.path().join(&f)).unwrap(),
            fs::read(again.path().join(&f)).unwrap()
        );
    }
}

#[test]
fn preprocess_is_deterministic_and_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let data = prepared(&cfg, dir.path());
    let first = fs::read(data.join("hr/sub-000.nii")).unwrap();
    cmd_preprocess(&cfg, &dir.path().join("raw"), &data).unwrap();
    assert_eq!(first, fs::read(data.join("hr/sub-000.nii")).unwrap());
    let lr = edmsr::nifti::read_volume(data.join("lr/sub-000.nii")).unwrap();
    assert_eq!(lr.dims().as_array(), [16, 8, 8]);
    assert!(lr.voxels().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg1 = tiny(&[]);
    let data = prepared(&cfg1, dir.path());
    let cfg2 = tiny(&["train.arch25d.epochs=2"]);

    let full = dir.path().join("full");
    cmd_train(&cfg2, Arch::SliceWise, &data, &full, None).unwrap();

    let part = dir.path().join("part");
    cmd_train(&cfg1, Arch::SliceWise, &data, &part, None).unwrap();
    let (model, log) = cmd_train(&cfg2, Arch::SliceWise, &data, &part, Some(&part.join(CHECKPOINT_FILE))).unwrap();
    assert_eq!(model.state.t, 4);
    assert_eq!(log.records.first().unwrap().update, 2);
    assert_eq!(
        fs::read(full.join(LOSS_FILE)).unwrap(),
        fs::read(part.join(LOSS_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(full.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(part.join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn wrong_arch_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let data = prepared(&cfg, dir.path());
    let out = dir.path().join("m");
    cmd_train(&cfg, Arch::SliceWise, &data, &out, None).unwrap();
    let ckpt = out.join(CHECKPOINT_FILE);
    assert!(matches!(
        TrainedModel::load(&ckpt, Arch::Volumetric),
        Err(edmsr::Error::Config(_))
    ));
    let bin = env!("CARGO_BIN_EXE_edmsr");
    let status = Command::new(bin)
        .args(["infer", "--arch", "3d", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(data.join("lr/sub-000.nii"))
        .arg("--out")
        .arg(dir.path().join("pred.nii"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("error[config]"));
}

#[test]
fn eval_writes_reports_heatmaps_and_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let data = prepared(&cfg, dir.path());
    let truth = data.join("hr/sub-000.nii");
    let lr = data.join("lr/sub-000.nii");
    let preds = vec![("copy".to_string(), truth.clone())];
    let inputs = EvalInputs {
        subject: "sub-000",
        truth: &truth,
        lr: Some(&lr),
        predictions: &preds,
    };
    let out = dir.path().join("eval");
    let report = cmd_eval(&cfg, &inputs, &out).unwrap();
    assert_eq!(report.method("copy").unwrap().psnr_db, f64::INFINITY);
    let bic = report.method("bicubic").unwrap();
    assert!(bic.psnr_db.is_finite() && bic.ssim < 1.0);
    for f in [
        "report.csv",
        "report.json",
        "slice_psnr_sub-000.csv",
        "heatmap_sub-000_copy.pgm",
        "heatmap_sub-000_bicubic.pgm",
        "heatmap_sub-000_trilinear.pgm",
        "config.eval.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let back = edmsr::metrics::read_report(&out.join("report.csv"), ReportFormat::Csv, cfg.eval.aggregation).unwrap();
    assert_eq!(back.rows.len(), report.rows.len());
    let pgm = fs::read_to_string(out.join("heatmap_sub-000_copy.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n16 16\n255\n"));
}

#[test]
fn infer_3d_writes_hr_volume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let data = prepared(&cfg, dir.path());
    let out = dir.path().join("m3");
    cmd_train(&cfg, Arch::Volumetric, &data, &out, None).unwrap();
    let pred = dir.path().join("pred/p.nii.gz");
    let v = cmd_infer(
        &cfg,
        Arch::Volumetric,
        &out.join(CHECKPOINT_FILE),
        &data.join("lr/sub-000.nii"),
        &pred,
    )
    .unwrap();
    assert_eq!(v.dims().as_array(), [16, 16, 16]);
    assert!(v.voxels().iter().all(|x| (-1.0..=1.0).contains(x)));
    assert!(pred.exists());
}

#[test]
fn cli_reports_bad_input_with_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("x.nii");
    fs::write(&bogus, b"not a volume").unwrap();
    let bin = env!("CARGO_BIN_EXE_edmsr");
    let out = Command::new(bin)
        .args(["eval", "--truth"])
        .arg(&bogus)
        .arg("--pred")
        .arg(format!("m={}", bogus.display()))
        .arg("--out")
        .arg(dir.path().join("e"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let out = Command::new(bin)
        .args(["synth", "--out"])
        .arg(dir.path().join("s"))
        .args(["--set", "train.arch3d.nope=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
