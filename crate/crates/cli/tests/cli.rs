use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imlut::imgio;
use imlut::synth;

fn imlut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imlut"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run imlut")
}

fn ok(args: &[&str]) -> Output {
    let out = imlut(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `<root>/HR` with a few synthetic PNGs.
fn dataset(root: &Path, n: u64, size: usize) -> PathBuf {
    let hr = root.join("HR");
    fs::create_dir_all(&hr).unwrap();
    for i in 0..n {
        imgio::save_image(&synth::scene(size, size, i), hr.join(format!("img{i}.png"))).unwrap();
    }
    root.to_path_buf()
}

/// Tiny trained checkpoint and its bundle.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dataset(&dir.join("train"), 2, 64);
    let run = dir.join("run");
    ok(&[
        "train", "--dataset", s(&data), "--out", s(&run), "--seed", "1", "--iters", "2", "--batch", "1", "--patch", "8",
    ]);
    let bundle = dir.join("model.imlut");
    ok(&["transfer", "--checkpoint", s(&run.join("model.imnet")), "--out", s(&bundle), "--qw", "64", "--qr", "32"]);
    (run.join("model.imnet"), bundle)
}

#[test]
fn sr_output_has_scaled_dims() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    imgio::save_image(&synth::scene(10, 12, 0), &input).unwrap();
    let out = dir.path().join("out.png");
    ok(&["sr", s(&input), "--scale", "2.5x1.5", "--out", s(&out), "--baseline", "bicubic"]);
    let img = imgio::load_image(&out).unwrap();
    assert_eq!(img.dims(), (25, 18));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    imgio::save_image(&synth::scene(8, 8, 0), &input).unwrap();
    let out = dir.path().join("out.png");

    let code = |args: &[&str]| imlut(args).status.code();
    assert_eq!(code(&["sr", s(&input), "--scale", "0.5", "--out", s(&out), "--baseline", "bilinear"]), Some(2));
    assert_eq!(code(&["sr", s(&input), "--scale", "abc", "--out", s(&out), "--baseline", "bilinear"]), Some(2));
    assert_eq!(code(&["sr", s(&input), "--scale", "2", "--out", s(&out), "--baseline", "sinc"]), Some(2));
    let missing = dir.path().join("missing.png");
    assert_eq!(code(&["sr", s(&missing), "--scale", "2", "--out", s(&out), "--baseline", "bilinear"]), Some(3));

    let bad = dir.path().join("bad.imlut");
    fs::write(&bad, b"IMLUT1 not really a bundle").unwrap();
    assert_eq!(code(&["sr", s(&input), "--scale", "2", "--out", s(&out), "--bundle", s(&bad)]), Some(4));
    assert_eq!(code(&["report", "--bundle", s(&bad)]), Some(4));
}

#[test]
fn eval_csv_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("set"), 2, 24);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["eval", "--dataset", s(&data), "--scale", "2,3,2x2.4", "--baseline", "bicubic", "--out", s(out)]);
    }
    let csv = fs::read_to_string(a.join("eval.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("eval.csv")).unwrap());
    assert!(csv.starts_with("model,scale,image,psnr\n"));
    assert_eq!(csv.lines().filter(|l| l.contains(",mean,")).count(), 3);
    assert!(csv.contains(",2x2.4,img0.png,"));
}

#[test]
fn prepare_data_writes_lr_mirrors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("set"), 2, 24);
    ok(&["prepare-data", "--dataset", s(&data), "--scale", "2,3"]);
    let lr = imgio::load_image(data.join("LR_x2").join("img1.png")).unwrap();
    assert_eq!(lr.dims(), (12, 12));
    assert!(data.join("LR_x3").join("img0.png").exists());
}

#[test]
fn train_transfer_report_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, bundle) = trained(dir.path());
    let run = ckpt.parent().unwrap();
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(run.join("train.cfg").exists());

    // resuming appends to the log
    let data = dir.path().join("train");
    ok(&[
        "train", "--dataset", s(&data), "--out", s(run), "--seed", "1", "--iters", "4", "--batch", "1", "--patch", "8",
        "--resume",
    ]);
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 5);

    let report = dir.path().join("report");
    let out = ok(&["report", "--bundle", s(&bundle), "--dims", "60x80", "--scale", "2,3", "--runs", "1", "--out", s(&report)]);
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    assert!(csv.starts_with("scale,out_h,out_w,macs,storage_bytes,wall_ms\n"));
    assert!(csv.contains("\n2,60,80,"));

    let input = dir.path().join("lr.png");
    imgio::save_image(&synth::scene(12, 16, 5), &input).unwrap();
    let maps = dir.path().join("maps");
    ok(&["inspect", s(&input), "--out", s(&maps), "--bundle", s(&bundle)]);
    let color = maps.join("lr_weights_N-red_L-green_C-blue.png");
    assert_eq!(imgio::load_ycbcr(&color).unwrap().y.dims(), (12, 16));
    ok(&["inspect", s(&input), "--out", s(&maps), "--checkpoint", s(&ckpt), "--gray"]);
    for code in ["N", "L", "C"] {
        assert!(maps.join(format!("lr_weights_{code}.png")).exists());
    }

    let sr = dir.path().join("sr.png");
    ok(&["sr", s(&input), "--scale", "2", "--out", s(&sr), "--bundle", s(&bundle)]);
    assert_eq!(imgio::load_image(&sr).unwrap().dims(), (24, 32));

    let tuned = dir.path().join("tuned.imlut");
    ok(&[
        "finetune", "--bundle", s(&bundle), "--dataset", s(&data), "--out", s(&tuned), "--seed", "2", "--iters", "2",
        "--batch", "1", "--patch", "8",
    ]);
    assert_eq!(fs::metadata(&tuned).unwrap().len(), fs::metadata(&bundle).unwrap().len());
}
