use std::path::Path;
use std::process::{Command, Output};

use bsrn::checkpoint::Checkpoint;
use bsrn::data::{encode_ppm, ImageRGB8};

fn bsrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsrn")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_image(path: &Path, size: usize, seed: usize) {
    let pixels = (0..size * size * 3)
        .map(|i| {
            let (y, x) = (i / 3 / size, i / 3 % size);
            if (y / 5 + x / 7 + seed).is_multiple_of(3) { 230 } else { (i * 37 % 97) as u8 }
        })
        .collect();
    let img = ImageRGB8::new(size, size, pixels).unwrap();
    std::fs::write(path, encode_ppm(&img)).unwrap();
}

fn data_dir(root: &Path) -> String {
    let dir = root.join("data");
    std::fs::create_dir_all(&dir).unwrap();
    for i in 0..2 {
        write_image(&dir.join(format!("img{i}.ppm")), 40, i);
    }
    dir.to_str().unwrap().to_string()
}

/// A quickly trainable configuration.
fn train_args<'a>(data: &'a str, out: &'a str, steps: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--c", "4", "--s", "2", "--recursions", "4", "--scale", "2", "--patch", "8", "--batch", "2",
        "--steps", steps, "--data-dir", data, "--out", out,
    ]
}

fn assert_usage_error(out: &Output, needle: &str) {
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(out));
    let err = stderr(out);
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err}");
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains(needle), "{err} lacks {needle}");
}

#[test]
fn zero_steps_writes_an_initialized_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir(tmp.path());
    let ck = tmp.path().join("m.bsrn");
    let out = bsrn(&train_args(&data, ck.to_str().unwrap(), "0"));
    assert!(out.status.success(), "{}", stderr(&out));
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.global_step(), 0);
    assert_eq!(loaded.config().recursions, 4);
    // header only
    let log = std::fs::read_to_string(tmp.path().join("m.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("step,lr,loss,init.weight_gradnorm"));
}

#[test]
fn train_upscale_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir(tmp.path());
    let ck = tmp.path().join("m.bsrn");
    let ck_s = ck.to_str().unwrap();
    let out = bsrn(&train_args(&data, ck_s, "3"));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(Checkpoint::load(&ck).unwrap().global_step(), 3);
    assert_eq!(std::fs::read_to_string(tmp.path().join("m.csv")).unwrap().lines().count(), 4);

    let input = tmp.path().join("data/img0.ppm");
    let sr = tmp.path().join("sr.ppm");
    let dump = tmp.path().join("dump");
    let out = bsrn(&[
        "upscale", "--checkpoint", ck_s, "--input", input.to_str().unwrap(), "--output",
        sr.to_str().unwrap(), "--emit-intermediate", dump.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("head evaluations: 4"), "{text}");
    assert!(text.contains("intermediate outputs: 4"), "{text}");
    let img = bsrn::data::load_image(&sr).unwrap();
    assert_eq!((img.width(), img.height()), (80, 80));
    for t in 1..=4 {
        for prefix in ["y", "h", "s"] {
            let ext = if prefix == "y" { "ppm" } else { "pgm" };
            assert!(dump.join(format!("{prefix}_t{t:03}.{ext}")).exists());
        }
    }

    let out = bsrn(&[
        "upscale", "--checkpoint", ck_s, "--input", input.to_str().unwrap(), "--output",
        sr.to_str().unwrap(), "--freq-control", "2",
    ]);
    assert!(stdout(&out).contains("head evaluations: 2"));

    let csv = tmp.path().join("scores.csv");
    let out = bsrn(&[
        "eval", "--checkpoint", ck_s, "--data-dir", &data, "--scale", "2", "--csv",
        csv.to_str().unwrap(), "--timing-runs", "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<String> = std::fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("img0.ppm,"));
    assert!(rows[3].starts_with("mean,"));
}

#[test]
fn identity_eval_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir(tmp.path());
    let csv = tmp.path().join("id.csv");
    let out = bsrn(&["eval", "--data-dir", &data, "--scale", "1", "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("img0.ppm,inf,1,"), "{text}");
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir(tmp.path());
    let ck = tmp.path().join("m.bsrn");
    let ck_s = ck.to_str().unwrap();

    let mut args = train_args(&data, ck_s, "1");
    args.extend(["--freq-control", "3"]);
    assert_usage_error(&bsrn(&args), "divide");

    let mut args = train_args(&data, ck_s, "1");
    args[10] = "64";
    assert_usage_error(&bsrn(&args), "patch");

    let missing = tmp.path().join("nowhere");
    assert_usage_error(&bsrn(&train_args(missing.to_str().unwrap(), ck_s, "1")), "nowhere");

    assert_usage_error(&bsrn(&["train", "--scale", "2", "--multi-scale"]), "--multi-scale");
    assert_usage_error(&bsrn(&["params", "--scales", "5"]), "5");
    assert_usage_error(&bsrn(&["upscale", "--checkpoint", ck_s, "--input", "a.png", "--output", "b.png"]), "m.bsrn");
    assert_usage_error(&bsrn(&["eval", "--data-dir", &data, "--scale", "2"]), "--checkpoint");
    assert_usage_error(&bsrn(&["gradcheck", "--inject-fault", "nope"]), "nope");
}

#[test]
fn resume_rejects_a_different_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir(tmp.path());
    let ck = tmp.path().join("m.bsrn");
    let ck_s = ck.to_str().unwrap();
    assert!(bsrn(&train_args(&data, ck_s, "1")).status.success());
    let mut args = train_args(&data, ck_s, "2");
    args[2] = "6";
    args.push("--resume");
    assert_usage_error(&bsrn(&args), "");
}

#[test]
fn injected_fault_fails_the_gradcheck() {
    let out = bsrn(&["gradcheck", "--inject-fault", "rrb.1"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("gradcheck: FAIL"));
    let failing: Vec<&str> = text.lines().filter(|l| l.ends_with("FAIL") && !l.starts_with("gradcheck")).collect();
    assert_eq!(failing.len(), 1, "{text}");
    assert!(failing[0].contains("rrb.1"));
}
