use std::path::Path;
use std::process::{Command, Output};

use cinn::cli::io::{read_tensor, write_tensor};
use cinn::Tensor;

fn cinn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cinn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const MIXTURE_RUN: &str = "
[task]
kind = conditional-mixture-8
samples = 200

[model]
blocks = 2
hidden = 8

[train]
steps = 5
batch_size = 32
noise = false
";

#[test]
fn check_on_fresh_models_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cinn(&["check"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS") && !out.contains("FAIL"), "{out}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = cinn(&["check", "--bogus"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    write(dir.path(), "bad.cfg", "[task]\nkind = digits\n[train]\nlearning_rate = 0.1\n");
    let o = cinn(&["train", "--config", "bad.cfg", "--out", "m.ckpt"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn missing_files_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cinn(&["train", "--config", "absent.cfg", "--out", "m.ckpt"], dir.path());
    assert_eq!(code(&o), 2);
    std::fs::write(dir.path().join("junk.ckpt"), b"CINN\x01\x00").unwrap();
    let o = cinn(&["check", "--ckpt", "junk.ckpt"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_task_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.json", r#"{"task":{"kind":"toy-colorization"},"seed":4,"samples":5}"#);
    for out in ["a", "b"] {
        let o = cinn(&["gen-task", "--spec", "spec.json", "--out-dir", out], dir.path());
        assert_eq!(code(&o), 0);
    }
    for f in ["x.tnsr", "y.tnsr"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(read_tensor(&dir.path().join("a/x.tnsr")).unwrap().shape(), &[5, 2, 16, 16]);
}

#[test]
fn train_sample_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(p, "run.cfg", MIXTURE_RUN);
    let o = cinn(&["train", "--config", "run.cfg", "--out", "m.ckpt", "--metrics", "m.csv"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(p.join("m.csv")).unwrap().lines().count(), 6);

    let o = cinn(
        &["sample", "--ckpt", "m.ckpt", "--condition", "class:1", "--n", "4", "--temperature", "0", "--out-dir", "s"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_tensor(&p.join("s/samples_0.tnsr")).unwrap();
    assert_eq!(s.shape(), &[4, 2]);
    for i in 1..4 {
        assert_eq!(s.sample(i), s.sample(0));
    }

    let o = cinn(&["eval", "--ckpt", "m.ckpt", "--metric", "modes", "--modes", "8", "--n", "200"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().all(|l| l.ends_with("sum 1.000")), "{out}");

    let o = cinn(&["eval", "--ckpt", "m.ckpt", "--metric", "nll", "--task", "conditional-mixture-8"], p);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("nll "));
}

#[test]
fn best_of_n_and_latent_commands_on_colorization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(
        p,
        "run.cfg",
        "[task]\nkind = toy-colorization\nsamples = 16\n[model]\nconv_blocks = 1,1,1\ndense_blocks = 1\n\
         conv_hidden = 4\ndense_hidden = 16\n[train]\nsteps = 2\nbatch_size = 8\n",
    );
    assert_eq!(code(&cinn(&["train", "--config", "run.cfg", "--out", "m.ckpt"], p)), 0);
    let o = cinn(
        &["eval", "--ckpt", "m.ckpt", "--metric", "bestofN", "--n", "8", "--task", "toy-colorization", "--samples", "3"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("best-of-8 mse"));

    write(p, "spec.json", r#"{"task":{"kind":"toy-colorization"},"seed":9,"samples":2}"#);
    assert_eq!(code(&cinn(&["gen-task", "--spec", "spec.json", "--out-dir", "d"], p)), 0);
    let o = cinn(&["encode", "--ckpt", "m.ckpt", "--x", "d/x.tnsr", "--y", "d/y.tnsr", "--out", "z.tnsr"], p);
    assert_eq!(code(&o), 0);
    let cond = read_tensor(&p.join("d/y.tnsr")).unwrap();
    write_tensor(&p.join("y0.tnsr"), &cond.sample(0)).unwrap();
    let o = cinn(&["transfer", "--ckpt", "m.ckpt", "--z", "z.tnsr", "--condition", "y0.tnsr", "--out-dir", "t"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let back = read_tensor(&p.join("t/transfer.tnsr")).unwrap();
    let x = read_tensor(&p.join("d/x.tnsr")).unwrap();
    assert!(back.sample(0).max_abs_diff(&x.sample(0)) < 1e-6);
    assert!(p.join("t/transfer.ppm").exists());

    let o = cinn(&["scale", "--ckpt", "m.ckpt", "--z", "z.tnsr", "--condition", "y0.tnsr", "--out-dir", "a"], p);
    assert_eq!(code(&o), 0);
    assert_eq!(read_tensor(&p.join("a/alpha_strip.tnsr")).unwrap().batch(), 5);
    let o = cinn(
        &["interpolate", "--ckpt", "m.ckpt", "--z", "z.tnsr", "--condition", "y0.tnsr", "--grid", "-0.9,0,0.9", "--out-dir", "i"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_tensor(&p.join("i/interpolation.tnsr")).unwrap().batch(), 9);
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let x = Tensor::from_fn(&[64, 1], |i| ((i * 37 % 64) as f64 - 32.0) * 100.0);
    let y = Tensor::from_fn(&[64, 1], |i| (i % 7) as f64);
    write_tensor(&p.join("x.tnsr"), &x).unwrap();
    write_tensor(&p.join("y.tnsr"), &y).unwrap();
    write(
        p,
        "run.cfg",
        "[data]\nx = x.tnsr\ny = y.tnsr\n[model]\nblocks = 3\nhidden = 16\n\
         [train]\nlr = 5\nsteps = 400\nsnapshot_every = 10\nclamping = false\nnoise = false\n",
    );
    let o = cinn(&["train", "--config", "run.cfg", "--out", "m.ckpt"], p);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(p.join("m.ckpt").exists());
}
