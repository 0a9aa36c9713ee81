use std::path::Path;
use std::process::{Command, Output};

fn aim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aim")).args(args).current_dir(dir).env_remove("AIM_THREADS").output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = aim(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status is nonzero and stderr is one `error[kind]: ...` line.
fn fails(args: &[&str], dir: &Path) -> String {
    let out = aim(args, dir);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
    err
}

const TINY: &[&str] = &["--model.d-model", "8", "--model.state-dim", "4", "--batch-size", "4", "--lr", "3e-3", "--warmup", "2"];

fn setup(dir: &Path) {
    ok(&["dataset", "--out", "d.bin", "--n-samples", "60"], dir);
}

fn train(dir: &Path, out: &str, steps: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "d.bin", "--out-dir", out, "--steps", steps];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args, dir)
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&["train", "--help"], dir.path());
    for key in ["model.n_layers", "model.discretization", "train.batch_size", "train.lr", "train.shards"] {
        assert!(help.contains(&format!("[config: {key}]")), "{key} missing");
    }
    assert!(help.contains("--batch-size <VALUE>") && help.contains("--model.d-model <VALUE>"));
    assert!(help.contains("[default: 32]") && help.contains("[default: auto]"));
    let sample = ok(&["sample", "--help"], dir.path());
    for flag in ["--class", "--n ", "--w ", "--temperature", "--top-k", "--top-p", "--seed"] {
        assert!(sample.contains(flag), "{flag} missing");
    }
}

#[test]
fn dataset_is_reproducible_and_flags_beat_the_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("spec.txt"), "data.n_samples = 50  # overridden below\ndata.noise = 4\n").unwrap();
    let msg = ok(&["dataset", "--spec", "spec.txt", "--n-samples", "30", "--out", "a.bin"], p);
    assert!(msg.starts_with("wrote 30 samples"), "{msg}");
    ok(&["dataset", "--spec", "spec.txt", "--n-samples", "30", "--out", "b.bin"], p);
    assert_eq!(std::fs::read(p.join("a.bin")).unwrap(), std::fs::read(p.join("b.bin")).unwrap());
    ok(&["dataset", "--spec", "spec.txt", "--n-samples", "30", "--seed", "1", "--out", "c.bin"], p);
    assert_ne!(std::fs::read(p.join("a.bin")).unwrap(), std::fs::read(p.join("c.bin")).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    let data = std::fs::read(p.join("d.bin")).unwrap();
    train(p, "full", "6", &[]);
    train(p, "half", "3", &[]);
    ok(&["train", "--data", "d.bin", "--out-dir", "half", "--resume", "half/final.aimc", "--steps", "6"], p);
    let read = |f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read("full/metrics.tsv"), read("half/metrics.tsv"));
    assert_eq!(read("full/final.aimc"), read("half/final.aimc"));
    assert_eq!(String::from_utf8(read("full/metrics.tsv")).unwrap().lines().count(), 6);
    assert_eq!(read("d.bin"), data, "inputs are never modified");
    let err = fails(&["train", "--data", "d.bin", "--out-dir", "half", "--resume", "half/final.aimc", "--model.d-model", "16"], p);
    assert!(err.contains("mismatch"), "{err}");
}

#[test]
fn guidance_changes_samples_and_seeds_reproduce_them() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    train(p, "run", "2", &[]);
    let sample = |out: &str, w: &str, seed: &str| {
        ok(&["sample", "--ckpt", "run/final.aimc", "--out-dir", out, "--class", "2", "--n", "3", "--w", w, "--seed", seed], p);
        (0..3).map(|i| std::fs::read(p.join(out).join(format!("class2_{i:04}.tokens"))).unwrap()).collect::<Vec<_>>()
    };
    let a = sample("a", "1", "7");
    assert_eq!(a, sample("b", "1", "7"));
    assert_ne!(a, sample("c", "2", "7"));
    assert_eq!(sample("c", "2", "7"), sample("d", "2", "7"));
    assert_ne!(a, sample("e", "1", "8"));
    let ppm = std::fs::read(p.join("a/class2_0000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
    let tokens = String::from_utf8(a[0].clone()).unwrap();
    assert_eq!(tokens.lines().count(), 8);
    assert!(tokens.lines().all(|l| l.split(' ').count() == 8));
}

#[test]
fn eval_and_inspect_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    train(p, "run", "1", &[]);
    let report = ok(&["eval", "--ckpt", "run/final.aimc", "--data", "d.bin", "--samples", "2"], p);
    let nll: f64 = report.lines().find(|l| l.starts_with("nll ")).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((nll - 64f64.ln()).abs() < 0.1, "{report}");
    assert!(report.contains("consistency.w2") && report.contains("column_accuracy.w2"));
    let info = ok(&["inspect", "--ckpt", "run/final.aimc"], p);
    assert!(info.contains("model.d_model = 8") && info.contains("checkpoint.step = 1"));
    let count = |text: &str, key: &str| -> usize {
        text.lines().find_map(|l| l.strip_prefix(key)).unwrap().trim().parse().unwrap()
    };
    assert_eq!(count(&info, "param_count = "), count(&info, "stored_params = "));
    let b = ok(&["inspect", "--preset", "aim-b"], p);
    let n = count(&b, "param_count = ") as f64;
    assert!((n - 148e6).abs() <= 0.1 * 148e6, "{n}");
}

#[test]
fn bench_writes_reports_and_honours_thread_settings() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let args = ["bench", "--kind", "both", "--lengths", "16,32,64,256", "--batch", "2", "--d-model", "8", "--out", "b"];
    let run = |threads: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_aim"));
        cmd.args(args).current_dir(p).env_remove("AIM_THREADS");
        if let Some(t) = threads {
            cmd.env("AIM_THREADS", t);
        }
        if let Some(f) = flag {
            cmd.args(["--threads", f]);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(p.join("b/bench.csv")).unwrap()
    };
    let csv = run(Some("3"), None);
    assert!(csv.starts_with("variant,metric,value\n"));
    assert_eq!(csv.matches("variant,metric,value").count(), 1);
    assert!(csv.contains("mamba,config.threads,3") && csv.contains("attention,config.threads,3"));
    assert!(csv.contains("mamba,slope,") && csv.contains("attention,slope,"));
    assert!(run(Some("3"), Some("2")).contains("mamba,config.threads,2"));
    for f in ["bench.txt", "bench_mamba.dat", "bench_attention.dat"] {
        assert!(p.join("b").join(f).exists(), "{f}");
    }
}

#[test]
fn failures_are_single_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    assert!(fails(&["train", "--data", "missing.bin", "--out-dir", "x"], p).starts_with("error[io]"));
    assert!(fails(&["sample", "--ckpt", "d.bin", "--out-dir", "x"], p).starts_with("error[format]"));
    assert!(fails(&["train", "--data", "d.bin"], p).starts_with("error[usage]"));
    assert!(fails(&["train", "--data", "d.bin", "--out-dir", "x", "--no-such-flag", "1"], p).starts_with("error[usage]"));
    std::fs::write(p.join("bad.txt"), "train.steps = 3\ntrain.bogus = 1\n").unwrap();
    assert!(fails(&["train", "--data", "d.bin", "--out-dir", "x", "--config", "bad.txt"], p).contains("unknown config key train.bogus"));
    std::fs::write(p.join("bad.txt"), "train.steps\n").unwrap();
    assert!(fails(&["train", "--data", "d.bin", "--out-dir", "x", "--config", "bad.txt"], p).starts_with("error[format]"));
    assert!(fails(&["train", "--data", "d.bin", "--out-dir", "x", "--steps", "many"], p).starts_with("error[invalid]"));
    assert!(fails(&["bench", "--lengths", "64,32,128,2048"], p).starts_with("error[invalid]"));
    assert!(fails(&["train", "--data", "d.bin", "--out-dir", "x", "--model.vocab-size", "16"], p).contains("mismatch"));
    assert!(!p.join("x").exists(), "flags are validated before any output is written");
    train(p, "run", "1", &[]);
    assert!(fails(&["sample", "--ckpt", "run/final.aimc", "--out-dir", "s", "--w", "-1"], p).contains("guidance scale"));
    assert!(!p.join("s").exists());
    let out = Command::new(env!("CARGO_BIN_EXE_aim")).args(["inspect", "--preset", "micro"]).env("AIM_THREADS", "zero").output().unwrap();
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}
