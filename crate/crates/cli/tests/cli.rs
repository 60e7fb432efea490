use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use tempfile::TempDir;

use robustdiff::models::Parameterized;
use robustdiff::{EpsModel, SeededRng, Tensor};
use robustdiff_cli::io::{format_samples, parse_samples};
use robustdiff_cli::{run, Checkpoint, ModelState, RunConfig};

const BASE: &str = r#"
[schedule]
kind = "cosine"
steps = 30

[model]
hidden = 16
depth = 2
time_embed = 4

[train]
iterations = 200
batch_size = 32
seed = 7

[data]
n = 2000
[data.dataset]
kind = "gaussian_1d"
mu = 2.0
sigma = 0.5

[io]
out_dir = "run"
eval_every = 50
checkpoint_every = 100
eval_samples = 200
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Run the tool in-process, returning the exit code and captured stdout.
fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["robustdiff"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn eps_pair(path: &Path) -> robustdiff::EmaPair<EpsModel> {
    match Checkpoint::load(path).unwrap().model {
        ModelState::Eps(p) => p,
        ModelState::Consistency(_) => panic!("expected a noise-prediction checkpoint"),
    }
}

fn max_param_diff(a: &EpsModel, b: &EpsModel) -> f64 {
    a.flat_params()
        .iter()
        .zip(b.flat_params())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn train(dir: &Path, cfg: &Path, out: &str) -> PathBuf {
    let out_dir = dir.join(out);
    let (code, _) = cli(&["train", s(cfg), "--out-dir", s(&out_dir)]);
    assert_eq!(code, 0);
    out_dir
}

#[test]
fn train_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", BASE);
    let run_dir = train(tmp.path(), &cfg, "a");
    for f in [
        "checkpoint.bin",
        "checkpoint_100.bin",
        "checkpoint_200.bin",
        "metrics.csv",
        "config.resolved.toml",
        "manifest.json",
    ] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let resolved = std::fs::read_to_string(run_dir.join("config.resolved.toml")).unwrap();
    let reparsed = RunConfig::parse(&resolved).unwrap();
    assert_eq!(reparsed, RunConfig::load(&cfg).unwrap());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    for step in [50, 100, 150, 200] {
        assert!(metrics.contains(&format!("\n{step},")), "no row at {step}:\n{metrics}");
    }
    assert!(metrics.contains("train_loss") && metrics.contains("w1"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", BASE);
    let a = train(tmp.path(), &cfg, "a");
    let b = train(tmp.path(), &cfg, "b");
    for f in ["checkpoint.bin", "metrics.csv", "config.resolved.toml", "manifest.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    let (sa, sb) = (tmp.path().join("a.txt"), tmp.path().join("b.txt"));
    for (ck, out) in [(&a, &sa), (&b, &sb)] {
        let ck = ck.join("checkpoint.bin");
        assert_eq!(cli(&["sample", s(&ck), "--nfe", "10", "--n", "300", "--out", s(out)]).0, 0);
    }
    assert_eq!(read(&sa), read(&sb));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", BASE);
    let full = train(tmp.path(), &cfg, "full");
    let resumed = tmp.path().join("resumed");
    let from = full.join("checkpoint_100.bin");
    let (code, _) = cli(&["train", s(&cfg), "--resume", s(&from), "--out-dir", s(&resumed)]);
    assert_eq!(code, 0);
    assert_eq!(read(&full.join("checkpoint.bin")), read(&resumed.join("checkpoint.bin")));
    assert_eq!(read(&full.join("metrics.csv")), read(&resumed.join("metrics.csv")));
}

#[test]
fn resume_refuses_a_different_configuration() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", BASE);
    let full = train(tmp.path(), &cfg, "full");
    let other = write_config(tmp.path(), "h.toml", &BASE.replace("seed = 7", "seed = 8"));
    let ck = full.join("checkpoint_100.bin");
    let (code, _) = cli(&["train", s(&other), "--resume", s(&ck), "--out-dir", s(&tmp.path().join("x"))]);
    assert_eq!(code, 1);
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", &BASE.replace("iterations = 200", "iterations = 0"));
    let dir = train(tmp.path(), &cfg, "a");
    let pair = eps_pair(&dir.join("checkpoint.bin"));
    let rc = RunConfig::load(&cfg).unwrap();
    let fresh = EpsModel::init(&rc.model, 1, 30, &mut SeededRng::with_stream(7, 0)).unwrap();
    assert_eq!(pair.online, fresh);
    assert_eq!(pair.target, fresh);
}

#[test]
fn vanishing_perturbation_reduces_to_standard_training() {
    let tmp = TempDir::new().unwrap();
    let std_cfg = write_config(tmp.path(), "std.toml", BASE);
    let at_cfg = write_config(
        tmp.path(),
        "at.toml",
        &format!("{BASE}\n[at]\nenabled = true\nk = 1\nadv_lr = 1e-12\n"),
    );
    let a = eps_pair(&train(tmp.path(), &std_cfg, "std").join("checkpoint.bin"));
    let b = eps_pair(&train(tmp.path(), &at_cfg, "at").join("checkpoint.bin"));
    let diff = max_param_diff(&a.online, &b.online);
    assert!(diff < 1e-8, "parameters differ by {diff}");
}

#[test]
fn fine_tuning_starts_from_the_source_ema_weights() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", BASE);
    train(tmp.path(), &cfg, "pre");
    let ft = BASE.replace("iterations = 200", "iterations = 0") + "\n[init]\nfrom = \"pre/checkpoint.bin\"\n";
    let ft_cfg = write_config(tmp.path(), "ft.toml", &ft);
    let dir = train(tmp.path(), &ft_cfg, "ft");
    let source = eps_pair(&tmp.path().join("pre/checkpoint.bin"));
    assert_eq!(eps_pair(&dir.join("checkpoint.bin")).online, source.target);
    let resolved = RunConfig::load(&dir.join("config.resolved.toml")).unwrap();
    assert!(Path::new(resolved.init.from.as_deref().unwrap()).is_absolute());

    let wide = ft.replace("hidden = 16", "hidden = 24");
    let wide_cfg = write_config(tmp.path(), "wide.toml", &wide);
    let (code, _) = cli(&["train", s(&wide_cfg), "--out-dir", s(&tmp.path().join("w"))]);
    assert_eq!(code, 1);
}

#[test]
fn teacher_with_another_schedule_is_refused() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", &BASE.replace("iterations = 200", "iterations = 0"));
    train(tmp.path(), &cfg, "teacher");
    let distill = BASE.replace("steps = 30", "steps = 40") + "\n[cd]\nteacher = \"teacher/checkpoint.bin\"\n";
    let dcfg = write_config(tmp.path(), "d.toml", &distill);
    let mut out = Vec::new();
    let err = robustdiff_cli::commands::cmd_distill(&dcfg, None, Some(&tmp.path().join("d")), &mut out).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("teacher schedule mismatch") && msg.contains("T = 30") && msg.contains("T = 40"), "{msg}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn distill_with_oracle_teacher_and_sample_in_one_step() {
    let tmp = TempDir::new().unwrap();
    let distill = BASE.replace("iterations = 200", "iterations = 100")
        + "\n[cd]\nteacher = \"oracle:gaussian(2.0, 0.5)\"\n";
    let dcfg = write_config(tmp.path(), "d.toml", &distill);
    let dir = tmp.path().join("d");
    assert_eq!(cli(&["distill", s(&dcfg), "--out-dir", s(&dir)]).0, 0);
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    for name in ["cd_loss", "cd_bound_lhs", "cd_bound_rhs", "cd_bound_pass", "one_step_w1"] {
        assert!(metrics.contains(name), "{name} missing:\n{metrics}");
    }
    let ck = dir.join("checkpoint.bin");
    let out = tmp.path().join("cm.txt");
    assert_eq!(cli(&["sample", s(&ck), "--n", "50", "--out", s(&out)]).0, 0);
    assert_eq!(parse_samples(&std::fs::read_to_string(&out).unwrap()).unwrap().shape(), &[50, 1]);
    assert_eq!(cli(&["sample", s(&ck), "--nfe", "5", "--out", s(&out)]).0, 1);
    // A short run may or may not satisfy the bound; either way a verdict is reached.
    let code = cli(&["verify", "cd_bound", "--checkpoint", s(&ck), "--n", "500"]).0;
    assert!(code == 0 || code == 3, "exit {code}");
}

#[test]
fn eval_of_identical_files_is_zero() {
    let tmp = TempDir::new().unwrap();
    let x = SeededRng::new(3).normal_tensor(&[400, 2]);
    let p = tmp.path().join("x.txt");
    std::fs::write(&p, format_samples(&x)).unwrap();
    let (code, out) = cli(&["eval", "--samples", s(&p), "--reference", s(&p)]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "sliced_wasserstein 0.0");

    let q = tmp.path().join("y.txt");
    std::fs::write(&q, format_samples(&x.slice_cols(0, 1).unwrap())).unwrap();
    assert_eq!(cli(&["eval", "--samples", s(&q), "--reference", s(&q)]).1.trim(), "w1 0.0");
    assert_eq!(cli(&["eval", "--samples", s(&p), "--reference", s(&q)]).0, 1);
}

#[test]
fn eval_against_the_configured_dataset() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", BASE);
    let dump = tmp.path().join("data.txt");
    assert_eq!(cli(&["dump-data", s(&cfg), "--out", s(&dump)]).0, 0);
    let (code, out) = cli(&["eval", "--samples", s(&dump), "--config", s(&cfg)]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "w1 0.0");
}

#[test]
fn es_schedule_is_echoed_in_the_sidecar() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", &BASE.replace("iterations = 200", "iterations = 50"));
    let dir = train(tmp.path(), &cfg, "a");
    let sched_text = "1.0 0.999 0.998\n";
    let es = write_config(tmp.path(), "es.txt", &sched_text.repeat(10));
    let out = tmp.path().join("s.txt");
    let ck = dir.join("checkpoint.bin");
    let (code, _) = cli(&[
        "sample", s(&ck), "--sampler", "es", "--nfe", "30", "--es-schedule", s(&es), "--out", s(&out),
    ]);
    assert_eq!(code, 0);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("s.txt.json")).unwrap()).unwrap();
    assert_eq!(sidecar["es_schedule_source"], sched_text.repeat(10));
    assert_eq!(sidecar["sampler"]["kind"], "es");
    assert_eq!(sidecar["model_kind"], "eps");

    let both = ["sample", s(&ck), "--es-lambda", "1.01", "--es-schedule", s(&es), "--out", s(&out)];
    assert_eq!(cli(&both).0, 1);
}

#[test]
fn clipping_flag_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.toml", &BASE.replace("iterations = 200", "iterations = 0"));
    let ck = train(tmp.path(), &cfg, "a").join("checkpoint.bin");
    let out = tmp.path().join("s.txt");
    assert_eq!(cli(&["sample", s(&ck), "--nfe", "3", "--clip-denoised", "1.5", "--out", s(&out)]).0, 0);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("s.txt.json")).unwrap()).unwrap();
    assert_eq!(sidecar["sampler"]["clip_denoised"], 1.5);
    assert_eq!(cli(&["sample", s(&ck), "--clip-denoised=-1", "--out", s(&out)]).0, 1);
}

#[test]
fn missing_and_corrupt_inputs_fail_cleanly() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(cli(&["train", s(&missing)]).0, 1);
    let junk = write_config(tmp.path(), "junk.bin", "not a checkpoint");
    assert_eq!(cli(&["sample", s(&junk), "--out", s(&tmp.path().join("o.txt"))]).0, 1);
    let bad = write_config(tmp.path(), "bad.toml", "[train]\nlearning_rate = 1\n");
    assert_eq!(cli(&["train", s(&bad)]).0, 1);
    assert_eq!(cli(&["no-such-command"]).0, 1);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_robustdiff");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["verify", "sampler_equiv", "--instances", "20"]), Some(0));
    assert_eq!(status(&["verify", "gradcheck", "--instances", "6"]), Some(0));
    assert_eq!(status(&["verify", "cd_bound"]), Some(1));
    assert_eq!(status(&["sample", "/nonexistent/ck.bin", "--out", "/tmp/never.txt"]), Some(1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_files_round_trip(rows in 1usize..20, cols in 1usize..4, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.normal() * 10f64.powi(rng.int_inclusive(0, 20) as i32 - 10));
        prop_assert_eq!(parse_samples(&format_samples(&x)).unwrap(), x);
    }

    #[test]
    fn resolved_configs_are_fixed_points(steps in 1usize..500, seed in any::<u64>(), k in 1usize..6, lr in 1e-6f64..1.0) {
        let mut cfg = RunConfig::default();
        cfg.schedule.steps = steps;
        cfg.sampler.nfe = steps.min(10);
        cfg.train.seed = seed;
        cfg.train.lr = lr;
        cfg.at.enabled = true;
        cfg.at.k = k;
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }
}
