//! Command implementations. Each writes its human-readable report to `out`
//! and its artifacts to disk.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use robustdiff::checks::{gradcheck_suite, sampler_equivalence_suite};
use robustdiff::consistency::{cm_sample, evaluate_cd_loss};
use robustdiff::data_eval::{sliced_wasserstein, talagrand_grid, verify_cd_bound, w1_1d, Provenance};
use robustdiff::samplers::{sample, EsSchedule};
use robustdiff::training::{sample_distance, sample_distance_name, EvalSpec, LossWindow};
use robustdiff::{
    CdTrainer, ConsistencyModel, Dataset, DpmTrainer, EpsModel, MetricsReport, NoiseSchedule, Parameterization, Parameterized,
    SamplerConfig, SamplerKind, SeededRng, Tensor, TrainMode,
};

use crate::checkpoint::{Checkpoint, ModelState};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{format_samples, read_metrics_prefix, read_samples, sha256_hex, write_json, write_text, RunManifest};
use crate::teacher::TeacherSpec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Artifact names inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| CliError::io(Path::new("<stdout>"), e))?
    };
}

pub fn numbered_checkpoint(updates: u64) -> String {
    format!("checkpoint_{updates}.bin")
}

/// Summary returned by the training commands.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub updates: u64,
    pub metrics: MetricsReport,
}

struct Prepared {
    cfg: RunConfig,
    sched: NoiseSchedule,
    data: Dataset,
    out_dir: PathBuf,
}

fn prepare(config: &Path, out_dir: Option<&Path>) -> Result<Prepared, CliError> {
    let mut cfg = RunConfig::load(config)?;
    // Written back absolute so the resolved configuration is self-contained.
    if let Some(from) = &cfg.init.from {
        cfg.init.from = Some(resolve_relative(from, &config_dir(config)).display().to_string());
    }
    let sched = NoiseSchedule::build(cfg.schedule.kind, cfg.schedule.steps)?;
    let data = Dataset::generate(&cfg.data.dataset, cfg.data.n, cfg.data.seed)?;
    let out_dir = out_dir.map_or_else(|| cfg.io.out_dir.clone(), Path::to_path_buf);
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    Ok(Prepared {
        cfg,
        sched,
        data,
        out_dir,
    })
}

/// Next checkpoint boundary strictly after `updates`, capped at `iterations`.
fn next_stop(updates: u64, every: u64, iterations: u64) -> u64 {
    if every == 0 {
        iterations
    } else {
        ((updates / every + 1) * every).min(iterations)
    }
}

/// A resumed run must share everything with its checkpoint except the
/// iteration budget and output cadence.
fn check_resumable(ck: &Checkpoint, cfg: &RunConfig, sched: &NoiseSchedule, path: &Path) -> Result<(), CliError> {
    if ck.schedule != *sched {
        return Err(CliError::format(
            path,
            format!(
                "checkpoint schedule (T = {}) does not match the configuration (T = {})",
                ck.schedule.steps(),
                sched.steps()
            ),
        ));
    }
    let mut theirs = RunConfig::parse(&ck.config).map_err(|e| CliError::format(path, e.to_string()))?;
    theirs.train.iterations = cfg.train.iterations;
    theirs.io = cfg.io.clone();
    if theirs != *cfg {
        return Err(CliError::format(
            path,
            "checkpoint was produced by a different configuration",
        ));
    }
    Ok(())
}

fn resumed_metrics(ck_path: &Path, updates: u64, provenance: Provenance) -> Result<MetricsReport, CliError> {
    let csv = ck_path.parent().unwrap_or(Path::new(".")).join(METRICS_FILE);
    let mut report = if csv.exists() {
        read_metrics_prefix(&csv, updates)?
    } else {
        MetricsReport::default()
    };
    report.provenance = provenance;
    Ok(report)
}

fn finish_run(
    p: &Prepared,
    command: &'static str,
    resolved: &str,
    ck: &Checkpoint,
    metrics: &MetricsReport,
) -> Result<(), CliError> {
    let bytes = ck.to_bytes();
    let ck_path = p.out_dir.join(CHECKPOINT_FILE);
    std::fs::write(&ck_path, &bytes).map_err(|e| CliError::io(&ck_path, e))?;
    write_text(&p.out_dir.join(METRICS_FILE), &metrics.to_csv())?;
    write_text(&p.out_dir.join(RESOLVED_CONFIG_FILE), resolved)?;
    write_json(
        &p.out_dir.join(MANIFEST_FILE),
        &RunManifest {
            command,
            version: VERSION,
            config_hash: sha256_hex(resolved.as_bytes()),
            seed: p.cfg.train.seed,
            updates: ck.trainer.updates,
            checkpoint_sha256: sha256_hex(&bytes),
        },
    )
}

fn save_intermediate(dir: &Path, ck: &Checkpoint, metrics: &MetricsReport) -> Result<(), CliError> {
    ck.save(&dir.join(numbered_checkpoint(ck.trainer.updates)))?;
    write_text(&dir.join(METRICS_FILE), &metrics.to_csv())
}

/// Train a noise-prediction model, standard or adversarial per `at.enabled`.
pub fn cmd_train(
    config: &Path,
    resume: Option<&Path>,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<RunOutcome, CliError> {
    let p = prepare(config, out_dir)?;
    let cfg = &p.cfg;
    let resolved = cfg.to_toml();
    let provenance = Provenance {
        config_hash: sha256_hex(resolved.as_bytes()),
        seed: cfg.train.seed,
    };
    let mode = cfg.at.active().map_or(TrainMode::Standard, TrainMode::Adversarial);
    let dim = p.data.dim();

    let (mut trainer, mut metrics) = match resume {
        None => {
            let mut rng = SeededRng::with_stream(cfg.train.seed, 0);
            let fresh = EpsModel::init(&cfg.model, dim, p.sched.steps(), &mut rng)?;
            let model = match &cfg.init.from {
                Some(from) => initial_weights(Path::new(from), &fresh, &p.sched)?,
                None => fresh,
            };
            (DpmTrainer::new(model, &cfg.train)?, MetricsReport::new(provenance))
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_resumable(&ck, cfg, &p.sched, path)?;
            let ModelState::Eps(pair) = ck.model else {
                return Err(CliError::format(path, "expected a noise-prediction checkpoint"));
            };
            let metrics = resumed_metrics(path, ck.trainer.updates, provenance)?;
            (DpmTrainer::restore(pair, &cfg.train, &ck.trainer)?, metrics)
        }
    };
    say!(
        out,
        "train: {} model, {} updates from {}, T = {}",
        if cfg.at.enabled { "adversarial" } else { "standard" },
        cfg.train.iterations,
        trainer.updates(),
        p.sched.steps()
    );

    let eval = EvalSpec {
        reference: p.data.samples(),
        sampler: cfg.sampler.clone(),
        n_samples: cfg.io.eval_samples,
        n_proj: cfg.io.eval_projections,
        seed: cfg.sampler.seed,
    };
    let distance_name = sample_distance_name(dim);
    let adversarial = cfg.at.enabled;
    let checkpoint = |tr: &DpmTrainer| Checkpoint {
        schedule: p.sched.clone(),
        model: ModelState::Eps(tr.ema.clone()),
        trainer: tr.state(),
        optimizer: cfg.train.optimizer,
        lr: cfg.train.lr,
        config: resolved.clone(),
    };

    let mut window = LossWindow::new(cfg.io.eval_every, trainer.updates());
    let iterations = cfg.train.iterations;
    while trainer.updates() < iterations {
        let stop = next_stop(trainer.updates(), cfg.io.checkpoint_every, iterations);
        trainer.run(p.data.samples(), &mode, &cfg.train, &p.sched, stop, |tr, step| {
            if let Some(mean) = window.observe(tr.updates(), step.loss) {
                metrics.push(tr.updates(), "train_loss", mean)?;
                if adversarial {
                    metrics.push(tr.updates(), "delta_norm", step.delta_norm)?;
                }
                let d = sample_distance(tr.ema_model(), &eval, &p.sched)?;
                metrics.push(tr.updates(), distance_name, d)?;
            }
            Ok(())
        })?;
        if cfg.io.checkpoint_every > 0 && stop % cfg.io.checkpoint_every == 0 {
            save_intermediate(&p.out_dir, &checkpoint(&trainer), &metrics)?;
        }
    }

    let ck = checkpoint(&trainer);
    finish_run(&p, "train", &resolved, &ck, &metrics)?;
    if let Some(l) = metrics.last("train_loss") {
        say!(out, "final train_loss {l:.6}");
    }
    if let Some(d) = metrics.last(distance_name) {
        say!(out, "final {distance_name} {d:.6}");
    }
    say!(out, "wrote {}", p.out_dir.display());
    Ok(RunOutcome {
        out_dir: p.out_dir.clone(),
        updates: trainer.updates(),
        metrics,
    })
}

/// EMA weights of a noise-prediction checkpoint, checked against the
/// configured schedule and architecture.
fn initial_weights(path: &Path, fresh: &EpsModel, sched: &NoiseSchedule) -> Result<EpsModel, CliError> {
    let ck = Checkpoint::load(path)?;
    if ck.schedule != *sched {
        return Err(CliError::format(
            path,
            format!(
                "initial checkpoint schedule (T = {}) does not match the configuration (T = {})",
                ck.schedule.steps(),
                sched.steps()
            ),
        ));
    }
    let ModelState::Eps(pair) = ck.model else {
        return Err(CliError::format(path, "initial weights must come from a noise-prediction checkpoint"));
    };
    let same_shape = pair.target.param_shapes() == fresh.param_shapes()
        && pair.target.data_dim() == fresh.data_dim()
        && pair.target.time_embed() == fresh.time_embed();
    if !same_shape {
        return Err(CliError::format(path, "initial checkpoint architecture differs from [model]"));
    }
    Ok(pair.target)
}

fn resolve_relative(path: &str, base: &Path) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn config_dir(config: &Path) -> PathBuf {
    let dir = config.parent().unwrap_or(Path::new(""));
    if dir.is_absolute() {
        dir.to_path_buf()
    } else {
        std::env::current_dir().unwrap_or_default().join(dir)
    }
}

/// Standard deviation over all coordinates, the default data scale of the
/// consistency parameterization.
fn data_std(x: &Tensor) -> f64 {
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Distill a consistency model from a teacher, optionally with adversarial
/// perturbation of the target branch.
pub fn cmd_distill(
    config: &Path,
    resume: Option<&Path>,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<RunOutcome, CliError> {
    let mut p = prepare(config, out_dir)?;
    let teacher_text = p
        .cfg
        .cd
        .teacher
        .clone()
        .ok_or_else(|| CliError::Config("distill needs cd.teacher (checkpoint path or oracle:gaussian(mu,sigma))".into()))?;
    let spec = TeacherSpec::parse(&teacher_text, &config_dir(config))?;
    let teacher = spec.load(&p.sched)?;
    // Written back so the resolved configuration is self-contained.
    p.cfg.cd.teacher = Some(spec.to_config_string());
    let param = *p.cfg.cd.parameterization.get_or_insert(Parameterization::Scaled {
        sigma_data: data_std(p.data.samples()),
        s_max: 1.0,
    });
    let cfg = &p.cfg;
    let resolved = cfg.to_toml();
    let provenance = Provenance {
        config_hash: sha256_hex(resolved.as_bytes()),
        seed: cfg.train.seed,
    };
    let cd = cfg.cd.config();
    let at = cfg.at.active();
    let dim = p.data.dim();

    let (mut trainer, mut metrics) = match resume {
        None => {
            let mut rng = SeededRng::with_stream(cfg.train.seed, 0);
            let model = ConsistencyModel::init(&cfg.model, dim, p.sched.steps(), param, &mut rng)?;
            (CdTrainer::new(model, &cfg.train, &cd)?, MetricsReport::new(provenance))
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_resumable(&ck, cfg, &p.sched, path)?;
            let ModelState::Consistency(pair) = ck.model else {
                return Err(CliError::format(path, "expected a consistency checkpoint"));
            };
            let metrics = resumed_metrics(path, ck.trainer.updates, provenance)?;
            (CdTrainer::restore(pair, &cfg.train, &cd, &ck.trainer)?, metrics)
        }
    };
    say!(
        out,
        "distill: {} from {}, {} updates from {}, T = {}",
        if at.is_some() { "adversarial" } else { "standard" },
        spec.to_config_string(),
        cfg.train.iterations,
        trainer.updates(),
        p.sched.steps()
    );

    let distance_name = format!("one_step_{}", sample_distance_name(dim));
    let one_step_distance = |m: &ConsistencyModel| -> robustdiff::Result<f64> {
        let s = cm_sample(m, 1, cfg.io.eval_samples, &p.sched, cfg.sampler.seed)?;
        if dim == 1 {
            w1_1d(s.data(), p.data.samples().data())
        } else {
            sliced_wasserstein(&s, p.data.samples(), cfg.io.eval_projections, cfg.sampler.seed)
        }
    };
    let checkpoint = |tr: &CdTrainer| Checkpoint {
        schedule: p.sched.clone(),
        model: ModelState::Consistency(tr.ema.clone()),
        trainer: tr.state(),
        optimizer: cfg.train.optimizer,
        lr: cfg.train.lr,
        config: resolved.clone(),
    };

    let mut window = LossWindow::new(cfg.io.eval_every, trainer.updates());
    let iterations = cfg.train.iterations;
    while trainer.updates() < iterations {
        let stop = next_stop(trainer.updates(), cfg.io.checkpoint_every, iterations);
        trainer.run(p.data.samples(), &teacher, at.as_ref(), &cfg.train, &cd, &p.sched, stop, |tr, step| {
            if let Some(mean) = window.observe(tr.updates(), step.loss) {
                metrics.push(tr.updates(), "train_loss", mean)?;
                if at.is_some() {
                    metrics.push(tr.updates(), "delta_norm", step.delta_norm)?;
                }
                metrics.push(tr.updates(), &distance_name, one_step_distance(tr.model())?)?;
            }
            Ok(())
        })?;
        if cfg.io.checkpoint_every > 0 && stop % cfg.io.checkpoint_every == 0 {
            save_intermediate(&p.out_dir, &checkpoint(&trainer), &metrics)?;
        }
    }

    let u = trainer.updates();
    let model = trainer.model();
    let cd_loss = evaluate_cd_loss(model, &teacher, p.data.samples(), &cd, &p.sched, cfg.cd.eval_rows, cfg.train.seed)?;
    metrics.push(u, "cd_loss", cd_loss)?;
    say!(out, "final cd_loss {cd_loss:.6e}");
    if dim == 1 {
        let b = verify_cd_bound(model, &p.sched, p.data.samples(), cd_loss, cfg.io.eval_samples, cfg.sampler.seed)?;
        metrics.push(u, "cd_bound_lhs", b.lhs)?;
        metrics.push(u, "cd_bound_rhs", b.rhs)?;
        metrics.push(u, "cd_bound_pass", if b.pass { 1.0 } else { 0.0 })?;
        say!(
            out,
            "cd_bound {}: W1 {:.6} <= sqrt(T * loss) {:.6} + {}",
            pass_word(b.pass),
            b.lhs,
            b.rhs,
            b.slack
        );
    }

    let ck = checkpoint(&trainer);
    finish_run(&p, "distill", &resolved, &ck, &metrics)?;
    say!(out, "wrote {}", p.out_dir.display());
    Ok(RunOutcome {
        out_dir: p.out_dir.clone(),
        updates: u,
        metrics,
    })
}

fn pass_word(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Flags of the `sample` command.
#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub sampler: Option<SamplerKind>,
    pub nfe: Option<usize>,
    pub order: Option<u8>,
    /// Evaluations for consistency checkpoints.
    pub steps: Option<usize>,
    pub n: usize,
    pub seed: Option<u64>,
    pub es_lambda: Option<f64>,
    pub es_schedule: Option<PathBuf>,
    pub es_base: Option<SamplerKind>,
    pub clip_denoised: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SampleSidecar {
    version: &'static str,
    checkpoint_sha256: String,
    model_kind: &'static str,
    n: usize,
    dim: usize,
    seed: u64,
    /// Resolved sampler settings for noise-prediction checkpoints.
    sampler: Option<SamplerConfig>,
    /// Evaluations for consistency checkpoints.
    steps: Option<usize>,
    /// Contents of the ES schedule file, unmodified.
    es_schedule_source: Option<String>,
}

/// Parse an ES schedule file: a JSON number or array, or whitespace-separated
/// numbers (one per step).
pub fn parse_es_schedule(text: &str) -> Result<EsSchedule, String> {
    if let Ok(s) = serde_json::from_str::<EsSchedule>(text) {
        return Ok(s);
    }
    let values: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
    match values {
        Ok(v) if v.len() == 1 => Ok(EsSchedule::Constant(v[0])),
        Ok(v) if !v.is_empty() => Ok(EsSchedule::PerStep(v)),
        _ => Err("expected a number, a JSON array, or whitespace-separated numbers".into()),
    }
}

/// Draw samples from a checkpoint and write them, in data coordinates, to
/// `out_path` with a JSON sidecar at `<out_path>.json`.
pub fn cmd_sample(
    checkpoint: &Path,
    opts: &SampleOptions,
    out_path: &Path,
    out: &mut dyn Write,
) -> Result<Tensor, CliError> {
    let bytes = std::fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|m| CliError::format(checkpoint, m))?;
    let run = RunConfig::parse(&ck.config).map_err(|e| CliError::format(checkpoint, e.to_string()))?;
    let sched = &ck.schedule;
    if opts.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let usage = |e: robustdiff::Error| CliError::Usage(e.to_string());
    let seed = opts.seed.unwrap_or(run.sampler.seed);
    let mut es_source = None;

    let (samples, sampler, steps, kind) = match &ck.model {
        ModelState::Eps(pair) => {
            if opts.steps.is_some() {
                return Err(CliError::Usage(
                    "--steps applies to consistency checkpoints; use --nfe for noise-prediction models".into(),
                ));
            }
            let mut s = run.sampler.clone();
            s.seed = seed;
            if let Some(k) = opts.sampler {
                s.kind = k;
            }
            if let Some(nfe) = opts.nfe {
                s.nfe = nfe;
            }
            if let Some(o) = opts.order {
                s.solver_order = o;
            }
            if let Some(b) = opts.es_base {
                s.es_base = b;
            }
            if let Some(c) = opts.clip_denoised {
                s.clip_denoised = Some(c);
            }
            match (opts.es_lambda, &opts.es_schedule) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Usage("give either --es-lambda or --es-schedule, not both".into()));
                }
                (Some(l), None) => s.es_lambda = EsSchedule::Constant(l),
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                    s.es_lambda = parse_es_schedule(&text).map_err(|m| CliError::format(path, m))?;
                    es_source = Some(text);
                }
                (None, None) => {}
            }
            s.validate(sched.steps()).map_err(usage)?;
            let x = sample(&pair.target, &s, opts.n, pair.target.data_dim(), sched)?.into_final();
            (x, Some(s), None, "eps")
        }
        ModelState::Consistency(pair) => {
            let eps_only = opts.sampler.is_some()
                || opts.nfe.is_some()
                || opts.order.is_some()
                || opts.es_lambda.is_some()
                || opts.es_schedule.is_some()
                || opts.es_base.is_some()
                || opts.clip_denoised.is_some();
            if eps_only {
                return Err(CliError::Usage(
                    "consistency checkpoints sample with --steps; sampler, NFE and ES flags do not apply".into(),
                ));
            }
            let steps = opts.steps.unwrap_or(1);
            if steps == 0 || steps > sched.steps() {
                return Err(CliError::Usage(format!("--steps {steps} outside 1..={}", sched.steps())));
            }
            (cm_sample(&pair.online, steps, opts.n, sched, seed)?, None, Some(steps), "consistency")
        }
    };
    let samples = run.data.dataset.affine().denormalize(&samples)?;
    write_text(out_path, &format_samples(&samples))?;
    let sidecar_path = sidecar_path(out_path);
    write_json(
        &sidecar_path,
        &SampleSidecar {
            version: VERSION,
            checkpoint_sha256: sha256_hex(&bytes),
            model_kind: kind,
            n: opts.n,
            dim: samples.cols(),
            seed,
            sampler,
            steps,
            es_schedule_source: es_source,
        },
    )?;
    say!(out, "wrote {} samples to {}", opts.n, out_path.display());
    Ok(samples)
}

pub fn sidecar_path(samples: &Path) -> PathBuf {
    let mut s = samples.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Where `eval` takes its reference distribution from.
#[derive(Debug, Clone)]
pub enum Reference {
    File(PathBuf),
    /// The configured dataset, in data coordinates.
    Config(PathBuf),
}

/// Compare samples with a reference: exact `W1` in one dimension, sliced
/// Wasserstein otherwise. Returns the metric name and value.
pub fn cmd_eval(
    samples: &Path,
    reference: &Reference,
    n_proj: usize,
    seed: u64,
    append: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(String, f64), CliError> {
    let a = read_samples(samples)?;
    let b = match reference {
        Reference::File(p) => read_samples(p)?,
        Reference::Config(p) => {
            let cfg = RunConfig::load(p)?;
            let d = Dataset::generate(&cfg.data.dataset, cfg.data.n, cfg.data.seed)?;
            d.affine().denormalize(d.samples())?
        }
    };
    if a.cols() != b.cols() {
        return Err(CliError::Usage(format!(
            "dimension mismatch: samples have {} columns, reference has {}",
            a.cols(),
            b.cols()
        )));
    }
    if n_proj == 0 {
        return Err(CliError::Usage("--n-proj must be positive".into()));
    }
    let name = sample_distance_name(a.cols()).to_string();
    let value = if a.cols() == 1 {
        w1_1d(a.data(), b.data())?
    } else {
        sliced_wasserstein(&a, &b, n_proj, seed)?
    };
    say!(out, "{name} {value:?}");
    if let Some(path) = append {
        let mut report = if path.exists() {
            read_metrics_prefix(path, u64::MAX)?
        } else {
            MetricsReport::default()
        };
        report.push(0, &name, value)?;
        write_text(path, &report.to_csv())?;
    }
    Ok((name, value))
}

/// Write the configured dataset, in data coordinates, as a sample file.
pub fn cmd_dump_data(config: &Path, n: Option<usize>, out_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let n = n.unwrap_or(cfg.data.n);
    let d = Dataset::generate(&cfg.data.dataset, n, cfg.data.seed)?;
    write_text(out_path, &format_samples(&d.affine().denormalize(d.samples())?))?;
    say!(out, "wrote {n} rows to {}", out_path.display());
    Ok(())
}

/// Verification suites; every check prints a PASS/FAIL line.
#[derive(Debug, Clone)]
pub enum Suite {
    Talagrand { steps: usize, points: usize, m_max: f64 },
    CdBound { checkpoint: Option<PathBuf>, n: usize, seed: u64 },
    Gradcheck { instances: usize, seed: u64 },
    SamplerEquiv { instances: usize, seed: u64 },
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const SAMPLER_EQUIV_TOLERANCE: f64 = 1e-10;
/// Equal-variance shifts make both sides `|m|`.
pub const TALAGRAND_EQUALITY_TOLERANCE: f64 = 1e-9;

pub fn cmd_verify(suite: &Suite, out: &mut dyn Write) -> Result<(), CliError> {
    let mut failures = 0usize;
    match suite {
        Suite::Talagrand { steps, points, m_max } => {
            let sched = NoiseSchedule::build(robustdiff::ScheduleKind::Cosine, *steps)?;
            for scale in [0.5, 1.0, 2.0] {
                for (m, t, c) in talagrand_grid(&sched, *m_max, scale, *points)? {
                    let equal = scale == 1.0;
                    let pass = c.pass && (!equal || (c.lhs - c.rhs).abs() < TALAGRAND_EQUALITY_TOLERANCE);
                    failures += usize::from(!pass);
                    say!(
                        out,
                        "{} talagrand m={m:+.4} t={t} scale={scale}: lhs {:.12e} rhs {:.12e}{}",
                        pass_word(pass),
                        c.lhs,
                        c.rhs,
                        if equal { " (equality case)" } else { "" }
                    );
                }
            }
        }
        Suite::Gradcheck { instances, seed } => {
            let r = gradcheck_suite(*instances, *seed)?;
            let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
            failures += usize::from(!pass);
            say!(
                out,
                "{} gradcheck: {} instances, max relative error {:.3e} (< {GRADCHECK_TOLERANCE:e}), worst {}",
                pass_word(pass),
                r.instances,
                r.max_rel_error,
                r.worst
            );
        }
        Suite::SamplerEquiv { instances, seed } => {
            let worst = sampler_equivalence_suite(*instances, *seed)?;
            let pass = worst < SAMPLER_EQUIV_TOLERANCE;
            failures += usize::from(!pass);
            say!(
                out,
                "{} sampler_equiv: {instances} instances, max |dpm_solver(order 1) - ddim| {worst:.3e} (< {SAMPLER_EQUIV_TOLERANCE:e})",
                pass_word(pass)
            );
        }
        Suite::CdBound { checkpoint, n, seed } => {
            let path = checkpoint
                .as_deref()
                .ok_or_else(|| CliError::Usage("cd_bound needs --checkpoint with a distilled model".into()))?;
            let ck = Checkpoint::load(path)?;
            let ModelState::Consistency(pair) = &ck.model else {
                return Err(CliError::Usage(format!(
                    "cd_bound needs a distilled (consistency) checkpoint; {} holds a noise-prediction model",
                    path.display()
                )));
            };
            let cfg = RunConfig::parse(&ck.config).map_err(|e| CliError::format(path, e.to_string()))?;
            let teacher_text = cfg
                .cd
                .teacher
                .as_deref()
                .ok_or_else(|| CliError::format(path, "checkpoint configuration names no teacher"))?;
            let teacher = TeacherSpec::parse(teacher_text, Path::new(""))?.load(&ck.schedule)?;
            let data = Dataset::generate(&cfg.data.dataset, cfg.data.n, cfg.data.seed)?;
            let loss = evaluate_cd_loss(
                &pair.online,
                &teacher,
                data.samples(),
                &cfg.cd.config(),
                &ck.schedule,
                cfg.cd.eval_rows,
                cfg.train.seed,
            )?;
            let b = verify_cd_bound(&pair.online, &ck.schedule, data.samples(), loss, *n, *seed)?;
            failures += usize::from(!b.pass);
            say!(
                out,
                "{} cd_bound: lhs W1 {:.6} rhs sqrt(T * {:.6e}) = {:.6} slack {}",
                pass_word(b.pass),
                b.lhs,
                loss,
                b.rhs,
                b.slack
            );
        }
    }
    if failures > 0 {
        return Err(CliError::Verification(format!("{failures} check(s) failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn es_schedule_formats() {
        assert_eq!(parse_es_schedule("0.99").unwrap(), EsSchedule::Constant(0.99));
        assert_eq!(parse_es_schedule("[0.9, 1.0]").unwrap(), EsSchedule::PerStep(vec![0.9, 1.0]));
        assert_eq!(parse_es_schedule("0.9\n1.0\n").unwrap(), EsSchedule::PerStep(vec![0.9, 1.0]));
        assert!(parse_es_schedule("x").is_err());
        assert!(parse_es_schedule("").is_err());
    }

    #[test]
    fn stops_fall_on_checkpoint_multiples() {
        assert_eq!(next_stop(0, 500, 1000), 500);
        assert_eq!(next_stop(502, 500, 1000), 1000);
        assert_eq!(next_stop(0, 0, 1000), 1000);
        assert_eq!(next_stop(900, 500, 950), 950);
    }
}
