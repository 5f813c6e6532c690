use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use ssmlab_core::discretize::{kernel_discrepancy_report, FIG_DEGREES, FIG_DTS, FIG_STEPS};
use ssmlab_core::eval::{
    abstract_report, accuracy_grid, dt_histograms, fraction_at_most, grid_report, median, recall_grid,
    recall_test_stream, AccuracyGrid, ConstantScorer, MembershipOracle, PrimacyReport, SuccessorOracle, UniformGuesser,
};
use ssmlab_core::hippo::build_operator;
use ssmlab_core::models::{load_checkpoint, read_manifest, Model};
use ssmlab_core::svg::{heatmap, histogram_pair, line_chart, Series};
use ssmlab_core::tasks::{
    distance_audit, dump_instances, gen_recall, stream_rng, verification_test_family, HoldoutRegistry, TaskInstance,
    TaskKind, TRAIN_DOMAIN,
};
use ssmlab_core::train::{train_loop, training_batch, DtTrajectory, RunOptions, TrainConfig};
use ssmlab_core::{Basis, Error, Real, Result};

use crate::manifest::RunManifest;
use crate::{CmdResult, Failure};

fn parse_basis(s: &str) -> std::result::Result<Basis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
pub struct KernelsArgs {
    /// legs, lagt or fout.
    #[arg(long, default_value = "legs", value_parser = parse_basis)]
    basis: Basis,
    #[arg(long, default_value_t = 64)]
    order: usize,
    /// Comma-separated step sizes.
    #[arg(long, value_delimiter = ',', default_values_t = FIG_DTS)]
    dt: Vec<f64>,
    #[arg(long, default_value_t = FIG_STEPS)]
    steps: usize,
    /// Comma-separated coefficient indices to export.
    #[arg(long, value_delimiter = ',', default_values_t = FIG_DEGREES)]
    degrees: Vec<usize>,
    #[arg(long, default_value = "kernels")]
    out: PathBuf,
}

/// File stem for a step size, stable across platforms: `dt_0.001`.
fn dt_stem(dt: f64) -> String {
    format!("dt_{dt}")
}

pub fn kernels(a: KernelsArgs) -> CmdResult {
    if let Some(dt) = a.dt.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")).into());
    }
    let op = build_operator(a.basis, a.order)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut manifest = RunManifest::new(
        &a.out,
        "kernels",
        serde_json::json!({
            "basis": a.basis, "order": a.order, "dt": a.dt, "steps": a.steps, "degrees": a.degrees,
        }),
    );
    manifest.begin("kernels");
    let table = kernel_discrepancy_report(&op, &a.dt, a.steps, &a.degrees)?;
    for sweep in &table.sweeps {
        let stem = dt_stem(sweep.dt);
        let csv_path = a.out.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(Error::from)?;
        for row in sweep.rows(&table.degrees) {
            w.serialize(row).map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
        manifest.record(&csv_path);

        // The discrete kernel carries a factor Δt; plot it per unit time.
        let labels: Vec<(String, String)> = table
            .degrees
            .iter()
            .map(|n| (format!("K n={n}"), format!("K̄/Δt n={n}")))
            .collect();
        let mut series = Vec::new();
        for (&n, (lc, ld)) in table.degrees.iter().zip(&labels) {
            let t = |j: usize| j as f64 * sweep.dt;
            series.push(Series {
                label: lc,
                points: sweep
                    .continuous
                    .iter()
                    .enumerate()
                    .map(|(j, k)| (t(j), k[n].re))
                    .collect(),
                dashed: false,
            });
            series.push(Series {
                label: ld,
                points: sweep
                    .discrete
                    .iter()
                    .enumerate()
                    .map(|(j, k)| (t(j), k[n].re / sweep.dt))
                    .collect(),
                dashed: true,
            });
        }
        let svg_path = a.out.join(format!("{stem}.svg"));
        let title = format!("{} N={} Δt={}", a.basis.name(), a.order, sweep.dt);
        fs::write(&svg_path, line_chart(&series, &title, "τ", "kernel")).map_err(Error::from)?;
        manifest.record(&svg_path);
    }
    let summary = a.out.join("summary.json");
    write_json(&summary, &table.summary())?;
    manifest.record(&summary);
    Ok(manifest.write()?)
}

#[derive(Args)]
pub struct TasksArgs {
    /// Training config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, `key=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training instances to dump.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value = "tasks")]
    out: PathBuf,
}

pub fn tasks(a: TasksArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut manifest = RunManifest::new(&a.out, "tasks", serde_json::to_value(&cfg).map_err(Error::from)?);
    manifest.seeds.push(cfg.seed);
    manifest.begin("generate");
    let mut train = Vec::with_capacity(a.count);
    let mut test = Vec::new();
    match cfg.task {
        TaskKind::Verification => {
            let reg = cfg.registry()?;
            let path = a.out.join("registry.json");
            reg.save(&path)?;
            manifest.record(&path);
            let mut it = 0;
            while train.len() < a.count {
                train.extend(training_batch(&cfg, Some(&reg), it)?);
                it += 1;
            }
            train.truncate(a.count);
            test = verification_test_family(&reg, 0, cfg.seed);
        }
        TaskKind::Recall => {
            let mut rng = stream_rng(cfg.seed, TRAIN_DOMAIN, 0);
            for _ in 0..a.count {
                train.push(gen_recall(cfg.seq_len, cfg.vocab, &mut rng)?);
            }
        }
    }
    for (name, set) in [("train_instances.csv", &train), ("test_instances.csv", &test)] {
        if set.is_empty() {
            continue;
        }
        let path = a.out.join(name);
        dump_instances(&path, set.iter())?;
        manifest.record(&path);
    }
    if cfg.task == TaskKind::Verification {
        let audit = distance_audit(&train, cfg.seq_len)?;
        let path = a.out.join("distance_audit.json");
        write_json(&path, &audit)?;
        manifest.record(&path);
    }
    Ok(manifest.write()?)
}

#[derive(Clone, Debug)]
pub struct SeedList(Vec<u64>);

/// Parses `3`, `0,2,5`, `0..9` or `0..=9`. Ranges include both ends.
fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    parse_seed_vec(s).map(SeedList)
}

fn parse_seed_vec(s: &str) -> std::result::Result<Vec<u64>, String> {
    let bad = || format!("invalid seed list {s:?}");
    if let Some((lo, hi)) = s.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let (lo, hi): (u64, u64) = (
            lo.trim().parse().map_err(|_| bad())?,
            hi.trim().parse().map_err(|_| bad())?,
        );
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed list, e.g. `0..9` for ten runs. Overrides the config seed.
    #[arg(long, alias = "seed", value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    /// Keep A and B at their HiPPO initialization.
    #[arg(long)]
    freeze_ab: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Suppress per-cadence progress lines on stderr.
    #[arg(long)]
    quiet: bool,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn last_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin"))
        })
        .collect();
    found.sort();
    found.pop()
}

pub fn train(a: TrainArgs, workers: usize) -> CmdResult {
    let mut base = load_config(a.config.as_deref(), &a.overrides)?;
    if a.freeze_ab {
        base.freeze_ab = true;
    }
    base.validate()?;
    let seeds = a.seeds.clone().map(|s| s.0).unwrap_or_else(|| vec![base.seed]);
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut manifest = RunManifest::new(&a.out, "train", serde_json::to_value(&base).map_err(Error::from)?);
    manifest.seeds = seeds.clone();

    let run = |seed: u64| -> (u64, std::time::Duration, Result<Vec<PathBuf>>) {
        let cfg = TrainConfig { seed, ..base.clone() };
        let opts = RunOptions {
            out_dir: Some(seed_dir(&a.out, seed)),
            prefetch: usize::from(workers > 1),
            verbose: !a.quiet,
        };
        let t0 = std::time::Instant::now();
        let out = match a.precision {
            Precision::F32 => train_loop::<f32>(&cfg, &opts).map(|o| o.checkpoints),
            Precision::F64 => train_loop::<f64>(&cfg, &opts).map(|o| o.checkpoints),
        };
        (seed, t0.elapsed(), out)
    };
    let results: Vec<_> = if workers > 1 && seeds.len() > 1 {
        seeds.par_iter().map(|&s| run(s)).collect()
    } else {
        seeds.iter().map(|&s| run(s)).collect()
    };

    for (seed, elapsed, result) in results {
        let dir = seed_dir(&a.out, seed);
        match result {
            Ok(checkpoints) => {
                manifest.stages.push(crate::manifest::Stage {
                    name: format!("train seed {seed}"),
                    seconds: elapsed.as_secs_f64(),
                });
                for name in ["config.toml", "registry.json", "metrics.csv", "dt_log.csv"] {
                    if dir.join(name).exists() {
                        manifest.record(&dir.join(name));
                    }
                }
                for c in &checkpoints {
                    manifest.record(c);
                }
                if let (true, Some(first)) = (manifest.frozen.is_empty(), checkpoints.first()) {
                    let (m, _) = read_manifest(first)?;
                    manifest.frozen = m.arrays.into_iter().filter(|a| !a.trainable).map(|a| a.name).collect();
                }
            }
            Err(error) => {
                let note = match (&error, last_checkpoint(&dir)) {
                    (Error::Divergence { .. }, Some(p)) => Some(format!("last good checkpoint: {}", p.display())),
                    _ => None,
                };
                return Err(Failure { error, note });
            }
        }
    }
    Ok(manifest.write()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Oracle {
    /// Verification: answers from the study set.
    Membership,
    /// Verification: always 0.5, so every query counts as "absent".
    Constant,
    /// Recall: the true successor.
    Successor,
    /// Recall: uniform guesses.
    Uniform,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score. Not needed with `--oracle`.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Holdout registry; defaults to `registry.json` next to the checkpoint.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Expected run config; the checkpoint must match its L, K, H and N.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Score a harness stub instead of a model.
    #[arg(long, value_enum)]
    oracle: Option<Oracle>,
    /// Number of held-out sets to score (default: all).
    #[arg(long)]
    sets: Option<usize>,
    /// Recall test instances.
    #[arg(long, default_value_t = 4096)]
    count: usize,
    /// Test-stream seed (default: the run's seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn mismatch(what: &str, a: impl std::fmt::Display, b: impl std::fmt::Display) -> Error {
    Error::Mismatch(format!("{what}: {a} vs {b}"))
}

fn check_same_shape(cfg: &TrainConfig, other: &TrainConfig, other_name: &str) -> Result<()> {
    let pairs = [
        ("L", cfg.seq_len, other.seq_len),
        ("K", cfg.vocab, other.vocab),
        ("H", cfg.channels, other.channels),
        ("N", cfg.order, other.order),
    ];
    for (name, a, b) in pairs {
        if a != b {
            return Err(mismatch(
                &format!("checkpoint and {other_name} disagree on {name}"),
                a,
                b,
            ));
        }
    }
    if cfg.task != other.task || cfg.core != other.core {
        return Err(Error::Mismatch(format!(
            "checkpoint and {other_name} disagree on task or core"
        )));
    }
    Ok(())
}

fn test_stream(cfg: &TrainConfig, registry: Option<&HoldoutRegistry>, a: &EvalArgs) -> Result<Vec<TaskInstance>> {
    let seed = a.seed.unwrap_or(cfg.seed);
    match (cfg.task, registry) {
        (TaskKind::Verification, Some(reg)) => {
            if reg.seq_len != cfg.seq_len || reg.vocab != cfg.vocab {
                return Err(mismatch(
                    "registry (L, K) differs from the run",
                    format!("({}, {})", reg.seq_len, reg.vocab),
                    format!("({}, {})", cfg.seq_len, cfg.vocab),
                ));
            }
            let sets = a.sets.unwrap_or(reg.len()).min(reg.len());
            Ok((0..sets).flat_map(|i| verification_test_family(reg, i, seed)).collect())
        }
        (TaskKind::Verification, None) => Err(Error::Input("verification eval needs a registry".into())),
        (TaskKind::Recall, _) => recall_test_stream(cfg.seq_len, cfg.vocab, a.count, seed),
    }
}

fn score_model<T: Real>(
    model: &Model<T>,
    instances: &[TaskInstance],
    batch: usize,
) -> Result<(AccuracyGrid, PrimacyReport)> {
    let grid = match model.spec.task {
        TaskKind::Verification => accuracy_grid(model, instances, batch)?,
        TaskKind::Recall => recall_grid(model, instances, batch)?,
    };
    let report = abstract_report(&grid, model)?;
    Ok((grid, report))
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let expected = match (&a.config, a.overrides.is_empty()) {
        (None, true) => None,
        (path, _) => Some(load_config(path.as_deref(), &a.overrides)?),
    };
    let ckpt_cfg = match &a.checkpoint {
        Some(path) => {
            let (m, _) = read_manifest(path)?;
            let cfg: TrainConfig = serde_json::from_value(m.config.clone()).map_err(|e| Error::Format {
                path: path.clone(),
                msg: format!("config echo: {e}"),
            })?;
            if let Some(exp) = &expected {
                check_same_shape(&cfg, exp, "config")?;
            }
            Some((cfg, m.dtype))
        }
        None => None,
    };
    let registry_path = a
        .registry
        .clone()
        .or_else(|| a.checkpoint.as_ref().map(|c| c.with_file_name("registry.json")));
    let registry = match &registry_path {
        Some(p) if p.exists() || a.registry.is_some() => Some(HoldoutRegistry::load(p)?),
        _ => None,
    };
    let cfg = match (&ckpt_cfg, &expected, &registry) {
        (Some((c, _)), _, _) => c.clone(),
        (None, Some(c), _) => c.clone(),
        (None, None, Some(reg)) => TrainConfig {
            seq_len: reg.seq_len,
            vocab: reg.vocab,
            seed: reg.seed,
            ..TrainConfig::default()
        },
        (None, None, None) => TrainConfig::default(),
    };
    let registry = match (cfg.task, registry) {
        (TaskKind::Verification, None) if a.oracle.is_some() => Some(cfg.registry()?),
        (_, r) => r,
    };

    let out = a
        .out
        .clone()
        .or_else(|| a.checkpoint.as_ref().and_then(|c| c.parent().map(Path::to_path_buf)))
        .unwrap_or_else(|| PathBuf::from("eval"));
    fs::create_dir_all(&out).map_err(Error::from)?;
    let mut manifest = RunManifest::new(&out, "eval", serde_json::to_value(&cfg).map_err(Error::from)?);
    manifest.seeds.push(cfg.seed);
    manifest.begin("test stream");
    let instances = test_stream(&cfg, registry.as_ref(), &a)?;
    manifest.begin("score");

    let (grid, report) = match (a.oracle, &ckpt_cfg) {
        (Some(o), _) => {
            let grid = match (o, cfg.task) {
                (Oracle::Membership, TaskKind::Verification) => accuracy_grid(&MembershipOracle, &instances, a.batch)?,
                (Oracle::Constant, TaskKind::Verification) => accuracy_grid(&ConstantScorer(0.5), &instances, a.batch)?,
                (Oracle::Successor, TaskKind::Recall) => recall_grid(&SuccessorOracle, &instances, a.batch)?,
                (Oracle::Uniform, TaskKind::Recall) => recall_grid(
                    &UniformGuesser {
                        vocab: cfg.vocab,
                        seed: cfg.seed,
                    },
                    &instances,
                    a.batch,
                )?,
                (o, t) => return Err(Error::Config(format!("oracle {o:?} does not apply to the {t} task")).into()),
            };
            let report = grid_report(&grid, cfg.task)?;
            (grid, report)
        }
        (None, Some((_, dtype))) => {
            let path = a.checkpoint.as_ref().expect("checkpoint is required without an oracle");
            match dtype.as_str() {
                "f32" => score_model(&load_checkpoint::<f32>(path)?.0, &instances, a.batch)?,
                "f64" => score_model(&load_checkpoint::<f64>(path)?.0, &instances, a.batch)?,
                other => {
                    return Err(Error::Format {
                        path: path.clone(),
                        msg: format!("unsupported dtype {other}"),
                    }
                    .into())
                }
            }
        }
        (None, None) => unreachable!("clap requires a checkpoint or an oracle"),
    };
    manifest.begin("write");
    let grid_path = out.join("grid.csv");
    grid.write_csv(&grid_path)?;
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    let title = format!("{} L={} accuracy", cfg.task, cfg.seq_len);
    let heat_path = out.join("heatmap.svg");
    fs::write(&heat_path, heatmap(&grid, &title)).map_err(Error::from)?;
    let curves_path = out.join("curves.svg");
    fs::write(&curves_path, curves_svg(&[&report], &report.theoretical_curve)).map_err(Error::from)?;
    for p in [&grid_path, &report_path, &heat_path, &curves_path] {
        manifest.record(p);
    }
    Ok(manifest.write()?)
}

/// Normalized row-marginal recall against the kernel weight curve, both by
/// presentation position.
fn curves_svg(reports: &[&PrimacyReport], theory: &[f64]) -> String {
    let labels: Vec<String> = (0..reports.len())
        .map(|i| {
            if reports.len() == 1 {
                "recall".into()
            } else {
                format!("recall run {i}")
            }
        })
        .collect();
    let mut series: Vec<Series> = reports
        .iter()
        .zip(&labels)
        .map(|(r, label)| Series {
            label,
            points: r
                .recall_curve_normalized
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i as f64, v)))
                .collect(),
            dashed: false,
        })
        .collect();
    if !theory.is_empty() {
        series.push(Series {
            label: "kernel weight",
            points: theory.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
            dashed: true,
        });
    }
    line_chart(
        &series,
        "recall vs. kernel weight",
        "presentation position",
        "normalized",
    )
}

#[derive(Args)]
pub struct ReportArgs {
    /// Per-seed run directories, each holding `config.toml`, `dt_log.csv`
    /// and an evaluated `report.json`.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Bins for the Δt histograms.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self {
            mean,
            sd: var.sqrt(),
            n,
        })
    }
}

#[derive(Debug, Serialize)]
struct DtShift {
    initial_median: f64,
    final_median: f64,
    /// Fractions of channels (pooled over seeds) with Δt at or below the
    /// initial median, before and after training.
    below_initial_median: (f64, f64),
    at_most_0_03: (f64, f64),
}

#[derive(Debug, Serialize)]
struct Aggregate {
    task: TaskKind,
    seq_len: usize,
    seeds: Vec<u64>,
    primacy_index: MeanSd,
    primacy_per_seed: Vec<f64>,
    accuracy: Option<MeanSd>,
    recall_curve: Vec<Option<MeanSd>>,
    theoretical_curve: Vec<f64>,
    dt: Option<DtShift>,
}

pub fn report(a: ReportArgs) -> CmdResult {
    if a.runs.is_empty() {
        return Err(Error::Config("no run directories given".into()).into());
    }
    let mut configs = Vec::new();
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for dir in &a.runs {
        let cfg = TrainConfig::load(&dir.join("config.toml")).map_err(|e| match e {
            Error::Config(msg) => Error::Format {
                path: dir.join("config.toml"),
                msg,
            },
            other => other,
        })?;
        let text = fs::read_to_string(dir.join("report.json")).map_err(Error::from)?;
        let rep: PrimacyReport = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: dir.join("report.json"),
            msg: e.to_string(),
        })?;
        let dt_path = dir.join("dt_log.csv");
        if dt_path.exists() {
            logs.push(DtTrajectory::read_csv(&dt_path, cfg.seed)?);
        }
        configs.push(cfg);
        reports.push(rep);
    }
    let first = TrainConfig {
        seed: 0,
        ..configs[0].clone()
    };
    for (dir, cfg) in a.runs.iter().zip(&configs) {
        if (TrainConfig { seed: 0, ..cfg.clone() }) != first {
            return Err(Error::Mismatch(format!(
                "{} was trained with a different config than {}",
                dir.display(),
                a.runs[0].display()
            ))
            .into());
        }
    }
    let mut seeds: Vec<u64> = configs.iter().map(|c| c.seed).collect();
    seeds.dedup();
    if seeds.len() != configs.len() {
        return Err(Error::Input("runs share a seed".into()).into());
    }

    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut manifest = RunManifest::new(&a.out, "report", serde_json::to_value(&first).map_err(Error::from)?);
    manifest.seeds = seeds.clone();
    manifest.begin("aggregate");

    let l = first.seq_len;
    let primacy: Vec<f64> = reports.iter().map(|r| r.primacy_index).collect();
    let acc: Vec<f64> = reports.iter().filter_map(|r| r.overall_accuracy).collect();
    let recall_curve = (0..l)
        .map(|i| {
            let v: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.recall_curve.get(i).copied().flatten())
                .collect();
            MeanSd::of(&v)
        })
        .collect();
    let theoretical_curve = {
        let curves: Vec<&Vec<f64>> = reports
            .iter()
            .map(|r| &r.theoretical_curve)
            .filter(|c| c.len() == l)
            .collect();
        if curves.is_empty() {
            Vec::new()
        } else {
            (0..l)
                .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
                .collect()
        }
    };
    let dt = if logs.len() == configs.len() {
        let initial: Vec<f64> = logs.iter().flat_map(|l| l.initial()).collect();
        let last: Vec<f64> = logs.iter().flat_map(|l| l.last()).collect();
        match (median(&initial), median(&last)) {
            (Some(m0), Some(m1)) => Some(DtShift {
                initial_median: m0,
                final_median: m1,
                below_initial_median: (fraction_at_most(&initial, m0), fraction_at_most(&last, m0)),
                at_most_0_03: (fraction_at_most(&initial, 0.03), fraction_at_most(&last, 0.03)),
            }),
            _ => None,
        }
    } else {
        None
    };
    let agg = Aggregate {
        task: first.task,
        seq_len: l,
        seeds,
        primacy_index: MeanSd::of(&primacy).expect("at least one run"),
        primacy_per_seed: primacy,
        accuracy: MeanSd::of(&acc),
        recall_curve,
        theoretical_curve,
        dt,
    };
    let agg_path = a.out.join("aggregate.json");
    write_json(&agg_path, &agg)?;
    manifest.record(&agg_path);

    manifest.begin("figures");
    let curves = a.out.join("curves.svg");
    let refs: Vec<&PrimacyReport> = reports.iter().collect();
    fs::write(&curves, curves_svg(&refs, &agg.theoretical_curve)).map_err(Error::from)?;
    manifest.record(&curves);
    if logs.len() == configs.len() && !logs.is_empty() {
        let h = dt_histograms(&logs, a.bins)?;
        for s in &h.per_seed {
            let path = a.out.join(format!("dt_seed_{}.svg", s.seed));
            let title = format!("Δt, seed {}", s.seed);
            fs::write(&path, histogram_pair(&s.initial, &s.last, ("initial", "final"), &title)).map_err(Error::from)?;
            manifest.record(&path);
        }
        let path = a.out.join("dt_pooled.svg");
        fs::write(
            &path,
            histogram_pair(&h.initial, &h.last, ("initial", "final"), "Δt, all seeds"),
        )
        .map_err(Error::from)?;
        manifest.record(&path);
        let path = a.out.join("dt_histograms.json");
        write_json(&path, &h)?;
        manifest.record(&path);
    }
    Ok(manifest.write()?)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Base config from a file (or defaults), then `key=value` overrides. Values
/// that are not valid TOML are taken as strings, so `task=recall` works.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => TrainConfig::default().to_toml(),
    };
    let mut table: toml::Table = toml::from_str(&base).map_err(|e| Error::Config(e.to_string()))?;
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), value);
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = TrainConfig::from_toml(&text)?;
    cfg.validate()?;
    Ok(cfg)
}
