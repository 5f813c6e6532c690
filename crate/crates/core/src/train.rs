//! Adam with linear warmup and cosine annealing, global-norm clipping,
//! on-the-fly batch generation and Δt trajectory logging.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::hippo::Basis;
use crate::models::{
    init_model, masked_loss, save_checkpoint, Activation, Batch, Core, CoreKind, Model, ModelSpec, SequenceCore,
};
use crate::params::Parameters;
use crate::real::Real;
use crate::tasks::{
    build_holdout, gen_recall, gen_verification_train, stream_rng, HoldoutRegistry, TaskInstance, TaskKind,
    TRAIN_DOMAIN,
};

/// A training run. The TOML config file uses exactly these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub core: CoreKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub channels: usize,
    pub order: usize,
    pub basis: Basis,
    pub activation: Activation,
    pub residual: bool,
    pub dt_min: f64,
    pub dt_max: f64,
    pub freeze_ab: bool,
    pub freeze_dt: bool,
    pub batch_size: usize,
    pub iterations: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub p_replace: f64,
    pub holdout: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Intermediate checkpoints every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Verification,
            core: CoreKind::Ssm,
            seq_len: 32,
            vocab: 512,
            channels: 64,
            order: 32,
            basis: Basis::LegS,
            activation: Activation::Gelu,
            residual: true,
            dt_min: 0.001,
            dt_max: 0.1,
            freeze_ab: true,
            freeze_dt: false,
            batch_size: 64,
            iterations: 20_000,
            peak_lr: 1e-3,
            warmup: 1000,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            p_replace: 0.5,
            holdout: 1024,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.iterations {
            return Err(config(format!(
                "warmup ({}) must be shorter than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        let rates = [self.peak_lr, self.clip, self.eps, 1.0 - self.beta1, 1.0 - self.beta2];
        if rates.iter().any(|r| !(*r > 0.0)) || self.beta1 <= 0.0 || self.beta2 <= 0.0 {
            return Err(config(
                "learning rate, clip, eps and betas must be positive (betas below 1)",
            ));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(config("batch_size and log_every must be positive"));
        }
        match self.task {
            TaskKind::Verification if self.seq_len == 0 || self.seq_len >= self.vocab => {
                return Err(config("verification needs 0 < seq_len < vocab"))
            }
            TaskKind::Recall if self.seq_len < 2 || self.seq_len > self.vocab => {
                return Err(config("recall needs 2 <= seq_len <= vocab"))
            }
            _ => {}
        }
        self.model_spec().validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            task: self.task,
            core: self.core,
            vocab: self.vocab,
            dim: self.channels,
            order: self.order,
            basis: self.basis,
            activation: self.activation,
            residual: self.residual,
            freeze_ab: self.freeze_ab,
            freeze_dt: self.freeze_dt,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
        }
    }

    pub fn registry(&self) -> Result<HoldoutRegistry> {
        build_holdout(self.seq_len, self.vocab, self.holdout, self.seed)
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    if iter < cfg.warmup {
        return peak * iter as f64 / cfg.warmup as f64;
    }
    let span = (cfg.iterations - cfg.warmup).max(1) as f64;
    let progress = ((iter - cfg.warmup) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescale to `max_norm` when the global norm exceeds it. Returns the
/// pre-clip norm.
pub fn clip_gradients<T: Real, P: Parameters<T>>(grads: &mut P, max_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: "non-finite gradient norm".into(),
        });
    }
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    Ok(norm)
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: Parameters<T>>(params: &P, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Frozen tensors are left untouched.
pub fn adam_step<T: Real, P: Parameters<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    if g.len() != p.len() || g.len() != state.m.len() {
        return Err(Error::Contract("gradient structure does not match parameters".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (T::of(state.beta1), T::of(state.beta2), T::of(state.eps));
    let step_size = T::of(lr / bc1);
    let bc2_sqrt = T::of(bc2.sqrt());
    for (((dst, src), m), v) in p.iter_mut().zip(&g).zip(&mut state.m).zip(&mut state.v) {
        if dst.data.len() != src.data.len() || dst.data.len() != m.len() {
            return Err(Error::Contract(format!("shape mismatch in {}", dst.name)));
        }
        if !dst.trainable {
            continue;
        }
        for (((x, &gr), m), v) in dst.data.iter_mut().zip(src.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * gr;
            *v = b2 * *v + (T::one() - b2) * gr * gr;
            *x -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtRecord {
    pub iteration: usize,
    pub channel: usize,
    pub dt: f64,
}

/// Per-channel Δt snapshots, optionally pooled over seeds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DtTrajectory {
    pub seed: u64,
    pub records: Vec<DtRecord>,
}

impl DtTrajectory {
    pub fn iterations(&self) -> Vec<usize> {
        let mut its: Vec<usize> = self.records.iter().map(|r| r.iteration).collect();
        its.dedup();
        its
    }

    /// Δt values of every channel at one logged iteration.
    pub fn at(&self, iteration: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.iteration == iteration)
            .map(|r| r.dt)
            .collect()
    }

    pub fn initial(&self) -> Vec<f64> {
        self.iterations().first().map(|&i| self.at(i)).unwrap_or_default()
    }

    pub fn last(&self) -> Vec<f64> {
        self.iterations().last().map(|&i| self.at(i)).unwrap_or_default()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<DtRecord>, _>>()?;
        Ok(Self { seed, records })
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Deterministic training batch for one iteration.
pub fn training_batch(
    cfg: &TrainConfig,
    registry: Option<&HoldoutRegistry>,
    iteration: usize,
) -> Result<Vec<TaskInstance>> {
    let mut rng = stream_rng(cfg.seed, TRAIN_DOMAIN, iteration as u64);
    (0..cfg.batch_size)
        .map(|_| match (cfg.task, registry) {
            (TaskKind::Verification, Some(reg)) => {
                gen_verification_train(cfg.seq_len, cfg.vocab, cfg.p_replace, reg, &mut rng)
            }
            (TaskKind::Verification, None) => Err(Error::Contract("verification training needs a registry".into())),
            (TaskKind::Recall, _) => gen_recall(cfg.seq_len, cfg.vocab, &mut rng),
        })
        .collect()
}

pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub grad_norm: f64,
}

/// Forward, masked loss, backward, clip, Adam, projection. Generic over the
/// sequence core so the SSM and LSTM share one loop.
pub fn train_step<T: Real, K: SequenceCore<T> + Clone>(
    model: &mut Model<T, K>,
    adam: &mut AdamState<T>,
    batch: &Batch,
    lr: f64,
    clip: f64,
) -> Result<StepStats> {
    let (logits, cache) = model.forward(batch.tokens.view())?;
    let out = masked_loss(logits.view(), batch)?;
    if !out.loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: "non-finite loss".into(),
        });
    }
    let mut grads = model.backward(&cache, out.dlogits.view())?;
    grads.mask_frozen();
    let grad_norm = clip_gradients(&mut grads, clip)?;
    adam_step(model, &grads, adam, lr)?;
    model.project();
    if !model.all_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: "non-finite parameters after update".into(),
        });
    }
    Ok(StepStats {
        loss: out.loss,
        correct: out.correct,
        count: out.count,
        grad_norm,
    })
}

pub fn log_dt<T: Real>(model: &Model<T>, iteration: usize, out: &mut DtTrajectory) {
    if let Core::Ssm(p) = &model.core {
        for ch in 0..p.channels {
            let dt = p.dt(ch).f64();
            assert!(dt > 0.0, "Δt must stay positive");
            out.records.push(DtRecord {
                iteration,
                channel: ch,
                dt,
            });
        }
    }
}

pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub metrics: Vec<MetricRow>,
    pub dt: DtTrajectory,
    pub registry: Option<HoldoutRegistry>,
    /// Checkpoint files written, in order.
    pub checkpoints: Vec<PathBuf>,
}

/// Options that do not change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where to write checkpoints, logs and the registry.
    pub out_dir: Option<PathBuf>,
    /// Generate batches on a separate thread, this many ahead.
    pub prefetch: usize,
    /// Print a progress line at every log point.
    pub verbose: bool,
}

fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration:07}.bin"))
}

/// The full recipe. On divergence the last good checkpoint is written and
/// the error reports the failing iteration.
pub fn train_loop<T: Real>(cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let registry = match cfg.task {
        TaskKind::Verification => Some(cfg.registry()?),
        TaskKind::Recall => None,
    };
    let mut model = init_model::<T>(&cfg.model_spec(), cfg.seed)?;
    let mut adam = AdamState::new(&model, cfg.beta1, cfg.beta2, cfg.eps);
    let echo = serde_json::to_value(cfg)?;
    let mut checkpoints = Vec::new();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        if let Some(reg) = &registry {
            reg.save(&dir.join("registry.json"))?;
        }
        let p = checkpoint_path(dir, 0);
        save_checkpoint(&p, &model, echo.clone(), 0)?;
        checkpoints.push(p);
    }

    let mut metrics = Vec::new();
    let mut dt = DtTrajectory {
        seed: cfg.seed,
        records: Vec::new(),
    };
    log_dt(&model, 0, &mut dt);

    let result = thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(opts.prefetch.max(1));
        let make = |it: usize| training_batch(cfg, registry.as_ref(), it).and_then(|b| Batch::new(&b, cfg.task));
        let producer = (opts.prefetch > 0).then(|| {
            scope.spawn(move || {
                for it in 0..cfg.iterations {
                    if tx.send(make(it)).is_err() {
                        break;
                    }
                }
            })
        });
        let (mut loss_sum, mut correct, mut count, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for it in 0..cfg.iterations {
            let batch = match producer {
                Some(_) => rx
                    .recv()
                    .map_err(|_| Error::Contract("batch producer stopped".into()))??,
                None => make(it)?,
            };
            let lr = lr_schedule(it, cfg);
            let stats = train_step(&mut model, &mut adam, &batch, lr, cfg.clip).map_err(|e| match e {
                Error::Divergence { what, .. } => Error::Divergence { step: it, what },
                // Parameters that overflow Δt or the resolvent are a blow-up too.
                e @ (Error::SingularResolvent { .. } | Error::Numerical { .. }) => Error::Divergence {
                    step: it,
                    what: e.to_string(),
                },
                other => other,
            })?;
            loss_sum += stats.loss;
            correct += stats.correct;
            count += stats.count;
            steps += 1;
            let done = it + 1;
            if done % cfg.log_every == 0 || done == cfg.iterations {
                let row = MetricRow {
                    iteration: done,
                    lr,
                    loss: loss_sum / steps as f64,
                    train_accuracy: correct as f64 / count as f64,
                };
                if opts.verbose {
                    eprintln!(
                        "iter {:>7}  lr {:.2e}  loss {:.4}  acc {:.4}  |g| {:.3}",
                        row.iteration, row.lr, row.loss, row.train_accuracy, stats.grad_norm
                    );
                }
                metrics.push(row);
                log_dt(&model, done, &mut dt);
                (loss_sum, correct, count, steps) = (0.0, 0, 0, 0);
            }
            if let Some(dir) = &opts.out_dir {
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.iterations {
                    let p = checkpoint_path(dir, done);
                    save_checkpoint(&p, &model, echo.clone(), done as u64)?;
                    checkpoints.push(p);
                }
            }
        }
        drop(rx);
        Ok(())
    });

    if let Some(dir) = &opts.out_dir {
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
        dt.write_csv(&dir.join("dt_log.csv"))?;
        if result.is_ok() {
            let p = checkpoint_path(dir, cfg.iterations);
            save_checkpoint(&p, &model, echo, cfg.iterations as u64)?;
            checkpoints.push(p);
        }
    }
    result?;
    Ok(TrainOutcome {
        model,
        metrics,
        dt,
        registry,
        checkpoints,
    })
}
