//! Task models: shared token embedding, a sequence core, a pointwise
//! activation and a linear readout, with masked losses and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::hippo::{build_operator, dplr_decompose, Basis};
use crate::lstm::{LstmCache, LstmParams};
use crate::params::{prefixed, prefixed_mut, Parameters, TensorView, TensorViewMut};
use crate::real::Real;
use crate::ssm_core::{ConvCache, SsmLayerParams, Trainable};
use crate::tasks::{stream_rng, TaskInstance, TaskKind};

/// Anything that maps `[B, T, D]` to `[B, T, D]` with an exact reverse pass.
/// The training loop is written once against this trait.
pub trait SequenceCore<T: Real>: Parameters<T> {
    type Cache;

    fn width(&self) -> usize;
    fn forward(&self, x: ArrayView3<T>) -> Result<(Array3<T>, Self::Cache)>;
    fn backward(&self, cache: &Self::Cache, dy: ArrayView3<T>) -> Result<(Self, Array3<T>)>;

    /// Project parameters back onto their feasible set after an update.
    fn project(&mut self) {}
}

impl<T: Real> SequenceCore<T> for SsmLayerParams<T> {
    type Cache = ConvCache<T>;

    fn width(&self) -> usize {
        self.channels
    }

    fn forward(&self, x: ArrayView3<T>) -> Result<(Array3<T>, ConvCache<T>)> {
        self.forward_conv_cached(x)
    }

    fn backward(&self, cache: &ConvCache<T>, dy: ArrayView3<T>) -> Result<(Self, Array3<T>)> {
        self.backward_conv(cache, dy)
    }

    fn project(&mut self) {
        self.clamp_stability();
    }
}

impl<T: Real> SequenceCore<T> for LstmParams<T> {
    type Cache = LstmCache<T>;

    fn width(&self) -> usize {
        self.hidden_dim()
    }

    fn forward(&self, x: ArrayView3<T>) -> Result<(Array3<T>, LstmCache<T>)> {
        LstmParams::forward(self, x)
    }

    fn backward(&self, cache: &LstmCache<T>, dy: ArrayView3<T>) -> Result<(Self, Array3<T>)> {
        LstmParams::backward(self, cache, dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    Ssm,
    Lstm,
}

impl std::str::FromStr for CoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssm" | "s4" => Ok(Self::Ssm),
            "lstm" => Ok(Self::Lstm),
            other => Err(config(format!("unknown core {other:?}"))),
        }
    }
}

/// The runtime-selected core stored in checkpoints.
#[derive(Clone, Debug)]
pub enum Core<T: Real> {
    Ssm(SsmLayerParams<T>),
    Lstm(LstmParams<T>),
}

pub enum CoreCache<T: Real> {
    Ssm(ConvCache<T>),
    Lstm(LstmCache<T>),
}

impl<T: Real> Parameters<T> for Core<T> {
    fn tensors(&self) -> Vec<TensorView<'_, T>> {
        match self {
            Core::Ssm(p) => p.tensors(),
            Core::Lstm(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, T>> {
        match self {
            Core::Ssm(p) => p.tensors_mut(),
            Core::Lstm(p) => p.tensors_mut(),
        }
    }
}

impl<T: Real> SequenceCore<T> for Core<T> {
    type Cache = CoreCache<T>;

    fn width(&self) -> usize {
        match self {
            Core::Ssm(p) => p.width(),
            Core::Lstm(p) => SequenceCore::width(p),
        }
    }

    fn forward(&self, x: ArrayView3<T>) -> Result<(Array3<T>, CoreCache<T>)> {
        match self {
            Core::Ssm(p) => SequenceCore::forward(p, x).map(|(y, c)| (y, CoreCache::Ssm(c))),
            Core::Lstm(p) => SequenceCore::forward(p, x).map(|(y, c)| (y, CoreCache::Lstm(c))),
        }
    }

    fn backward(&self, cache: &CoreCache<T>, dy: ArrayView3<T>) -> Result<(Self, Array3<T>)> {
        match (self, cache) {
            (Core::Ssm(p), CoreCache::Ssm(c)) => SequenceCore::backward(p, c, dy).map(|(g, dx)| (Core::Ssm(g), dx)),
            (Core::Lstm(p), CoreCache::Lstm(c)) => SequenceCore::backward(p, c, dy).map(|(g, dx)| (Core::Lstm(g), dx)),
            _ => Err(Error::Contract("core cache belongs to a different core".into())),
        }
    }

    fn project(&mut self) {
        match self {
            Core::Ssm(p) => p.project(),
            Core::Lstm(p) => p.project(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Self::Gelu),
            "identity" | "none" => Ok(Self::Identity),
            other => Err(config(format!("unknown activation {other:?}"))),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Self::Identity => x,
            Self::Gelu => {
                let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
                T::of(0.5) * x * (T::one() + u.tanh())
            }
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Self::Identity => T::one(),
            Self::Gelu => {
                let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
                let t = u.tanh();
                let du = T::of(GELU_K) * (T::one() + T::of(3.0 * GELU_C) * x * x);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
            }
        }
    }
}

/// Everything needed to rebuild a model's shape, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: TaskKind,
    pub core: CoreKind,
    pub vocab: usize,
    pub dim: usize,
    pub order: usize,
    pub basis: Basis,
    pub activation: Activation,
    pub residual: bool,
    pub freeze_ab: bool,
    pub freeze_dt: bool,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl ModelSpec {
    pub fn out_dim(&self) -> usize {
        match self.task {
            TaskKind::Verification => 1,
            TaskKind::Recall => self.vocab,
        }
    }

    pub fn trainable(&self) -> Trainable {
        Trainable {
            lambda: !self.freeze_ab,
            p: !self.freeze_ab,
            b: !self.freeze_ab,
            log_dt: !self.freeze_dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_min > 0.0 && self.dt_min < self.dt_max && self.dt_max.is_finite()) {
            return Err(config(format!(
                "dt range must satisfy 0 < low < high, got ({}, {})",
                self.dt_min, self.dt_max
            )));
        }
        if self.vocab == 0 || self.dim == 0 || (self.core == CoreKind::Ssm && self.order == 0) {
            return Err(config("vocab, dim and order must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real, K = Core<T>> {
    pub spec: ModelSpec,
    /// `vocab × dim`, shared by study items and queries.
    pub embedding: Array2<T>,
    pub core: K,
    /// `dim × out`.
    pub readout_w: Array2<T>,
    pub readout_b: Array1<T>,
}

pub struct ModelCache<T: Real, C> {
    tokens: Array2<usize>,
    core: C,
    pre: Array3<T>,
    act: Array3<T>,
}

impl<T: Real, K: SequenceCore<T>> Parameters<T> for Model<T, K> {
    fn tensors(&self) -> Vec<TensorView<'_, T>> {
        let mut v = vec![TensorView {
            name: "embedding".into(),
            shape: self.embedding.shape().to_vec(),
            data: self.embedding.as_slice().expect("standard layout"),
            trainable: true,
        }];
        v.extend(prefixed("core", self.core.tensors()));
        v.push(TensorView {
            name: "readout.w".into(),
            shape: self.readout_w.shape().to_vec(),
            data: self.readout_w.as_slice().expect("standard layout"),
            trainable: true,
        });
        v.push(TensorView {
            name: "readout.b".into(),
            shape: self.readout_b.shape().to_vec(),
            data: self.readout_b.as_slice().expect("standard layout"),
            trainable: true,
        });
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, T>> {
        let mut v = vec![TensorViewMut {
            name: "embedding".into(),
            data: self.embedding.as_slice_mut().expect("standard layout"),
            trainable: true,
        }];
        v.extend(prefixed_mut("core", self.core.tensors_mut()));
        v.push(TensorViewMut {
            name: "readout.w".into(),
            data: self.readout_w.as_slice_mut().expect("standard layout"),
            trainable: true,
        });
        v.push(TensorViewMut {
            name: "readout.b".into(),
            data: self.readout_b.as_slice_mut().expect("standard layout"),
            trainable: true,
        });
        v
    }
}

impl<T: Real, K: SequenceCore<T>> Model<T, K> {
    pub fn vocab(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.readout_w.ncols()
    }

    /// Logits `[B, T, out]` for every position of every stream.
    pub fn forward(&self, tokens: ArrayView2<usize>) -> Result<(Array3<T>, ModelCache<T, K::Cache>)> {
        let (batch, len) = tokens.dim();
        let (vocab, dim) = self.embedding.dim();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let mut x = Array3::<T>::zeros((batch, len, dim));
        for ((b, t), &tok) in tokens.indexed_iter() {
            x.slice_mut(ndarray::s![b, t, ..]).assign(&self.embedding.row(tok));
        }
        let (pre, core) = self.core.forward(x.view())?;
        let act = pre.mapv(|v| self.spec.activation.apply(v));
        let out = self.out_dim();
        let flat = act
            .view()
            .into_shape_with_order((batch * len, dim))
            .expect("contiguous");
        let mut logits = Array2::<T>::zeros((batch * len, out));
        general_mat_mul(T::one(), &flat, &self.readout_w, T::zero(), &mut logits);
        logits += &self.readout_b;
        let logits = logits.into_shape_with_order((batch, len, out)).expect("contiguous");
        Ok((
            logits,
            ModelCache {
                tokens: tokens.to_owned(),
                core,
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, cache: &ModelCache<T, K::Cache>, dlogits: ArrayView3<T>) -> Result<Self>
    where
        Self: Clone,
    {
        let (batch, len) = cache.tokens.dim();
        let dim = self.dim();
        let out = self.out_dim();
        if dlogits.dim() != (batch, len, out) {
            return Err(Error::Contract("logit gradient does not match the cached batch".into()));
        }
        let dl = dlogits.as_standard_layout();
        let dl = dl.view().into_shape_with_order((batch * len, out)).expect("contiguous");
        let act = cache
            .act
            .view()
            .into_shape_with_order((batch * len, dim))
            .expect("contiguous");
        let mut readout_w = Array2::<T>::zeros((dim, out));
        general_mat_mul(T::one(), &act.t(), &dl, T::zero(), &mut readout_w);
        let readout_b = dl.sum_axis(Axis(0));
        let mut dact = Array2::<T>::zeros((batch * len, dim));
        general_mat_mul(T::one(), &dl, &self.readout_w.t(), T::zero(), &mut dact);
        let mut dpre = dact.into_shape_with_order((batch, len, dim)).expect("contiguous");
        dpre.zip_mut_with(&cache.pre, |d, &p| *d *= self.spec.activation.derivative(p));
        let (core, dx) = self.core.backward(&cache.core, dpre.view())?;
        let mut embedding = Array2::<T>::zeros(self.embedding.dim());
        for ((b, t), &tok) in cache.tokens.indexed_iter() {
            let mut row = embedding.row_mut(tok);
            row += &dx.slice(ndarray::s![b, t, ..]);
        }
        Ok(Self {
            spec: self.spec.clone(),
            embedding,
            core,
            readout_w,
            readout_b,
        })
    }

    /// Sigmoid probability for every query of every instance.
    pub fn forward_verification(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<f64>>> {
        let batch = Batch::new(instances, TaskKind::Verification)?;
        let (logits, _) = self.forward(batch.tokens.view())?;
        Ok((0..batch.len())
            .map(|b| {
                (0..batch.queries())
                    .map(|q| sigmoid(logits[[b, batch.query_start + q, 0]].f64()))
                    .collect()
            })
            .collect())
    }

    /// Softmax distribution over the vocabulary for every recall query,
    /// `queries × vocab` per instance.
    pub fn forward_recall(&self, instances: &[TaskInstance]) -> Result<Vec<Array2<f64>>> {
        let batch = Batch::new(instances, TaskKind::Recall)?;
        let (logits, _) = self.forward(batch.tokens.view())?;
        let out = self.out_dim();
        Ok((0..batch.len())
            .map(|b| {
                let mut dist = Array2::<f64>::zeros((batch.queries(), out));
                for q in 0..batch.queries() {
                    let row = logits.slice(ndarray::s![b, batch.query_start + q, ..]);
                    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for (k, v) in row.iter().enumerate() {
                        let e = (v.f64() - max).exp();
                        dist[[q, k]] = e;
                        total += e;
                    }
                    dist.row_mut(q).mapv_inplace(|e| e / total);
                }
                dist
            })
            .collect())
    }

    /// Apply post-update projections (eigenvalue clamp).
    pub fn project(&mut self) {
        self.core.project();
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Token streams and query targets of equal-length instances.
#[derive(Clone, Debug)]
pub struct Batch {
    pub kind: TaskKind,
    pub tokens: Array2<usize>,
    /// `[B, queries]`: membership bits or successor tokens.
    pub targets: Array2<u32>,
    /// Stream index of the first query (the study length).
    pub query_start: usize,
}

impl Batch {
    pub fn new(instances: &[TaskInstance], kind: TaskKind) -> Result<Self> {
        let first = instances.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (l, q) = (first.study.len(), first.queries.len());
        let mut tokens = Array2::zeros((instances.len(), l + q));
        let mut targets = Array2::zeros((instances.len(), q));
        for (b, inst) in instances.iter().enumerate() {
            if inst.kind != kind {
                return Err(Error::Input(format!("expected a {kind} instance, got {}", inst.kind)));
            }
            if inst.study.len() != l || inst.queries.len() != q || inst.labels.len() != q {
                return Err(Error::Contract("instances in a batch must share shapes".into()));
            }
            for (t, tok) in inst.tokens().enumerate() {
                tokens[[b, t]] = tok as usize;
            }
            for (j, &lab) in inst.labels.iter().enumerate() {
                targets[[b, j]] = lab;
            }
        }
        Ok(Self {
            kind,
            tokens,
            targets,
            query_start: l,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queries(&self) -> usize {
        self.targets.ncols()
    }
}

pub struct LossOutput<T> {
    /// Mean over scored queries.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    /// Gradient of the mean loss; zero at every study position.
    pub dlogits: Array3<T>,
}

/// Mean binary cross-entropy (verification) or token cross-entropy
/// (recall), scored only at query positions.
pub fn masked_loss<T: Real>(logits: ArrayView3<T>, batch: &Batch) -> Result<LossOutput<T>> {
    let (b_n, len, out) = logits.dim();
    if b_n != batch.len() || len != batch.tokens.ncols() {
        return Err(Error::Contract("logits do not match batch".into()));
    }
    let count = b_n * batch.queries();
    let scale = 1.0 / count as f64;
    let mut dlogits = Array3::<T>::zeros((b_n, len, out));
    let (mut loss, mut correct) = (0.0, 0usize);
    for b in 0..b_n {
        for q in 0..batch.queries() {
            let t = batch.query_start + q;
            let target = batch.targets[[b, q]];
            match batch.kind {
                TaskKind::Verification => {
                    let z = logits[[b, t, 0]].f64();
                    let y = target as f64;
                    loss += softplus(z) - y * z;
                    correct += ((z > 0.0) == (target == 1)) as usize;
                    dlogits[[b, t, 0]] = T::of((sigmoid(z) - y) * scale);
                }
                TaskKind::Recall => {
                    let row = logits.slice(ndarray::s![b, t, ..]);
                    let target = target as usize;
                    if target >= out {
                        return Err(Error::Input(format!("target {target} outside {out} classes")));
                    }
                    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
                    let lse = max + total.ln();
                    loss += lse - row[target].f64();
                    let argmax = row
                        .iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |acc, (k, v)| if v.f64() > acc.1 { (k, v.f64()) } else { acc },
                        )
                        .0;
                    correct += (argmax == target) as usize;
                    for (k, v) in row.iter().enumerate() {
                        let p = (v.f64() - lse).exp();
                        let g = p - if k == target { 1.0 } else { 0.0 };
                        dlogits[[b, t, k]] = T::of(g * scale);
                    }
                }
            }
        }
    }
    Ok(LossOutput {
        loss: loss * scale,
        correct,
        count,
        dlogits,
    })
}

const INIT_DOMAIN: u64 = 4;

/// Fresh parameters for `spec`, a deterministic function of `seed`.
pub fn init_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = stream_rng(seed, INIT_DOMAIN, 0);
    let (vocab, dim, out) = (spec.vocab, spec.dim, spec.out_dim());
    let bound = 1.0 / (dim as f64).sqrt();
    // Unit-variance embeddings: at ±1/√dim the readout barely sees the
    // tokens through the core and verification stalls near chance.
    let embedding = Array2::from_shape_simple_fn((vocab, dim), || T::of(rng.sample::<f64, _>(StandardNormal)));
    let core = match spec.core {
        CoreKind::Ssm => {
            let form = dplr_decompose(&build_operator(spec.basis, spec.order)?)?;
            let (lo, hi) = (spec.dt_min.ln(), spec.dt_max.ln());
            let log_dt = (0..dim).map(|_| T::of(rng.random_range(lo..hi))).collect();
            let scale = (0.5 / spec.order as f64).sqrt();
            let c = (0..dim * spec.order)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex::new(T::of(re * scale), T::of(im * scale))
                })
                .collect();
            let mut layer = SsmLayerParams::from_dplr(&form, log_dt, c, spec.trainable());
            layer.residual = spec.residual;
            Core::Ssm(layer)
        }
        CoreKind::Lstm => Core::Lstm(LstmParams::init(dim, dim, &mut rng)),
    };
    let readout_w = Array2::from_shape_simple_fn((dim, out), || T::of(rng.random_range(-bound..bound)));
    let readout_b = Array1::from_shape_simple_fn(out, || T::of(rng.random_range(-bound..bound)));
    Ok(Model {
        spec: spec.clone(),
        embedding,
        core,
        readout_w,
        readout_b,
    })
}

/// A zero-filled model with the right shapes, used as a load target.
fn empty_model<T: Real>(spec: &ModelSpec) -> Result<Model<T>> {
    let mut m = init_model::<T>(spec, 0)?;
    for t in m.tensors_mut() {
        t.data.fill(T::zero());
    }
    Ok(m)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSMCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub element_order: String,
    pub byte_order: String,
    pub iteration: u64,
    pub spec: ModelSpec,
    /// Echo of the run configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

/// `SSMCKPT1`, a little-endian u64 manifest length, the JSON manifest, then
/// every array's raw little-endian elements in manifest order.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    config: serde_json::Value,
    iteration: u64,
) -> Result<()> {
    let tensors = model.tensors();
    let manifest = CheckpointManifest {
        dtype: T::DTYPE.to_string(),
        element_order: "row-major".into(),
        byte_order: "little-endian".into(),
        iteration,
        spec: model.spec.clone(),
        config,
        arrays: tensors
            .iter()
            .map(|t| ArrayEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                trainable: t.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + model.parameter_count() * std::mem::size_of::<T>());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in &tensors {
        if cfg!(target_endian = "little") {
            buf.extend_from_slice(bytemuck::cast_slice(t.data));
        } else {
            for v in t.data {
                buf.extend(bytemuck::bytes_of(v).iter().rev());
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(CheckpointManifest, Vec<u8>)> {
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| fmt(&e.to_string()))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("bad checkpoint magic"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + n).ok_or_else(|| fmt("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(json).map_err(|e| fmt(&format!("manifest: {e}")))?;
    if manifest.byte_order != "little-endian" || manifest.element_order != "row-major" {
        return Err(fmt("unsupported array layout"));
    }
    Ok((manifest, bytes[16 + n..].to_vec()))
}

/// Load a checkpoint into precision `T`, converting from the stored dtype.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Model<T>, CheckpointManifest)> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let (manifest, payload) = read_manifest(path)?;
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(fmt(format!("unsupported dtype {other}"))),
    };
    let mut model = empty_model::<T>(&manifest.spec).map_err(|e| fmt(e.to_string()))?;
    let mut offset = 0;
    {
        let mut targets = model.tensors_mut();
        if targets.len() != manifest.arrays.len() {
            return Err(fmt("array count does not match model spec".into()));
        }
        for (dst, entry) in targets.iter_mut().zip(&manifest.arrays) {
            let n: usize = entry.shape.iter().product();
            if dst.name != entry.name || dst.data.len() != n {
                return Err(fmt(format!("array {} does not match model spec", entry.name)));
            }
            let raw = payload
                .get(offset..offset + n * width)
                .ok_or_else(|| fmt(format!("array {} is truncated", entry.name)))?;
            for (d, chunk) in dst.data.iter_mut().zip(raw.chunks_exact(width)) {
                *d = T::of(if width == 4 {
                    f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(chunk.try_into().expect("8 bytes"))
                });
            }
            offset += n * width;
        }
    }
    if offset != payload.len() {
        return Err(fmt("trailing bytes after the last array".into()));
    }
    Ok((model, manifest))
}
