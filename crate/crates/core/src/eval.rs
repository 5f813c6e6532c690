//! Positional accuracy grids, the primacy index, Δt histograms and the
//! theory-versus-behaviour comparison.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{bilinear, theoretical_weight_curve, StateSpace};
use crate::error::{Error, Result};
use crate::models::{Core, Model};
use crate::real::Real;
use crate::tasks::{stream_rng, TaskInstance, TaskKind};
use crate::train::DtTrajectory;

/// Scores verification queries with a probability of membership.
pub trait VerificationScorer: Sync {
    fn probabilities(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<f64>>>;
}

/// Predicts one token per recall query.
pub trait RecallScorer: Sync {
    fn predict(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<u32>>>;
}

impl<T: Real> VerificationScorer for Model<T> {
    fn probabilities(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<f64>>> {
        self.forward_verification(instances)
    }
}

impl<T: Real> RecallScorer for Model<T> {
    fn predict(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<u32>>> {
        Ok(self
            .forward_recall(instances)?
            .iter()
            .map(|dist| {
                dist.rows()
                    .into_iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .fold(
                                (0, f64::NEG_INFINITY),
                                |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc },
                            )
                            .0 as u32
                    })
                    .collect()
            })
            .collect())
    }
}

/// Answers from the study set itself; scores perfectly by construction.
pub struct MembershipOracle;

impl VerificationScorer for MembershipOracle {
    fn probabilities(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<f64>>> {
        Ok(instances
            .iter()
            .map(|i| i.queries.iter().map(|q| i.study.contains(q) as u8 as f64).collect())
            .collect())
    }
}

/// Always outputs the same probability.
pub struct ConstantScorer(pub f64);

impl VerificationScorer for ConstantScorer {
    fn probabilities(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<f64>>> {
        Ok(instances.iter().map(|i| vec![self.0; i.queries.len()]).collect())
    }
}

/// Looks up the true successor.
pub struct SuccessorOracle;

impl RecallScorer for SuccessorOracle {
    fn predict(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<u32>>> {
        Ok(instances
            .iter()
            .map(|i| {
                i.queries
                    .iter()
                    .map(|q| {
                        let pos = i.study.iter().position(|s| s == q).expect("query comes from study");
                        i.study[pos + 1]
                    })
                    .collect()
            })
            .collect())
    }
}

/// Uniform guesses over the vocabulary, seeded by the instance content so
/// results do not depend on batching.
pub struct UniformGuesser {
    pub vocab: usize,
    pub seed: u64,
}

impl RecallScorer for UniformGuesser {
    fn predict(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<u32>>> {
        Ok(instances
            .iter()
            .map(|i| {
                let key = i
                    .study
                    .iter()
                    .fold(0u64, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64));
                let mut rng = stream_rng(self.seed, key, 0);
                i.queries
                    .iter()
                    .map(|_| rng.random_range(0..self.vocab as u32))
                    .collect()
            })
            .collect())
    }
}

/// Correct/total counts indexed by (memorization position, query position),
/// plus a separate row for distractor queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub seq_len: usize,
    /// Number of query positions (L for verification, L−1 for recall).
    pub queries: usize,
    /// Row-major `seq_len × queries`.
    pub correct: Vec<u64>,
    pub total: Vec<u64>,
    /// Per query position; empty for recall grids.
    pub distractor_correct: Vec<u64>,
    pub distractor_total: Vec<u64>,
}

impl AccuracyGrid {
    pub fn new(seq_len: usize, queries: usize, distractors: bool) -> Self {
        let d = if distractors { queries } else { 0 };
        Self {
            seq_len,
            queries,
            correct: vec![0; seq_len * queries],
            total: vec![0; seq_len * queries],
            distractor_correct: vec![0; d],
            distractor_total: vec![0; d],
        }
    }

    pub fn has_distractor_row(&self) -> bool {
        !self.distractor_total.is_empty()
    }

    fn record(&mut self, row: usize, col: usize, ok: bool) {
        let i = row * self.queries + col;
        self.total[i] += 1;
        self.correct[i] += ok as u64;
    }

    fn record_distractor(&mut self, col: usize, ok: bool) {
        self.distractor_total[col] += 1;
        self.distractor_correct[col] += ok as u64;
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if (self.seq_len, self.queries, self.has_distractor_row())
            != (other.seq_len, other.queries, other.has_distractor_row())
        {
            return Err(Error::Mismatch("grids have different shapes".into()));
        }
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
        for (a, b) in self.distractor_correct.iter_mut().zip(&other.distractor_correct) {
            *a += b;
        }
        for (a, b) in self.distractor_total.iter_mut().zip(&other.distractor_total) {
            *a += b;
        }
        Ok(())
    }

    /// `None` for cells no instance exercised.
    pub fn cell(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.queries + col;
        (self.total[i] > 0).then(|| self.correct[i] as f64 / self.total[i] as f64)
    }

    pub fn distractor(&self, col: usize) -> Option<f64> {
        (self.distractor_total[col] > 0)
            .then(|| self.distractor_correct[col] as f64 / self.distractor_total[col] as f64)
    }

    /// Mean over the non-empty cells of each memorization position.
    pub fn row_marginal(&self) -> Vec<Option<f64>> {
        (0..self.seq_len)
            .map(|r| mean((0..self.queries).filter_map(|c| self.cell(r, c))))
            .collect()
    }

    /// Mean over the non-empty cells of each query position.
    pub fn column_marginal(&self) -> Vec<Option<f64>> {
        (0..self.queries)
            .map(|c| mean((0..self.seq_len).filter_map(|r| self.cell(r, c))))
            .collect()
    }

    /// Pooled accuracy over every scored positive query.
    pub fn positive_accuracy(&self) -> Option<f64> {
        let t: u64 = self.total.iter().sum();
        (t > 0).then(|| self.correct.iter().sum::<u64>() as f64 / t as f64)
    }

    /// Pooled accuracy over every scored query, distractors included.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let t = self.scored();
        let c: u64 = self.correct.iter().chain(&self.distractor_correct).sum();
        (t > 0).then(|| c as f64 / t as f64)
    }

    pub fn scored(&self) -> u64 {
        self.total.iter().chain(&self.distractor_total).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["mem_pos", "query_pos", "correct", "total"])?;
        for r in 0..self.seq_len {
            for c in 0..self.queries {
                let i = r * self.queries + c;
                w.write_record([
                    r.to_string(),
                    c.to_string(),
                    self.correct[i].to_string(),
                    self.total[i].to_string(),
                ])?;
            }
        }
        for c in 0..self.distractor_total.len() {
            w.write_record([
                "DISTRACTOR".to_string(),
                c.to_string(),
                self.distractor_correct[c].to_string(),
                self.distractor_total[c].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, seq_len: usize, queries: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows: Vec<(String, usize, u64, u64)> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let distractors = rows.iter().any(|r| r.0 == "DISTRACTOR");
        let mut g = Self::new(seq_len, queries, distractors);
        let bad = || Error::Format {
            path: path.to_path_buf(),
            msg: "grid index out of range".into(),
        };
        for (mem, q, c, t) in rows {
            if q >= queries {
                return Err(bad());
            }
            if mem == "DISTRACTOR" {
                g.distractor_correct[q] = c;
                g.distractor_total[q] = t;
            } else {
                let m: usize = mem.parse().map_err(|_| bad())?;
                if m >= seq_len {
                    return Err(bad());
                }
                g.correct[m * queries + q] = c;
                g.total[m * queries + q] = t;
            }
        }
        Ok(g)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn score_chunks<F>(instances: &[TaskInstance], batch: usize, grid: &AccuracyGrid, f: F) -> Result<AccuracyGrid>
where
    F: Fn(&[TaskInstance], &mut AccuracyGrid) -> Result<()> + Sync,
{
    let parts: Vec<Result<AccuracyGrid>> = instances
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let mut g = AccuracyGrid::new(grid.seq_len, grid.queries, grid.has_distractor_row());
            f(chunk, &mut g).map(|_| g)
        })
        .collect();
    let mut out = grid.clone();
    for p in parts {
        out.merge(&p?)?;
    }
    Ok(out)
}

/// Bin positive verification queries by (origin, query position) and
/// distractors by query position, thresholding probabilities at 0.5.
pub fn accuracy_grid<S: VerificationScorer + ?Sized>(
    scorer: &S,
    instances: &[TaskInstance],
    batch: usize,
) -> Result<AccuracyGrid> {
    let first = instances
        .first()
        .ok_or_else(|| Error::Contract("empty test stream".into()))?;
    let (l, q) = (first.seq_len(), first.queries.len());
    let grid = AccuracyGrid::new(l, q, true);
    score_chunks(instances, batch, &grid, |chunk, g| {
        let probs = scorer.probabilities(chunk)?;
        for (inst, p) in chunk.iter().zip(probs) {
            if inst.kind != TaskKind::Verification || inst.seq_len() != l || inst.queries.len() != q {
                return Err(Error::Contract("test stream mixes shapes or kinds".into()));
            }
            for (col, ((&label, origin), prob)) in inst.labels.iter().zip(&inst.query_origin).zip(p).enumerate() {
                let ok = (prob > 0.5) == (label == 1);
                match (label, origin) {
                    (1, Some(row)) => g.record(*row, col, ok),
                    (1, None) => return Err(Error::Contract("positive query without an origin".into())),
                    _ => g.record_distractor(col, ok),
                }
            }
        }
        Ok(())
    })
}

/// Top-1 recall binned by (successor presentation position, query position).
pub fn recall_grid<S: RecallScorer + ?Sized>(
    scorer: &S,
    instances: &[TaskInstance],
    batch: usize,
) -> Result<AccuracyGrid> {
    let first = instances
        .first()
        .ok_or_else(|| Error::Contract("empty test stream".into()))?;
    let (l, q) = (first.seq_len(), first.queries.len());
    let grid = AccuracyGrid::new(l, q, false);
    score_chunks(instances, batch, &grid, |chunk, g| {
        let preds = scorer.predict(chunk)?;
        for (inst, p) in chunk.iter().zip(preds) {
            if inst.kind != TaskKind::Recall || inst.seq_len() != l || inst.queries.len() != q {
                return Err(Error::Contract("test stream mixes shapes or kinds".into()));
            }
            for (col, ((&label, origin), pred)) in inst.labels.iter().zip(&inst.query_origin).zip(p).enumerate() {
                let row = origin.ok_or_else(|| Error::Contract("recall query without an origin".into()))?;
                g.record(row, col, pred == label);
            }
        }
        Ok(())
    })
}

/// Held-out recall instances: fresh random study lists from the test stream.
pub fn recall_test_stream(seq_len: usize, vocab: usize, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    (0..count)
        .map(|i| {
            crate::tasks::gen_recall(
                seq_len,
                vocab,
                &mut stream_rng(seed, crate::tasks::TEST_DOMAIN, i as u64),
            )
        })
        .collect()
}

/// Mean row marginal over the first quartile of memorization positions
/// minus the mean over the last quartile. Quartiles are taken over the span
/// of scored rows (recall never scores position 0); empty rows inside the
/// span are skipped.
pub fn primacy_index(grid: &AccuracyGrid) -> Result<f64> {
    let rows = grid.row_marginal();
    let undefined = || Error::Undefined("primacy index needs scored cells in both quartiles".into());
    let first = rows.iter().position(Option::is_some).ok_or_else(undefined)?;
    let last = rows.iter().rposition(Option::is_some).ok_or_else(undefined)?;
    let span = &rows[first..=last];
    let q = (span.len() / 4).max(1);
    let head = mean(span[..q].iter().flatten().copied());
    let tail = mean(span[span.len() - q..].iter().flatten().copied());
    match (head, tail) {
        (Some(h), Some(t)) => Ok(h - t),
        _ => Err(undefined()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` log-spaced edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn log_spaced(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let (llo, lhi) = (lo.ln(), hi.ln().max(lo.ln() + 1e-12));
        let edges: Vec<f64> = (0..=bins)
            .map(|i| (llo + (lhi - llo) * i as f64 / bins as f64).exp())
            .collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let pos = ((v.ln() - llo) / (lhi - llo) * bins as f64).floor();
            counts[(pos.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedHistograms {
    pub seed: u64,
    pub initial: Histogram,
    pub last: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtHistograms {
    pub initial: Histogram,
    pub last: Histogram,
    /// Every logged iteration with that iteration's Δt values pooled over
    /// seeds and sorted ascending.
    pub sorted: Vec<(usize, Vec<f64>)>,
    pub per_seed: Vec<SeedHistograms>,
}

/// Initial/final histograms over channels × seeds on shared log-spaced bins.
pub fn dt_histograms(logs: &[DtTrajectory], bins: usize) -> Result<DtHistograms> {
    let all = logs.iter().flat_map(|l| l.records.iter().map(|r| r.dt));
    let (lo, hi) = all.fold((f64::INFINITY, 0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(lo > 0.0) || bins == 0 {
        return Err(Error::Input("Δt log is empty or has non-positive values".into()));
    }
    let pool = |f: &dyn Fn(&DtTrajectory) -> Vec<f64>| logs.iter().flat_map(f).collect::<Vec<_>>();
    let initial = Histogram::log_spaced(&pool(&|l| l.initial()), lo, hi, bins);
    let last = Histogram::log_spaced(&pool(&|l| l.last()), lo, hi, bins);
    let mut iterations: Vec<usize> = logs.iter().flat_map(|l| l.iterations()).collect();
    iterations.sort_unstable();
    iterations.dedup();
    let sorted = iterations
        .into_iter()
        .map(|it| {
            let mut v = pool(&|l| l.at(it));
            v.sort_by(f64::total_cmp);
            (it, v)
        })
        .collect();
    let per_seed = logs
        .iter()
        .map(|l| SeedHistograms {
            seed: l.seed,
            initial: Histogram::log_spaced(&l.initial(), lo, hi, bins),
            last: Histogram::log_spaced(&l.last(), lo, hi, bins),
        })
        .collect();
    Ok(DtHistograms {
        initial,
        last,
        sorted,
        per_seed,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn fraction_at_most(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v <= threshold).count() as f64 / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtSummary {
    pub channels: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of channels with Δt ≤ 0.03.
    pub fraction_le_0_03: f64,
}

impl DtSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self {
            channels: values.len(),
            median: median(values)?,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(0.0, f64::max),
            fraction_le_0_03: fraction_at_most(values, 0.03),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimacyReport {
    pub task: TaskKind,
    pub seq_len: usize,
    pub primacy_index: f64,
    pub positive_accuracy: Option<f64>,
    pub overall_accuracy: Option<f64>,
    pub distractor_accuracy: Option<f64>,
    /// Row marginals per memorization position (`null` where empty).
    pub recall_curve: Vec<Option<f64>>,
    /// `recall_curve` scaled to a maximum of 1.
    pub recall_curve_normalized: Vec<Option<f64>>,
    /// Kernel norm per presentation position at the median Δt, scaled to a
    /// maximum of 1 (empty for cores without a kernel).
    pub theoretical_curve: Vec<f64>,
    pub dt: Option<DtSummary>,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter().map(|x| x / max).collect()
    } else {
        v.to_vec()
    }
}

/// Kernel weight per presentation position for the channel whose Δt is the
/// median, using that channel's input vector.
pub fn model_weight_curve<T: Real>(model: &Model<T>, len: usize) -> Result<Vec<f64>> {
    let Core::Ssm(p) = &model.core else {
        return Ok(Vec::new());
    };
    let dts: Vec<f64> = (0..p.channels).map(|m| p.dt(m).f64()).collect();
    let mut order: Vec<usize> = (0..p.channels).collect();
    order.sort_by(|&a, &b| dts[a].total_cmp(&dts[b]));
    let m = order[order.len() / 2];
    let n = p.order;
    let cv = |z: num_complex::Complex<T>| Complex64::new(z.re.f64(), z.im.f64());
    let a = p.dense_a();
    let ss = StateSpace {
        a: DMatrix::from_fn(n, n, |i, j| cv(a[i * n + j])),
        b: DVector::from_iterator(n, p.b[m * n..(m + 1) * n].iter().map(|&z| cv(z))),
    };
    Ok(theoretical_weight_curve(&bilinear(&ss, dts[m])?, len))
}

/// Report for a grid alone, with no kernel curve or Δt summary. Used for
/// harness stubs.
pub fn grid_report(grid: &AccuracyGrid, task: TaskKind) -> Result<PrimacyReport> {
    let recall_curve = grid.row_marginal();
    let max = recall_curve.iter().flatten().copied().fold(0.0, f64::max);
    let recall_curve_normalized = recall_curve
        .iter()
        .map(|v| v.map(|x| if max > 0.0 { x / max } else { x }))
        .collect();
    let distractor_accuracy = grid.has_distractor_row().then(|| {
        let t: u64 = grid.distractor_total.iter().sum();
        grid.distractor_correct.iter().sum::<u64>() as f64 / t.max(1) as f64
    });
    Ok(PrimacyReport {
        task,
        seq_len: grid.seq_len,
        primacy_index: primacy_index(grid)?,
        positive_accuracy: grid.positive_accuracy(),
        overall_accuracy: grid.overall_accuracy(),
        distractor_accuracy,
        recall_curve,
        recall_curve_normalized,
        theoretical_curve: Vec::new(),
        dt: None,
    })
}

pub fn abstract_report<T: Real>(grid: &AccuracyGrid, model: &Model<T>) -> Result<PrimacyReport> {
    let mut report = grid_report(grid, model.spec.task)?;
    report.theoretical_curve = normalize(&model_weight_curve(model, grid.seq_len)?);
    report.dt = match &model.core {
        Core::Ssm(p) => DtSummary::of(&(0..p.channels).map(|m| p.dt(m).f64()).collect::<Vec<_>>()),
        Core::Lstm(_) => None,
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{build_holdout, gen_verification_test};
    use crate::train::DtRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream(l: usize, sets: usize) -> Vec<TaskInstance> {
        let reg = build_holdout(l, 40, sets, 1).unwrap();
        gen_verification_test(&reg, 3).collect()
    }

    #[test]
    fn oracle_scores_everything() {
        let g = accuracy_grid(&MembershipOracle, &stream(4, 3), 5).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(g.cell(r, c), Some(1.0));
            }
            assert_eq!(g.distractor(r), Some(1.0));
        }
        assert_eq!(g.scored(), 3 * 4 * 2 * 4);
    }

    #[test]
    fn constant_yes_scorer() {
        let g = accuracy_grid(&ConstantScorer(1.0), &stream(4, 2), 3).unwrap();
        assert!(g.row_marginal().iter().all(|v| *v == Some(1.0)));
        assert!((0..4).all(|c| g.distractor(c) == Some(0.0)));
    }

    /// Stub that answers correctly only for even query positions.
    struct EvenColumns;

    impl VerificationScorer for EvenColumns {
        fn probabilities(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<f64>>> {
            Ok(instances
                .iter()
                .map(|i| {
                    i.labels
                        .iter()
                        .enumerate()
                        .map(|(c, &l)| if c % 2 == 0 { l as f64 } else { 1.0 - l as f64 })
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn counts_match_enumeration() {
        let insts = stream(4, 2);
        let g = accuracy_grid(&EvenColumns, &insts, 7).unwrap();
        let mut want_c = [[0u64; 4]; 4];
        let mut want_t = [[0u64; 4]; 4];
        for inst in &insts {
            for (c, o) in inst.query_origin.iter().enumerate() {
                if let Some(r) = o {
                    want_t[*r][c] += 1;
                    want_c[*r][c] += (c % 2 == 0) as u64;
                }
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(g.total[r * 4 + c], want_t[r][c]);
                assert_eq!(g.correct[r * 4 + c], want_c[r][c]);
                // every pair is exercised once per held-out set
                assert_eq!(want_t[r][c], 2);
            }
        }
        let positives: u64 = g.total.iter().sum();
        let distractors: u64 = g.distractor_total.iter().sum();
        assert_eq!(positives + distractors, insts.len() as u64 * 4);
    }

    #[test]
    fn missing_origin_is_a_contract_violation() {
        let mut insts = stream(4, 1);
        let i = insts[0].labels.iter().position(|&l| l == 1).unwrap();
        insts[0].query_origin[i] = None;
        assert!(matches!(
            accuracy_grid(&MembershipOracle, &insts, 4),
            Err(Error::Contract(_))
        ));
    }

    fn grid_with_rows(values: &[f64]) -> AccuracyGrid {
        let l = values.len();
        let mut g = AccuracyGrid::new(l, l, false);
        for (r, v) in values.iter().enumerate() {
            for c in 0..l {
                g.total[r * l + c] = 100;
                g.correct[r * l + c] = (v * 100.0).round() as u64;
            }
        }
        g
    }

    #[test]
    fn primacy_index_arithmetic() {
        assert_eq!(primacy_index(&grid_with_rows(&[0.7; 8])).unwrap(), 0.0);
        let g = grid_with_rows(&[0.9, 0.9, 0.8, 0.7, 0.7, 0.6, 0.6, 0.6]);
        assert!((primacy_index(&g).unwrap() - 0.3).abs() < 1e-12);
        let rev = grid_with_rows(&[0.6, 0.6, 0.6, 0.7, 0.7, 0.8, 0.9, 0.9]);
        assert!((primacy_index(&rev).unwrap() + 0.3).abs() < 1e-12);
        assert!(matches!(
            primacy_index(&AccuracyGrid::new(4, 4, false)),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn recall_stubs() {
        let insts = recall_test_stream(6, 16, 400, 0).unwrap();
        let g = recall_grid(&SuccessorOracle, &insts, 32).unwrap();
        assert_eq!(g.positive_accuracy(), Some(1.0));
        let r = recall_grid(&UniformGuesser { vocab: 16, seed: 1 }, &insts, 32).unwrap();
        let acc = r.positive_accuracy().unwrap();
        assert!((acc - 1.0 / 16.0).abs() < 0.02, "{acc}");
        assert_eq!(g.cell(0, 0), None);
    }

    #[test]
    fn grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = accuracy_grid(&EvenColumns, &stream(4, 2), 8).unwrap();
        let path = dir.path().join("grid.csv");
        g.write_csv(&path).unwrap();
        assert_eq!(AccuracyGrid::read_csv(&path, 4, 4).unwrap(), g);
    }

    #[test]
    fn single_snapshot_histograms_coincide() {
        let log = DtTrajectory {
            seed: 0,
            records: (0..10)
                .map(|c| DtRecord {
                    iteration: 0,
                    channel: c,
                    dt: 0.001 * 1.5f64.powi(c as i32),
                })
                .collect(),
        };
        let h = dt_histograms(&[log], 5).unwrap();
        assert_eq!(h.initial, h.last);
        assert_eq!(h.initial.counts.iter().sum::<u64>(), 10);
        assert_eq!(h.sorted.len(), 1);
    }

    fn random_grid(rng: &mut ChaCha8Rng, l: usize) -> AccuracyGrid {
        let mut g = AccuracyGrid::new(l, l, true);
        for i in 0..l * l {
            g.total[i] = rng.random_range(1..20);
            g.correct[i] = rng.random_range(0..=g.total[i]);
        }
        for c in 0..l {
            g.distractor_total[c] = rng.random_range(1..20);
            g.distractor_correct[c] = rng.random_range(0..=g.distractor_total[c]);
        }
        g
    }

    #[test]
    fn primacy_depends_only_on_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let l = rng.random_range(4..20);
            let g = random_grid(&mut rng, l);
            let base = primacy_index(&g).unwrap();
            assert!(base.is_finite());

            let mut perm: Vec<usize> = (0..l).collect();
            for i in (1..l).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut cols = g.clone();
            let mut rows = g.clone();
            for r in 0..l {
                for c in 0..l {
                    cols.correct[r * l + perm[c]] = g.correct[r * l + c];
                    cols.total[r * l + perm[c]] = g.total[r * l + c];
                    rows.correct[(l - 1 - r) * l + c] = g.correct[r * l + c];
                    rows.total[(l - 1 - r) * l + c] = g.total[r * l + c];
                }
            }
            assert!((primacy_index(&cols).unwrap() - base).abs() < 1e-12);
            assert!((primacy_index(&rows).unwrap() + base).abs() < 1e-12);
        }
    }

    /// Deterministic pseudo-random probabilities keyed on instance content.
    struct HashScorer(u64);

    impl HashScorer {
        fn p(&self, inst: &TaskInstance, q: usize) -> f64 {
            let key = inst.study.iter().chain(&inst.queries).fold(self.0 ^ q as u64, |h, &t| {
                h.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64 + 1)
            });
            (key >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    impl VerificationScorer for HashScorer {
        fn probabilities(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<f64>>> {
            Ok(instances
                .iter()
                .map(|i| (0..i.queries.len()).map(|q| self.p(i, q)).collect())
                .collect())
        }
    }

    #[test]
    fn grid_matches_exhaustive_enumeration() {
        for l in 1..=8 {
            let reg = build_holdout(l, 3 * l + 5, 3, l as u64).unwrap();
            let stream: Vec<TaskInstance> = gen_verification_test(&reg, 11).collect();
            let scorer = HashScorer(l as u64);
            let grid = accuracy_grid(&scorer, &stream, 5).unwrap();

            let mut expect = AccuracyGrid::new(l, l, true);
            for inst in &stream {
                for (q, (&label, origin)) in inst.labels.iter().zip(&inst.query_origin).enumerate() {
                    let ok = (scorer.p(inst, q) >= 0.5) == (label == 1);
                    match origin {
                        Some(row) => {
                            expect.total[row * l + q] += 1;
                            expect.correct[row * l + q] += ok as u64;
                        }
                        None => {
                            expect.distractor_total[q] += 1;
                            expect.distractor_correct[q] += ok as u64;
                        }
                    }
                }
            }
            assert_eq!(grid, expect, "L={l}");

            let queries: u64 = stream.iter().map(|i| i.queries.len() as u64).sum();
            assert_eq!(
                grid.total.iter().sum::<u64>() + grid.distractor_total.iter().sum::<u64>(),
                queries
            );
            assert_eq!(grid.scored(), queries);
            for (r, m) in grid.row_marginal().iter().enumerate() {
                let cells: Vec<f64> = (0..l).filter_map(|c| grid.cell(r, c)).collect();
                let mean = cells.iter().sum::<f64>() / cells.len() as f64;
                assert!((m.unwrap() - mean).abs() < 1e-12);
            }
            for (c, m) in grid.column_marginal().iter().enumerate() {
                let cells: Vec<f64> = (0..l).filter_map(|r| grid.cell(r, c)).collect();
                let mean = cells.iter().sum::<f64>() / cells.len() as f64;
                assert!((m.unwrap() - mean).abs() < 1e-12);
            }
        }
    }
}
