//! Memorization tasks: binary memory verification with a held-out test
//! protocol, and associative recall.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Verification,
    Recall,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "verification" => Ok(Self::Verification),
            "recall" => Ok(Self::Recall),
            other => Err(config(format!("unknown task kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Verification => "verification",
            Self::Recall => "recall",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub study: Vec<u32>,
    pub queries: Vec<u32>,
    /// Membership bits for verification, successor tokens for recall.
    pub labels: Vec<u32>,
    /// For verification, the study position of each positive query
    /// (`None` for distractors). For recall, the study position of the
    /// target successor.
    pub query_origin: Vec<Option<usize>>,
}

impl TaskInstance {
    pub fn seq_len(&self) -> usize {
        self.study.len()
    }

    /// The full input stream: study items followed by queries.
    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.study.iter().chain(&self.queries).copied()
    }

    pub fn stream_len(&self) -> usize {
        self.study.len() + self.queries.len()
    }
}

/// RNG for one item of a deterministic stream: independent of how many
/// values earlier items consumed.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub const TRAIN_DOMAIN: u64 = 1;
pub const TEST_DOMAIN: u64 = 2;
pub const HOLDOUT_DOMAIN: u64 = 3;

/// Held-out study sets, stored sorted so membership ignores order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HoldoutRegistry {
    pub seq_len: usize,
    pub vocab: usize,
    pub seed: u64,
    pub sets: Vec<Vec<u32>>,
    #[serde(skip)]
    lookup: HashSet<Vec<u32>>,
}

impl PartialEq for HoldoutRegistry {
    fn eq(&self, other: &Self) -> bool {
        (self.seq_len, self.vocab, self.seed, &self.sets) == (other.seq_len, other.vocab, other.seed, &other.sets)
    }
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

fn canonical(items: &[u32]) -> Vec<u32> {
    let mut v = items.to_vec();
    v.sort_unstable();
    v
}

fn sample_distinct(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<u32> {
    index::sample(rng, vocab, len).into_iter().map(|i| i as u32).collect()
}

pub fn build_holdout(seq_len: usize, vocab: usize, count: usize, seed: u64) -> Result<HoldoutRegistry> {
    if seq_len == 0 || seq_len > vocab {
        return Err(config(format!("holdout needs 0 < L ≤ K, got L={seq_len}, K={vocab}")));
    }
    if ln_binomial(vocab, seq_len) < (count as f64).ln() {
        return Err(config(format!(
            "cannot hold out {count} distinct sets of {seq_len} items from {vocab} tokens"
        )));
    }
    let mut rng = stream_rng(seed, HOLDOUT_DOMAIN, 0);
    let mut lookup = HashSet::with_capacity(count);
    let mut sets = Vec::with_capacity(count);
    let mut misses = 0usize;
    while sets.len() < count {
        let set = canonical(&sample_distinct(&mut rng, vocab, seq_len));
        if lookup.insert(set.clone()) {
            sets.push(set);
            misses = 0;
        } else {
            misses += 1;
            if misses > 100_000 {
                return Err(Error::Capacity(format!(
                    "holdout sampling stalled after {} of {count} sets",
                    sets.len()
                )));
            }
        }
    }
    Ok(HoldoutRegistry {
        seq_len,
        vocab,
        seed,
        sets,
        lookup,
    })
}

impl HoldoutRegistry {
    pub fn contains(&self, items: &[u32]) -> bool {
        self.lookup.contains(&canonical(items))
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut reg: Self = serde_json::from_str(text)?;
        reg.lookup = reg.sets.iter().cloned().collect();
        if reg.lookup.len() != reg.sets.len() {
            return Err(Error::Input("registry contains duplicate sets".into()));
        }
        if reg
            .sets
            .iter()
            .any(|s| s.len() != reg.seq_len || s.iter().any(|&t| t as usize >= reg.vocab))
        {
            return Err(Error::Input("registry set does not match (L, K)".into()));
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}

/// Draws distractors without repetition from the complement of the study
/// set. When an instance needs more distractors than the complement holds
/// (only possible with L close to K), the pool is reused.
struct DistractorPool {
    pool: Vec<u32>,
    next: usize,
}

impl DistractorPool {
    fn new(study: &[u32], vocab: usize) -> Self {
        let used: HashSet<u32> = study.iter().copied().collect();
        let pool = (0..vocab as u32).filter(|t| !used.contains(t)).collect();
        Self { pool, next: 0 }
    }

    fn draw(&mut self, rng: &mut impl Rng) -> u32 {
        if self.next == 0 {
            self.pool.shuffle(rng);
        }
        let t = self.pool[self.next];
        self.next = (self.next + 1) % self.pool.len();
        t
    }
}

fn replace_slots(
    study: &[u32],
    order: &[usize],
    replace: impl Fn(usize) -> bool,
    vocab: usize,
    rng: &mut impl Rng,
) -> TaskInstance {
    let mut pool = None;
    let mut queries = Vec::with_capacity(order.len());
    let mut labels = Vec::with_capacity(order.len());
    let mut origin = Vec::with_capacity(order.len());
    for (slot, &pos) in order.iter().enumerate() {
        if replace(slot) {
            let pool = pool.get_or_insert_with(|| DistractorPool::new(study, vocab));
            queries.push(pool.draw(rng));
            labels.push(0);
            origin.push(None);
        } else {
            queries.push(study[pos]);
            labels.push(1);
            origin.push(Some(pos));
        }
    }
    TaskInstance {
        kind: TaskKind::Verification,
        study: study.to_vec(),
        queries,
        labels,
        query_origin: origin,
    }
}

/// One training instance. Study sets that coincide with a held-out set are
/// resampled in full.
pub fn gen_verification_train(
    seq_len: usize,
    vocab: usize,
    p: f64,
    registry: &HoldoutRegistry,
    rng: &mut impl Rng,
) -> Result<TaskInstance> {
    if seq_len == 0 || seq_len >= vocab {
        return Err(config(format!(
            "verification needs 0 < L < K, got L={seq_len}, K={vocab}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(config(format!("replacement probability {p} outside [0, 1]")));
    }
    let mut collisions = 0;
    let study = loop {
        let study = sample_distinct(rng, vocab, seq_len);
        if !registry.contains(&study) {
            break study;
        }
        collisions += 1;
        if collisions > 1000 {
            return Err(Error::Capacity("more than 1000 consecutive registry collisions".into()));
        }
    };
    let mut order: Vec<usize> = (0..seq_len).collect();
    order.shuffle(rng);
    let mask: Vec<bool> = (0..seq_len).map(|_| rng.random_bool(p)).collect();
    Ok(replace_slots(&study, &order, |slot| mask[slot], vocab, rng))
}

/// The `2L` test instances built from one held-out set: a fixed study
/// order, every cyclic shift of one shuffled query order, and for each
/// shift one copy with even and one with odd query slots replaced.
pub fn verification_test_family(registry: &HoldoutRegistry, set_index: usize, seed: u64) -> Vec<TaskInstance> {
    let mut rng = stream_rng(seed, TEST_DOMAIN, set_index as u64);
    let mut study = registry.sets[set_index].clone();
    study.shuffle(&mut rng);
    let len = study.len();
    let mut base: Vec<usize> = (0..len).collect();
    base.shuffle(&mut rng);
    let mut out = Vec::with_capacity(2 * len);
    for shift in 0..len {
        let mut order = base.clone();
        order.rotate_left(shift);
        for parity in 0..2 {
            out.push(replace_slots(
                &study,
                &order,
                |slot| slot % 2 == parity,
                registry.vocab,
                &mut rng,
            ));
        }
    }
    out
}

/// The full held-out test stream, `sets × L × 2` instances, in set order.
pub fn gen_verification_test(registry: &HoldoutRegistry, seed: u64) -> impl Iterator<Item = TaskInstance> + '_ {
    (0..registry.len()).flat_map(move |i| verification_test_family(registry, i, seed))
}

pub fn gen_recall(seq_len: usize, vocab: usize, rng: &mut impl Rng) -> Result<TaskInstance> {
    if seq_len < 2 || seq_len > vocab {
        return Err(config(format!("recall needs 2 ≤ L ≤ K, got L={seq_len}, K={vocab}")));
    }
    let study = sample_distinct(rng, vocab, seq_len);
    let mut order: Vec<usize> = (0..seq_len - 1).collect();
    order.shuffle(rng);
    Ok(TaskInstance {
        kind: TaskKind::Recall,
        queries: order.iter().map(|&p| study[p]).collect(),
        labels: order.iter().map(|&p| study[p + 1]).collect(),
        query_origin: order.iter().map(|&p| Some(p + 1)).collect(),
        study,
    })
}

/// Histogram of `query_time − presentation_time` over positive queries.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceAudit {
    pub seq_len: usize,
    /// Indexed by distance; entry 0 is always zero.
    pub histogram: Vec<u64>,
    /// `Σ_α |f(L−α) − f(L+α)|`.
    pub symmetry: u64,
}

pub fn distance_audit<'a>(
    instances: impl IntoIterator<Item = &'a TaskInstance>,
    seq_len: usize,
) -> Result<DistanceAudit> {
    let mut histogram = vec![0u64; 2 * seq_len];
    for inst in instances {
        if inst.seq_len() != seq_len || inst.query_origin.len() != inst.queries.len() {
            return Err(Error::Contract("instance does not match audit length".into()));
        }
        for (q, origin) in inst.query_origin.iter().enumerate() {
            if let Some(o) = origin {
                histogram[seq_len + q - o] += 1;
            }
        }
    }
    let symmetry = (1..seq_len)
        .map(|a| histogram[seq_len - a].abs_diff(histogram[seq_len + a]))
        .sum();
    Ok(DistanceAudit {
        seq_len,
        histogram,
        symmetry,
    })
}

/// Writes instances as CSV rows `kind, study…, queries…, labels…`.
pub fn dump_instances<'a>(path: &Path, instances: impl IntoIterator<Item = &'a TaskInstance>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    for inst in instances {
        let mut row = vec![inst.kind.to_string()];
        row.extend(
            inst.study
                .iter()
                .chain(&inst.queries)
                .chain(&inst.labels)
                .map(u32::to_string),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry(l: usize, k: usize, n: usize) -> HoldoutRegistry {
        build_holdout(l, k, n, 7).unwrap()
    }

    #[test]
    fn schematic_replacement() {
        let study = [8, 29, 2, 11];
        // shuffled order (2, 8, 11, 29) as study positions
        let order = [2, 0, 3, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst = replace_slots(&study, &order, |s| s % 2 == 1, 40, &mut rng);
        assert_eq!(inst.labels, vec![1, 0, 1, 0]);
        assert_eq!(inst.queries[0], 2);
        assert_eq!(inst.queries[2], 11);
        assert!(!study.contains(&inst.queries[1]) && !study.contains(&inst.queries[3]));
        assert_ne!(inst.queries[1], inst.queries[3]);
        assert_eq!(inst.query_origin, vec![Some(2), None, Some(3), None]);
    }

    #[test]
    fn no_replacement_gives_all_positive_permutation() {
        let reg = registry(6, 50, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = gen_verification_train(6, 50, 0.0, &reg, &mut rng).unwrap();
        assert!(inst.labels.iter().all(|&l| l == 1));
        assert_eq!(canonical(&inst.queries), canonical(&inst.study));
    }

    #[test]
    fn label_fraction_is_balanced() {
        let reg = registry(10, 100, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut pos, mut total) = (0u64, 0u64);
        while total < 100_000 {
            let inst = gen_verification_train(10, 100, 0.5, &reg, &mut rng).unwrap();
            pos += inst.labels.iter().map(|&l| l as u64).sum::<u64>();
            total += inst.labels.len() as u64;
        }
        let frac = pos as f64 / total as f64;
        assert!((0.494..=0.506).contains(&frac), "{frac}");
    }

    #[test]
    fn labels_rederive_from_membership() {
        let reg = registry(8, 64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let inst = gen_verification_train(8, 64, 0.5, &reg, &mut rng).unwrap();
            for (q, l) in inst.queries.iter().zip(&inst.labels) {
                assert_eq!(inst.study.contains(q) as u32, *l);
            }
            assert!(!reg.contains(&inst.study));
        }
    }

    #[test]
    fn boundary_registry_still_trains() {
        let reg = build_holdout(9, 10, 1, 0).unwrap();
        assert_eq!(reg.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = gen_verification_train(9, 10, 0.5, &reg, &mut rng).unwrap();
        assert!(!reg.contains(&inst.study));
    }

    #[test]
    fn invalid_configurations() {
        let reg = registry(4, 40, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            gen_verification_train(40, 40, 0.5, &reg, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(gen_recall(41, 40, &mut rng), Err(Error::Config(_))));
        assert!(matches!(build_holdout(3, 4, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn exhausted_registry_is_a_capacity_error() {
        // Every 2-subset of 3 tokens is held out, so no training set exists.
        let reg = build_holdout(2, 3, 3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(matches!(
            gen_verification_train(2, 3, 0.5, &reg, &mut rng),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn registry_round_trips_and_is_deterministic() {
        let a = registry(5, 30, 20);
        let b = registry(5, 30, 20);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = HoldoutRegistry::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, c);
        assert!(c.contains(&[a.sets[3][4], a.sets[3][0], a.sets[3][2], a.sets[3][1], a.sets[3][3]]));
    }

    #[test]
    fn default_registry_is_distinct() {
        let reg = build_holdout(128, 4096, 1024, 0).unwrap();
        assert_eq!(reg.sets.iter().collect::<HashSet<_>>().len(), 1024);
    }

    #[test]
    fn cyclic_shifts_follow_the_worked_example() {
        let mut order = vec![2, 8, 11, 29];
        let mut shifts = vec![order.clone()];
        for _ in 1..4 {
            order.rotate_left(1);
            shifts.push(order.clone());
        }
        assert_eq!(shifts[1], vec![8, 11, 29, 2]);
        assert_eq!(shifts[3], vec![29, 2, 8, 11]);
    }

    #[test]
    fn test_family_has_expected_size() {
        let reg = registry(6, 40, 3);
        assert_eq!(gen_verification_test(&reg, 0).count(), 3 * 6 * 2);
    }

    #[test]
    fn recall_worked_example() {
        let study = [8u32, 29, 2, 17];
        let order = [2usize, 0, 1];
        let labels: Vec<u32> = order.iter().map(|&p| study[p + 1]).collect();
        assert_eq!(order.iter().map(|&p| study[p]).collect::<Vec<_>>(), vec![2, 8, 29]);
        assert_eq!(labels, vec![17, 29, 2]);
    }

    #[test]
    fn recall_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let one = gen_recall(2, 5, &mut rng).unwrap();
        assert_eq!(one.queries, vec![one.study[0]]);
        assert_eq!(one.labels, vec![one.study[1]]);
        for _ in 0..10_000 {
            let inst = gen_recall(6, 20, &mut rng).unwrap();
            assert!(inst.labels.iter().all(|l| inst.study.contains(l)));
            assert!(!inst.labels.contains(&inst.study[0]));
            assert!(!inst.queries.contains(&inst.study[5]));
        }
    }

    #[test]
    fn single_item_distance() {
        let inst = TaskInstance {
            kind: TaskKind::Verification,
            study: vec![3],
            queries: vec![3],
            labels: vec![1],
            query_origin: vec![Some(0)],
        };
        let audit = distance_audit([&inst], 1).unwrap();
        assert_eq!(audit.histogram, vec![0, 1]);
        assert_eq!(audit.symmetry, 0);
    }

    #[test]
    fn training_stream_avoids_holdout_and_labels_follow_membership() {
        use rand::SeedableRng;
        let (l, k) = (6, 16);
        let reg = build_holdout(l, k, 200, 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut windows = [0u64; 16];
        let draws = 16_000;
        for _ in 0..draws {
            let inst = gen_verification_train(l, k, 0.5, &reg, &mut rng).unwrap();
            assert!(!reg.contains(&inst.study));
            for (q, &label) in inst.queries.iter().zip(&inst.labels) {
                assert_eq!(label, inst.study.contains(q) as u32);
            }
            let w = inst.labels[..4].iter().fold(0, |acc, &b| acc * 2 + b as usize);
            windows[w] += 1;
        }
        // Uniform replacement masks: χ² with 15 degrees of freedom, p > 0.001.
        let expected = draws as f64 / 16.0;
        let chi2: f64 = windows.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 37.70, "χ² = {chi2}, windows {windows:?}");
    }
}
