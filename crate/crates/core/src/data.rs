//! Query records, the synthetic correlated-pool generator, multi-pass answer
//! frequencies, and the per-model cost table.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diversity::EnsembleMask;
use crate::math;
use crate::policy::argmax;
use crate::{Error, Result};

/// Tolerance within which a probability vector must sum to 1.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// One query: per-model probability vectors over `k` choices plus the gold
/// answer, optionally with per-model inference costs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryRecord {
    pub id: String,
    pub task: String,
    pub k: usize,
    pub gold: usize,
    /// `outputs[i][c]` = probability model `i` assigns to choice `c`.
    pub outputs: Vec<Vec<f64>>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub costs: Option<Vec<f64>>,
}

impl QueryRecord {
    pub fn n_models(&self) -> usize {
        self.outputs.len()
    }

    /// Check shapes, simplex sums, and ranges.
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidRecord(format!("record {}: k must be >= 2", self.id)));
        }
        if self.gold >= self.k {
            return Err(Error::InvalidRecord(format!(
                "record {}: gold {} out of range for k={}",
                self.id, self.gold, self.k
            )));
        }
        if self.outputs.is_empty() {
            return Err(Error::InvalidRecord(format!("record {}: no model outputs", self.id)));
        }
        for (i, q) in self.outputs.iter().enumerate() {
            if q.len() != self.k {
                return Err(Error::InvalidRecord(format!(
                    "record {}: output {} has length {}, expected k={}",
                    self.id,
                    i,
                    q.len(),
                    self.k
                )));
            }
            if q.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvalidRecord(format!(
                    "record {}: output {} has negative or non-finite entries",
                    self.id, i
                )));
            }
            let sum: f64 = q.iter().sum();
            if math::abs(sum - 1.0) > SIMPLEX_TOL {
                return Err(Error::InvalidRecord(format!(
                    "record {}: output {} sums to {sum}, off the simplex",
                    self.id, i
                )));
            }
        }
        if let Some(costs) = &self.costs {
            if costs.len() != self.outputs.len() {
                return Err(Error::InvalidRecord(format!(
                    "record {}: {} costs for {} outputs",
                    self.id,
                    costs.len(),
                    self.outputs.len()
                )));
            }
            if costs.iter().any(|&c| !c.is_finite() || c < 0.0) {
                return Err(Error::InvalidRecord(format!("record {}: negative cost", self.id)));
            }
        }
        Ok(())
    }

    /// Rescale each probability vector to sum to exactly 1 (for inputs that
    /// are off the simplex by more than the tolerance).
    pub fn renormalize(&mut self) -> Result<()> {
        for (i, q) in self.outputs.iter_mut().enumerate() {
            let sum: f64 = q.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                return Err(Error::InvalidRecord(format!(
                    "record {}: output {} cannot be renormalized (sum {sum})",
                    self.id, i
                )));
            }
            q.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(())
    }

    /// Each model's argmax answer (lowest index on ties).
    pub fn model_answers(&self) -> Vec<usize> {
        self.outputs.iter().map(|q| argmax(q)).collect()
    }

    /// Whether each model's argmax answer equals gold.
    pub fn model_correctness(&self) -> Vec<bool> {
        self.outputs.iter().map(|q| argmax(q) == self.gold).collect()
    }
}

/// Frequency distribution over distinct raw answers from repeated inference
/// passes, normalized by the number of passes. The vocabulary keeps
/// first-appearance order.
pub fn freqs_from_passes<S: AsRef<str>>(answers: &[S]) -> Result<(Vec<f64>, Vec<String>)> {
    if answers.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut vocab: Vec<String> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for ans in answers {
        let ans = ans.as_ref();
        match vocab.iter().position(|v| v == ans) {
            Some(i) => counts[i] += 1,
            None => {
                vocab.push(ans.to_string());
                counts.push(1);
            }
        }
    }
    let total = answers.len() as f64;
    let freqs = counts.iter().map(|&c| c as f64 / total).collect();
    Ok((freqs, vocab))
}

/// Specification of a synthetic pool of correlated answer-producing agents.
///
/// Agents in the same correlation group copy a shared per-query outcome
/// (same correctness, same wrong answer) with probability `corr`, and roll
/// independently otherwise, so `corr = 1` with a shared group yields exact
/// clones while `corr = 0` yields independent errors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticPoolSpec {
    pub n: usize,
    pub k: usize,
    pub accuracies: Vec<f64>,
    /// Correlation-group id per agent; ids must be dense in `0..G`.
    pub groups: Vec<usize>,
    /// Probability an agent copies its group's shared outcome.
    pub corr: f64,
    /// Probability mass an agent puts on its chosen answer.
    pub conf: f64,
    pub seed: u64,
}

impl SyntheticPoolSpec {
    /// Independent agents (one group each) with the given accuracies.
    pub fn independent(accuracies: &[f64], k: usize, conf: f64, seed: u64) -> Self {
        Self {
            n: accuracies.len(),
            k,
            accuracies: accuracies.to_vec(),
            groups: (0..accuracies.len()).collect(),
            corr: 0.0,
            conf,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("synthetic pool needs at least one agent".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig("synthetic pool needs k >= 2".into()));
        }
        if self.accuracies.len() != self.n || self.groups.len() != self.n {
            return Err(Error::InvalidConfig("accuracies/groups length must equal n".into()));
        }
        if self.accuracies.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidConfig("accuracies must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.corr) {
            return Err(Error::InvalidConfig("corr must lie in [0, 1]".into()));
        }
        let min_conf = 1.0 / self.k as f64;
        if !(self.conf > min_conf && self.conf <= 1.0) {
            return Err(Error::InvalidConfig("conf must lie in (1/k, 1]".into()));
        }
        let n_groups = self.n_groups();
        if self.groups.iter().any(|&g| g >= n_groups) || (0..n_groups).any(|g| !self.groups.contains(&g)) {
            return Err(Error::InvalidConfig("group ids must be dense in 0..G".into()));
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        self.groups.iter().max().map_or(0, |&g| g + 1)
    }
}

/// Deterministic stream of [`QueryRecord`]s drawn from a [`SyntheticPoolSpec`].
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    spec: SyntheticPoolSpec,
    group_mean_acc: Vec<f64>,
    rng: ChaCha8Rng,
    counter: u64,
    task: String,
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticPoolSpec) -> Result<Self> {
        spec.validate()?;
        let n_groups = spec.n_groups();
        let mut sums = vec![0.0; n_groups];
        let mut counts = vec![0usize; n_groups];
        for (agent, &g) in spec.groups.iter().enumerate() {
            sums[g] += spec.accuracies[agent];
            counts[g] += 1;
        }
        let group_mean_acc = sums.iter().zip(&counts).map(|(&s, &c)| s / c as f64).collect();
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self { spec, group_mean_acc, rng, counter: 0, task: "synthetic".to_string() })
    }

    pub fn with_task(mut self, task: &str) -> Self {
        self.task = task.to_string();
        self
    }

    pub fn spec(&self) -> &SyntheticPoolSpec {
        &self.spec
    }

    fn wrong_choice<R: Rng>(rng: &mut R, gold: usize, k: usize) -> usize {
        let idx = rng.gen_range(0..k - 1);
        if idx >= gold {
            idx + 1
        } else {
            idx
        }
    }

    /// Generate the next query. Draw order is fixed (gold, then per-group
    /// shared outcomes, then per-agent rolls), so a given seed always yields
    /// the same stream.
    pub fn next_record(&mut self) -> QueryRecord {
        let k = self.spec.k;
        let n = self.spec.n;
        let gold = self.rng.gen_range(0..k);

        let n_groups = self.group_mean_acc.len();
        let mut group_correct = Vec::with_capacity(n_groups);
        let mut group_wrong = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            group_correct.push(self.rng.gen::<f64>() < self.group_mean_acc[g]);
            group_wrong.push(Self::wrong_choice(&mut self.rng, gold, k));
        }

        let off = (1.0 - self.spec.conf) / (k - 1) as f64;
        let mut outputs = Vec::with_capacity(n);
        for agent in 0..n {
            let g = self.spec.groups[agent];
            let copies = self.rng.gen::<f64>() < self.spec.corr;
            let (correct, wrong) = if copies {
                (group_correct[g], group_wrong[g])
            } else {
                let correct = self.rng.gen::<f64>() < self.spec.accuracies[agent];
                let wrong = if correct { 0 } else { Self::wrong_choice(&mut self.rng, gold, k) };
                (correct, wrong)
            };
            let peak = if correct { gold } else { wrong };
            let mut q = vec![off; k];
            q[peak] = self.spec.conf;
            outputs.push(q);
        }

        let id = format!("synth-{:06}", self.counter);
        self.counter += 1;
        QueryRecord { id, task: self.task.clone(), k, gold, outputs, costs: None }
    }

    /// Generate `count` queries.
    pub fn take_records(&mut self, count: usize) -> Vec<QueryRecord> {
        (0..count).map(|_| self.next_record()).collect()
    }
}

/// Per-model inference cost in configured currency units per query.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostTable {
    costs: Vec<f64>,
}

/// Illustrative per-query unit costs, cycled for pools larger than eight.
const ILLUSTRATIVE_COSTS: [f64; 8] = [0.0004, 0.0007, 0.0012, 0.0018, 0.0028, 0.0045, 0.0080, 0.0140];

impl CostTable {
    pub fn new(costs: Vec<f64>) -> Result<Self> {
        if costs.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::InvalidConfig("costs must be nonnegative".into()));
        }
        Ok(Self { costs })
    }

    /// Bundled default table for an `n`-model pool.
    pub fn illustrative(n: usize) -> Self {
        Self { costs: (0..n).map(|i| ILLUSTRATIVE_COSTS[i % ILLUSTRATIVE_COSTS.len()]).collect() }
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn cost_of(&self, model: usize) -> Result<f64> {
        self.costs.get(model).copied().ok_or(Error::MissingCost { model })
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }
}

/// Total cost of sending one query to every selected model.
pub fn query_cost(mask: &EnsembleMask, table: &CostTable) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for model in mask.members() {
        total += table.cost_of(model)?;
    }
    Ok(total)
}

/// Split records into (train, test) with a seeded shuffle.
///
/// `test_fraction` of the records (rounded) land in the test split; order
/// within each split follows the shuffled order.
pub fn split_records(
    mut records: Vec<QueryRecord>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<QueryRecord>, Vec<QueryRecord>)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig("test fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n_test = ((records.len() as f64) * test_fraction + 0.5) as usize;
    let n_test = n_test.min(records.len());
    let train = records.split_off(n_test);
    Ok((train, records))
}
