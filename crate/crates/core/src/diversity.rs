//! Sliding failure history and ensemble diversity metrics.
//!
//! The [`FailureHistory`] keeps the last `T` queries' per-model correctness
//! bits and chosen answers. From it, [`focal_negative_correlation`] scores how
//! often other ensemble members fail alongside one *focal* member,
//! [`focal_diversity`] averages those scores over a team, and [`fleiss_kappa`]
//! measures raw answer agreement. [`enumerate_teams`] lists every candidate
//! team of a pool for exhaustive surface exports.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Largest pool representable by the bitmask encoding of [`EnsembleMask`].
pub const MAX_POOL: usize = 64;

/// Largest pool [`enumerate_teams`] will expand (2^N masks are materialized).
pub const MAX_ENUMERATED_POOL: usize = 20;

/// Window fill below which diversity metrics are considered unreliable and
/// the engine defers decider training.
pub const DEFAULT_COLD_START_ROWS: usize = 30;

/// Binary inclusion vector over a pool of `len` models.
///
/// Bit `i` of `bits` is model `i`; the integer encoding doubles as the
/// canonical ordering for team enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnsembleMask {
    bits: u64,
    len: usize,
}

impl EnsembleMask {
    pub fn new(bits: u64, len: usize) -> Result<Self> {
        if len == 0 || len > MAX_POOL {
            return Err(Error::PoolTooLarge { n: len, max: MAX_POOL });
        }
        if len < MAX_POOL && bits >> len != 0 {
            return Err(Error::ModelOutOfRange {
                index: 63 - bits.leading_zeros() as usize,
                pool: len,
            });
        }
        Ok(Self { bits, len })
    }

    pub fn from_bools(included: &[bool]) -> Result<Self> {
        let mut bits = 0u64;
        for (i, &b) in included.iter().enumerate() {
            if b {
                bits |= 1u64 << i;
            }
        }
        Self::new(bits, included.len())
    }

    /// Mask with every model of an `n`-pool included.
    pub fn full(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_POOL {
            return Err(Error::PoolTooLarge { n, max: MAX_POOL });
        }
        let bits = if n == MAX_POOL { u64::MAX } else { (1u64 << n) - 1 };
        Ok(Self { bits, len: n })
    }

    /// Mask with only `model` included.
    pub fn single(model: usize, n: usize) -> Result<Self> {
        if model >= n {
            return Err(Error::ModelOutOfRange { index: model, pool: n });
        }
        Self::new(1u64 << model, n)
    }

    #[inline]
    pub fn bits(&self) -> u64 {
        self.bits
    }

    /// Pool size N (not the number of selected models).
    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    /// Number of selected models.
    #[inline]
    pub fn popcount(&self) -> usize {
        self.bits.count_ones() as usize
    }

    #[inline]
    pub fn contains(&self, model: usize) -> bool {
        model < self.len && self.bits >> model & 1 == 1
    }

    /// Selected model indices in ascending order.
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        let bits = self.bits;
        (0..self.len).filter(move |i| bits >> i & 1 == 1)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.contains(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct Row {
    /// Bit `i` set = model `i` answered correctly on this query.
    correct: u64,
    /// Per-model chosen answer index.
    answers: Vec<u16>,
}

/// Ring buffer of the last `capacity` queries' correctness bits and answers.
///
/// Correctness rows and answer rows are pushed together and therefore always
/// stay aligned. A single writer appends; metric computations only read.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FailureHistory {
    n_models: usize,
    capacity: usize,
    rows: VecDeque<Row>,
}

impl FailureHistory {
    pub fn new(n_models: usize, capacity: usize) -> Result<Self> {
        if n_models == 0 || n_models > MAX_POOL {
            return Err(Error::PoolTooLarge { n: n_models, max: MAX_POOL });
        }
        if capacity == 0 {
            return Err(Error::InvalidConfig("history capacity must be positive".into()));
        }
        Ok(Self { n_models, capacity, rows: VecDeque::with_capacity(capacity) })
    }

    /// Append one query's outcome; evicts the oldest row when full.
    pub fn push(&mut self, correctness: &[bool], answers: &[usize]) -> Result<()> {
        if correctness.len() != self.n_models {
            return Err(Error::DimensionMismatch { expected: self.n_models, got: correctness.len() });
        }
        if answers.len() != self.n_models {
            return Err(Error::DimensionMismatch { expected: self.n_models, got: answers.len() });
        }
        let mut correct = 0u64;
        for (i, &c) in correctness.iter().enumerate() {
            if c {
                correct |= 1u64 << i;
            }
        }
        let answers = answers
            .iter()
            .map(|&a| u16::try_from(a).map_err(|_| Error::InvalidRecord("answer index exceeds u16".into())))
            .collect::<Result<Vec<u16>>>()?;
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(Row { correct, answers });
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    #[inline]
    pub fn n_models(&self) -> usize {
        self.n_models
    }

    /// True while the window holds fewer than [`DEFAULT_COLD_START_ROWS`] rows.
    pub fn is_cold_start(&self) -> bool {
        self.rows.len() < DEFAULT_COLD_START_ROWS
    }

    /// Correctness of one model on one window row (row 0 = oldest retained).
    pub fn was_correct(&self, row: usize, model: usize) -> Option<bool> {
        self.rows.get(row).map(|r| r.correct >> model & 1 == 1)
    }

    /// Answer index of one model on one window row.
    pub fn answer(&self, row: usize, model: usize) -> Option<usize> {
        self.rows.get(row).map(|r| r.answers[model] as usize)
    }

    /// Fraction of window rows each model answered correctly; 0.5 prior when
    /// the window is empty.
    pub fn per_model_accuracy(&self) -> Vec<f64> {
        if self.rows.is_empty() {
            return vec![0.5; self.n_models];
        }
        let denom = self.rows.len() as f64;
        (0..self.n_models)
            .map(|i| {
                let hits = self.rows.iter().filter(|r| r.correct >> i & 1 == 1).count();
                hits as f64 / denom
            })
            .collect()
    }

    fn check_mask(&self, mask: &EnsembleMask) -> Result<()> {
        if mask.len() != self.n_models {
            return Err(Error::DimensionMismatch { expected: self.n_models, got: mask.len() });
        }
        Ok(())
    }
}

/// Per-focal negative-correlation scores of one team plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalScores {
    /// Team members in ascending model order, aligned with `rho`.
    pub members: Vec<usize>,
    /// Focal negative correlation per member, undefined entries replaced by 1.0.
    pub rho: Vec<f64>,
    /// True where the member never failed in the window and 1.0 was substituted.
    pub undefined: Vec<bool>,
    /// Mean of `rho`: the team's focal diversity.
    pub lambda: f64,
}

/// Focal negative correlation of `focal` within the team `mask`.
///
/// Over window rows where the focal model failed, `n_j` counts rows on which
/// exactly `j` of the team's members (focal included) failed together. With
/// `p_j = n_j / failure_rows`, the score is `1 - P(2)/P(1)` where
/// `P(1) = sum_j (j/m) p_j` and `P(2) = sum_j j(j-1)/(m(m-1)) p_j` for team
/// size `m`. Normalizing `p_j` by the focal-failure row count rather than the
/// window length is observationally identical: the constant cancels in the
/// ratio.
///
/// Returns `Ok(None)` when the focal model never failed in the window; the
/// caller decides what to substitute (1.0 is the maximum-diversity limit: a
/// never-failing member contributes no co-failures).
pub fn focal_negative_correlation(
    history: &FailureHistory,
    mask: &EnsembleMask,
    focal: usize,
) -> Result<Option<f64>> {
    history.check_mask(mask)?;
    if !mask.contains(focal) {
        return Err(Error::FocalNotInMask { focal });
    }
    let m = mask.popcount();
    if m < 2 {
        return Err(Error::MaskTooSmall { size: m, min: 2 });
    }
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }

    let mut n_j = vec![0u64; m + 1];
    let mut failure_rows = 0u64;
    for row in &history.rows {
        let fails = !row.correct & mask.bits();
        if fails >> focal & 1 == 1 {
            failure_rows += 1;
            n_j[fails.count_ones() as usize] += 1;
        }
    }
    if failure_rows == 0 {
        return Ok(None);
    }

    let denom = failure_rows as f64;
    let mf = m as f64;
    let mut p1 = 0.0;
    let mut p2 = 0.0;
    for (j, &count) in n_j.iter().enumerate().skip(1) {
        if count == 0 {
            continue;
        }
        let pj = count as f64 / denom;
        p1 += j as f64 / mf * pj;
        p2 += (j * (j - 1)) as f64 / (mf * (mf - 1.0)) * pj;
    }
    Ok(Some(1.0 - p2 / p1))
}

/// Focal diversity of a team: the mean focal negative correlation over its
/// members, with never-failing members scored 1.0 and flagged.
pub fn focal_diversity(history: &FailureHistory, mask: &EnsembleMask) -> Result<FocalScores> {
    let m = mask.popcount();
    if m < 2 {
        return Err(Error::MaskTooSmall { size: m, min: 2 });
    }
    let members: Vec<usize> = mask.members().collect();
    let mut rho = Vec::with_capacity(m);
    let mut undefined = Vec::with_capacity(m);
    for &focal in &members {
        match focal_negative_correlation(history, mask, focal)? {
            Some(score) => {
                rho.push(score);
                undefined.push(false);
            }
            None => {
                rho.push(1.0);
                undefined.push(true);
            }
        }
    }
    let lambda = rho.iter().sum::<f64>() / rho.len() as f64;
    Ok(FocalScores { members, rho, undefined, lambda })
}

/// Fleiss' kappa over the window: raters are the team members, items are the
/// window rows, categories are the `k` answer indices.
///
/// Returns exactly 1.0 in the degenerate all-identical case where the
/// expected agreement reaches 1 and the usual ratio is 0/0.
pub fn fleiss_kappa(history: &FailureHistory, mask: &EnsembleMask, k: usize) -> Result<f64> {
    history.check_mask(mask)?;
    let m = mask.popcount();
    if m < 2 {
        return Err(Error::MaskTooSmall { size: m, min: 2 });
    }
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("choice count must be positive".into()));
    }

    let items = history.len() as f64;
    let raters = m as f64;
    let mut cat_totals = vec![0u64; k];
    let mut counts = vec![0u64; k];
    let mut sum_item_agreement = 0.0;
    for row in &history.rows {
        counts.iter_mut().for_each(|c| *c = 0);
        for member in mask.members() {
            let a = row.answers[member] as usize;
            if a >= k {
                return Err(Error::InvalidRecord("answer index out of range for choice count".into()));
            }
            counts[a] += 1;
            cat_totals[a] += 1;
        }
        let sum_sq: u64 = counts.iter().map(|&c| c * c).sum();
        sum_item_agreement += (sum_sq as f64 - raters) / (raters * (raters - 1.0));
    }
    let p_bar = sum_item_agreement / items;
    let total = items * raters;
    let p_e: f64 = cat_totals
        .iter()
        .map(|&t| {
            let frac = t as f64 / total;
            frac * frac
        })
        .sum();
    if 1.0 - p_e < 1e-12 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Every team of size >= `min_size` from an `n`-pool, in ascending order of
/// the integer mask encoding.
pub fn enumerate_teams(n: usize, min_size: usize) -> Result<Vec<EnsembleMask>> {
    if n < 2 {
        return Err(Error::InvalidConfig("team enumeration needs a pool of at least 2".into()));
    }
    if n > MAX_ENUMERATED_POOL {
        return Err(Error::PoolTooLarge { n, max: MAX_ENUMERATED_POOL });
    }
    if min_size < 2 {
        return Err(Error::InvalidConfig("minimum team size is 2".into()));
    }
    let mut teams = Vec::new();
    for bits in 1u64..1u64 << n {
        if bits.count_ones() as usize >= min_size {
            teams.push(EnsembleMask { bits, len: n });
        }
    }
    Ok(teams)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history_from_rows(n: usize, capacity: usize, rows: &[(&[bool], &[usize])]) -> FailureHistory {
        let mut h = FailureHistory::new(n, capacity).unwrap();
        for (c, a) in rows {
            h.push(c, a).unwrap();
        }
        h
    }

    #[test]
    fn push_appends_and_evicts_fifo() {
        let mut h = FailureHistory::new(3, 2).unwrap();
        h.push(&[true, false, true], &[0, 1, 0]).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h.was_correct(0, 0), Some(true));
        assert_eq!(h.was_correct(0, 1), Some(false));

        h.push(&[false, false, false], &[1, 1, 1]).unwrap();
        h.push(&[true, true, true], &[2, 2, 2]).unwrap();
        assert_eq!(h.len(), 2);
        // oldest row (all-correct row A) evicted; B then C remain
        assert_eq!(h.was_correct(0, 0), Some(false));
        assert_eq!(h.answer(1, 2), Some(2));
    }

    #[test]
    fn push_rejects_length_mismatch() {
        let mut h = FailureHistory::new(3, 4).unwrap();
        let err = h.push(&[true, false, true, true], &[0, 0, 0, 0]).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 3, got: 4 });
        let err = h.push(&[true, false, true], &[0, 0]).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 3, got: 2 });
    }

    #[test]
    fn focal_score_matches_hand_computation() {
        // Team of 3; focal = model 0. Rows where the focal fails, with
        // co-failure counts j=1 twice, j=2 once, j=3 once:
        // p = [0.5, 0.25, 0.25], P(1) = 7/12, P(2) = 1/3, rho = 1 - 4/7.
        let rows: &[(&[bool], &[usize])] = &[
            (&[false, true, true], &[1, 0, 0]),
            (&[false, true, true], &[2, 0, 0]),
            (&[false, false, true], &[1, 1, 0]),
            (&[false, false, false], &[1, 1, 1]),
            (&[true, true, true], &[0, 0, 0]), // focal correct: ignored
        ];
        let h = history_from_rows(3, 10, rows);
        let mask = EnsembleMask::full(3).unwrap();
        let rho = focal_negative_correlation(&h, &mask, 0).unwrap().unwrap();
        assert!((rho - (1.0 - (1.0 / 3.0) / (7.0 / 12.0))).abs() < 1e-12);
        assert!((rho - 0.42857142857142855).abs() < 1e-12);
    }

    #[test]
    fn focal_score_is_one_when_focal_fails_alone() {
        let rows: &[(&[bool], &[usize])] = &[
            (&[false, true, true], &[1, 0, 0]),
            (&[false, true, true], &[3, 0, 0]),
        ];
        let h = history_from_rows(3, 10, rows);
        let mask = EnsembleMask::full(3).unwrap();
        assert_eq!(focal_negative_correlation(&h, &mask, 0).unwrap(), Some(1.0));
    }

    #[test]
    fn focal_score_is_zero_when_all_fail_together() {
        let rows: &[(&[bool], &[usize])] = &[
            (&[false, false], &[1, 1]),
            (&[false, false], &[2, 3]),
            (&[true, true], &[0, 0]),
        ];
        let h = history_from_rows(2, 10, rows);
        let mask = EnsembleMask::full(2).unwrap();
        assert_eq!(focal_negative_correlation(&h, &mask, 0).unwrap(), Some(0.0));
    }

    #[test]
    fn focal_score_undefined_when_focal_never_fails() {
        let rows: &[(&[bool], &[usize])] = &[(&[true, false], &[0, 1])];
        let h = history_from_rows(2, 10, rows);
        let mask = EnsembleMask::full(2).unwrap();
        assert_eq!(focal_negative_correlation(&h, &mask, 0).unwrap(), None);
    }

    #[test]
    fn focal_score_contract_errors() {
        let rows: &[(&[bool], &[usize])] = &[(&[false, false, true], &[1, 1, 0])];
        let h = history_from_rows(3, 10, rows);
        let pair = EnsembleMask::from_bools(&[true, true, false]).unwrap();
        assert_eq!(
            focal_negative_correlation(&h, &pair, 2).unwrap_err(),
            Error::FocalNotInMask { focal: 2 }
        );
        let single = EnsembleMask::single(0, 3).unwrap();
        assert_eq!(
            focal_negative_correlation(&h, &single, 0).unwrap_err(),
            Error::MaskTooSmall { size: 1, min: 2 }
        );
        let empty = FailureHistory::new(3, 10).unwrap();
        let mask = EnsembleMask::full(3).unwrap();
        assert_eq!(focal_negative_correlation(&empty, &mask, 0).unwrap_err(), Error::EmptyHistory);
    }

    #[test]
    fn diversity_is_mean_of_member_scores() {
        // Construct a history where the two members' rho values differ.
        let rows: &[(&[bool], &[usize])] = &[
            (&[false, true], &[1, 0]),
            (&[false, false], &[1, 1]),
            (&[true, false], &[0, 2]),
        ];
        let h = history_from_rows(2, 10, rows);
        let mask = EnsembleMask::full(2).unwrap();
        let scores = focal_diversity(&h, &mask).unwrap();
        let expect: f64 = (scores.rho[0] + scores.rho[1]) / 2.0;
        assert_eq!(scores.lambda, expect);
        assert_eq!(scores.members, vec![0, 1]);
        assert!(!scores.undefined.iter().any(|&u| u));
    }

    #[test]
    fn diversity_substitutes_one_for_never_failing_members() {
        let rows: &[(&[bool], &[usize])] = &[
            (&[true, false], &[0, 1]),
            (&[false, true], &[2, 0]),
        ];
        // Neither member ever co-fails with the other.
        let h = history_from_rows(2, 10, rows);
        let mask = EnsembleMask::full(2).unwrap();
        let scores = focal_diversity(&h, &mask).unwrap();
        assert_eq!(scores.lambda, 1.0);
    }

    #[test]
    fn diversity_rejects_singleton() {
        let rows: &[(&[bool], &[usize])] = &[(&[false, false], &[1, 1])];
        let h = history_from_rows(2, 10, rows);
        let single = EnsembleMask::single(1, 2).unwrap();
        assert_eq!(
            focal_diversity(&h, &single).unwrap_err(),
            Error::MaskTooSmall { size: 1, min: 2 }
        );
    }

    #[test]
    fn kappa_perfect_agreement() {
        let rows: &[(&[bool], &[usize])] = &[
            (&[true, true, true], &[2, 2, 2]),
            (&[false, false, false], &[1, 1, 1]),
        ];
        let h = history_from_rows(3, 10, rows);
        let mask = EnsembleMask::full(3).unwrap();
        assert_eq!(fleiss_kappa(&h, &mask, 4).unwrap(), 1.0);
    }

    #[test]
    fn kappa_matches_hand_computation() {
        // 3 raters, 2 items, 2 categories: item1 = (A,A,B), item2 = (A,B,B)
        // P_bar = 1/3, P_e = 1/2, kappa = -1/3.
        let rows: &[(&[bool], &[usize])] = &[
            (&[true, true, false], &[0, 0, 1]),
            (&[true, false, false], &[0, 1, 1]),
        ];
        let h = history_from_rows(3, 10, rows);
        let mask = EnsembleMask::full(3).unwrap();
        let kappa = fleiss_kappa(&h, &mask, 2).unwrap();
        assert!((kappa - (-1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn kappa_is_minus_one_for_balanced_disagreement() {
        let rows: &[(&[bool], &[usize])] = &[
            (&[true, false], &[0, 1]),
            (&[false, true], &[1, 0]),
        ];
        let h = history_from_rows(2, 10, rows);
        let mask = EnsembleMask::full(2).unwrap();
        let kappa = fleiss_kappa(&h, &mask, 2).unwrap();
        assert!((kappa - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn enumerate_teams_counts_and_order() {
        assert_eq!(enumerate_teams(8, 2).unwrap().len(), 247); // 2^8 - 8 - 1
        assert_eq!(enumerate_teams(2, 2).unwrap().len(), 1);
        let teams = enumerate_teams(3, 2).unwrap();
        let bits: Vec<u64> = teams.iter().map(|t| t.bits()).collect();
        assert_eq!(bits, vec![0b011, 0b101, 0b110, 0b111]);
    }

    #[test]
    fn mask_basics() {
        let mask = EnsembleMask::from_bools(&[true, false, true]).unwrap();
        assert_eq!(mask.popcount(), 2);
        assert!(mask.contains(0) && !mask.contains(1) && mask.contains(2));
        assert_eq!(mask.members().collect::<Vec<_>>(), vec![0, 2]);
        assert!(EnsembleMask::new(0b1000, 3).is_err());
    }

    #[test]
    fn cold_start_flag_clears_at_threshold() {
        let mut h = FailureHistory::new(2, 500).unwrap();
        for _ in 0..DEFAULT_COLD_START_ROWS - 1 {
            h.push(&[true, false], &[0, 1]).unwrap();
        }
        assert!(h.is_cold_start());
        h.push(&[true, false], &[0, 1]).unwrap();
        assert!(!h.is_cold_start());
    }
}
