//! Baseline evaluation, the exhaustive team diversity/accuracy surface, and
//! accuracy-versus-cost rows.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{query_cost, CostTable, QueryRecord};
use crate::diversity::{enumerate_teams, fleiss_kappa, focal_diversity, EnsembleMask, FailureHistory};
use crate::engine::{plurality_vote, Engine};
use crate::{Error, Result};

/// Pools larger than this are refused by the surface export (2^N teams).
pub const SURFACE_MAX_POOL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalOptions {
    /// Independent seeded runs of the random-subset baseline.
    pub subset_runs: usize,
    pub subset_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { subset_runs: 5, subset_seed: 0 }
    }
}

/// One method's aggregate results.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MethodRow {
    pub method: String,
    /// Accuracy in percent, 0..=100.
    pub accuracy_pct: f64,
    pub mean_pool_size: f64,
    pub mean_cost: f64,
    /// Std over seeds, present only for methods run with >= 2 seeds.
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none"))]
    pub accuracy_std_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskRow {
    pub task: String,
    pub method: String,
    pub n: usize,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub n_records: usize,
    pub n_models: usize,
    pub methods: Vec<MethodRow>,
    pub per_task: Vec<TaskRow>,
    pub subset_runs: usize,
}

fn check_records(records: &[QueryRecord]) -> Result<(usize, usize)> {
    let first = records.first().ok_or(Error::EmptyInput)?;
    let (n, k) = (first.n_models(), first.k);
    for rec in records {
        rec.validate()?;
        if rec.n_models() != n {
            return Err(Error::DimensionMismatch { expected: n, got: rec.n_models() });
        }
        if rec.k != k {
            return Err(Error::DimensionMismatch { expected: k, got: rec.k });
        }
    }
    Ok((n, k))
}

/// Accuracy bookkeeping per task plus overall.
struct TaskBins<'a> {
    records: &'a [QueryRecord],
    hits: Vec<(String, usize, usize)>, // task, hits, total
}

impl<'a> TaskBins<'a> {
    fn new(records: &'a [QueryRecord]) -> Self {
        Self { records, hits: Vec::new() }
    }

    fn record(&mut self, idx: usize, correct: bool) {
        let task = &self.records[idx].task;
        match self.hits.iter_mut().find(|(t, _, _)| t == task) {
            Some((_, h, n)) => {
                *h += usize::from(correct);
                *n += 1;
            }
            None => self.hits.push((task.clone(), usize::from(correct), 1)),
        }
    }

    fn rows(&self, method: &str) -> Vec<TaskRow> {
        self.hits
            .iter()
            .map(|(task, h, n)| TaskRow {
                task: task.clone(),
                method: method.into(),
                n: *n,
                accuracy_pct: 100.0 * *h as f64 / *n as f64,
            })
            .collect()
    }
}

/// Evaluate baselines on recorded outputs: each single model, the full-pool
/// plurality vote, a seeded random-subset vote, and (when an engine is
/// supplied) the trained two-agent system plus its decider-only routing mode.
pub fn eval_baselines(
    records: &[QueryRecord],
    table: &CostTable,
    engine: Option<&Engine>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let (n, _k) = check_records(records)?;
    let full = EnsembleMask::full(n)?;
    let full_cost = query_cost(&full, table)?;
    let total = records.len() as f64;

    let mut methods = Vec::new();
    let mut per_task = Vec::new();

    for model in 0..n {
        let method = format!("single_{model}");
        let mut bins = TaskBins::new(records);
        let mut hits = 0usize;
        for (idx, rec) in records.iter().enumerate() {
            let correct = rec.model_correctness()[model];
            hits += usize::from(correct);
            bins.record(idx, correct);
        }
        methods.push(MethodRow {
            method: method.clone(),
            accuracy_pct: 100.0 * hits as f64 / total,
            mean_pool_size: 1.0,
            mean_cost: table.cost_of(model)?,
            accuracy_std_pct: None,
        });
        per_task.extend(bins.rows(&method));
    }

    {
        let mut bins = TaskBins::new(records);
        let mut hits = 0usize;
        for (idx, rec) in records.iter().enumerate() {
            let correct = plurality_vote(rec, &full)? == rec.gold;
            hits += usize::from(correct);
            bins.record(idx, correct);
        }
        methods.push(MethodRow {
            method: "plurality_full".into(),
            accuracy_pct: 100.0 * hits as f64 / total,
            mean_pool_size: n as f64,
            mean_cost: full_cost,
            accuracy_std_pct: None,
        });
        per_task.extend(bins.rows("plurality_full"));
    }

    if opts.subset_runs > 0 {
        let mut bins = TaskBins::new(records);
        let mut run_accuracies = Vec::with_capacity(opts.subset_runs);
        let mut cost_sum = 0.0;
        let mut size_sum = 0.0;
        for run in 0..opts.subset_runs {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.subset_seed.wrapping_add(run as u64));
            let mut hits = 0usize;
            for (idx, rec) in records.iter().enumerate() {
                let mask = random_subset(n, &mut rng)?;
                size_sum += mask.popcount() as f64;
                cost_sum += query_cost(&mask, table)?;
                let correct = plurality_vote(rec, &mask)? == rec.gold;
                hits += usize::from(correct);
                bins.record(idx, correct);
            }
            run_accuracies.push(100.0 * hits as f64 / total);
        }
        let runs = opts.subset_runs as f64;
        let mean = run_accuracies.iter().sum::<f64>() / runs;
        let std = (opts.subset_runs >= 2).then(|| {
            let var = run_accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / (runs - 1.0);
            crate::math::sqrt(var)
        });
        methods.push(MethodRow {
            method: "random_subset".into(),
            accuracy_pct: mean,
            mean_pool_size: size_sum / (total * runs),
            mean_cost: cost_sum / (total * runs),
            accuracy_std_pct: std,
        });
        per_task.extend(bins.rows("random_subset"));
    }

    if let Some(engine) = engine {
        {
            let mut eval_engine = engine.clone();
            let mut bins = TaskBins::new(records);
            let mut hits = 0usize;
            let mut size_sum = 0.0;
            let mut cost_sum = 0.0;
            for (idx, rec) in records.iter().enumerate() {
                let out = eval_engine.eval_step(rec)?;
                size_sum += out.mask.popcount() as f64;
                cost_sum += query_cost(&out.mask, table)?;
                let correct = out.final_choice == rec.gold;
                hits += usize::from(correct);
                bins.record(idx, correct);
            }
            methods.push(MethodRow {
                method: "marl_focal".into(),
                accuracy_pct: 100.0 * hits as f64 / total,
                mean_pool_size: size_sum / total,
                mean_cost: cost_sum / total,
                accuracy_std_pct: None,
            });
            per_task.extend(bins.rows("marl_focal"));
        }
        {
            let mut route_engine = engine.clone();
            let mut bins = TaskBins::new(records);
            let mut hits = 0usize;
            let mut size_sum = 0.0;
            let mut cost_sum = 0.0;
            for (idx, rec) in records.iter().enumerate() {
                let out = route_engine.route_step(rec)?;
                size_sum += out.mask.popcount() as f64;
                cost_sum += query_cost(&out.mask, table)?;
                let correct = out.final_choice == rec.gold;
                hits += usize::from(correct);
                bins.record(idx, correct);
            }
            methods.push(MethodRow {
                method: "decider_route".into(),
                accuracy_pct: 100.0 * hits as f64 / total,
                mean_pool_size: size_sum / total,
                mean_cost: cost_sum / total,
                accuracy_std_pct: None,
            });
            per_task.extend(bins.rows("decider_route"));
        }
    }

    Ok(EvalReport {
        n_records: records.len(),
        n_models: n,
        methods,
        per_task,
        subset_runs: opts.subset_runs,
    })
}

/// Uniform team size in 2..=N, then a uniform subset of that size.
fn random_subset<R: Rng>(n: usize, rng: &mut R) -> Result<EnsembleMask> {
    let size = if n == 1 { 1 } else { rng.gen_range(2..=n) };
    let mut indices: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: the first `size` entries become the subset
    for i in 0..size {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut bits = vec![false; n];
    for &i in &indices[..size] {
        bits[i] = true;
    }
    EnsembleMask::from_bools(&bits)
}

/// One candidate team's diversity and accuracy over a dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SurfaceRow {
    pub mask: EnsembleMask,
    pub size: usize,
    pub focal_diversity: f64,
    pub fleiss_kappa: f64,
    /// Plurality-vote accuracy of the team over the dataset, as a fraction.
    pub accuracy: f64,
}

/// Diversity/accuracy surface over every team of size >= `min_size`, using
/// the whole dataset as the metric window. Rows are ordered by the mask's
/// integer encoding and are pure functions of (dataset, mask).
pub fn surface_rows(records: &[QueryRecord], min_size: usize) -> Result<Vec<SurfaceRow>> {
    let (n, k) = check_records(records)?;
    if n > SURFACE_MAX_POOL {
        return Err(Error::PoolTooLarge { n, max: SURFACE_MAX_POOL });
    }
    let mut history = FailureHistory::new(n, records.len())?;
    for rec in records {
        history.push(&rec.model_correctness(), &rec.model_answers())?;
    }

    let total = records.len() as f64;
    let mut rows = Vec::new();
    for mask in enumerate_teams(n, min_size)? {
        let scores = focal_diversity(&history, &mask)?;
        let kappa = fleiss_kappa(&history, &mask, k)?;
        let mut hits = 0usize;
        for rec in records {
            if plurality_vote(rec, &mask)? == rec.gold {
                hits += 1;
            }
        }
        rows.push(SurfaceRow {
            mask,
            size: mask.popcount(),
            focal_diversity: scores.lambda,
            fleiss_kappa: kappa,
            accuracy: hits as f64 / total,
        });
    }
    Ok(rows)
}

/// Plot-ready (method, accuracy, cost) rows, sorted by ascending cost.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostCurveRow {
    pub method: String,
    pub accuracy_pct: f64,
    pub mean_cost: f64,
}

pub fn cost_curve_rows(report: &EvalReport) -> Vec<CostCurveRow> {
    let mut rows: Vec<CostCurveRow> = report
        .methods
        .iter()
        .map(|m| CostCurveRow {
            method: m.method.clone(),
            accuracy_pct: m.accuracy_pct,
            mean_cost: m.mean_cost,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.mean_cost
            .partial_cmp(&b.mean_cost)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| a.method.cmp(&b.method))
    });
    rows
}
