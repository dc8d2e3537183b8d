//! Two-stage stratified sampling with plug-in allocation, plus the uniform
//! sampling baseline.
//!
//! Stage 1 spends `N1 = round(C * N)` draws evenly across the strata and
//! estimates each stratum's positive rate and standard deviation. Stage 2
//! spends the remaining `N2` draws in proportion to `sqrt(p_hat) * sigma_hat`.
//! The final per-stratum estimates pool the draws of both stages.
//!
//! The budget `N` counts oracle calls. A compound predicate calls one oracle
//! per base predicate, so it buys `N / m` record draws for `m` distinct bases.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_ci_with, combined_mean, BootstrapConfig, StratumResample};
use crate::data::{Dataset, OracleLedger};
use crate::error::{AbaeError, Result};
use crate::estimators::{combine_estimate, optimal_allocation, AllocationPlan, StratumStats};
use crate::predicate::{BoundPredicate, PredicateExpr};
use crate::rng::{derive_seed, stream, PartialShuffle, BOOTSTRAP_STREAM, SAMPLING_STREAM};
use crate::stratify::{stratify_by_quantile, Stratification};

pub const DEFAULT_STAGE1_FRACTION: f64 = 0.5;
pub const DEFAULT_NUM_STRATA: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_BOOTSTRAP_TRIALS: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Avg,
    Sum,
    Count,
}

impl std::str::FromStr for Aggregate {
    type Err = AbaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" => Ok(Aggregate::Avg),
            "sum" => Ok(Aggregate::Sum),
            "count" => Ok(Aggregate::Count),
            _ => Err(AbaeError::config(format!("unknown aggregate `{s}`"))),
        }
    }
}

/// Where stratification scores come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxySource {
    /// A proxy column of the dataset.
    Column(String),
    /// Per-predicate proxy columns combined with the score calculus.
    Expression(PredicateExpr),
}

/// How Stage 2 treats records already drawn in Stage 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Mode {
    /// Draw only from records not seen in Stage 1.
    #[default]
    Exclude,
    /// Draw afresh from the whole stratum and deduplicate against Stage 1;
    /// repeated records cost nothing.
    FaithfulResample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Abae,
    Uniform,
    /// Two-stage sampling whose final estimate ignores the Stage 1 draws.
    AbaeNoReuse,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Abae => "abae",
            Method::Uniform => "uniform",
            Method::AbaeNoReuse => "abae_no_reuse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    #[serde(default)]
    pub aggregate: Aggregate,
    pub predicate: PredicateExpr,
    /// Defaults to the score calculus over the predicate's base names.
    #[serde(default)]
    pub proxy: Option<ProxySource>,
    pub budget: usize,
    #[serde(default = "default_stage1_fraction")]
    pub stage1_fraction: f64,
    #[serde(default = "default_num_strata")]
    pub num_strata: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_bootstrap_trials")]
    pub bootstrap_trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stage2_mode: Stage2Mode,
}

fn default_stage1_fraction() -> f64 {
    DEFAULT_STAGE1_FRACTION
}
fn default_num_strata() -> usize {
    DEFAULT_NUM_STRATA
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_bootstrap_trials() -> usize {
    DEFAULT_BOOTSTRAP_TRIALS
}

impl QueryConfig {
    pub fn new(predicate: PredicateExpr, budget: usize) -> Self {
        QueryConfig {
            aggregate: Aggregate::Avg,
            predicate,
            proxy: None,
            budget,
            stage1_fraction: DEFAULT_STAGE1_FRACTION,
            num_strata: DEFAULT_NUM_STRATA,
            alpha: DEFAULT_ALPHA,
            bootstrap_trials: DEFAULT_BOOTSTRAP_TRIALS,
            seed: 0,
            stage2_mode: Stage2Mode::Exclude,
        }
    }

    pub fn proxy_source(&self) -> ProxySource {
        self.proxy
            .clone()
            .unwrap_or_else(|| ProxySource::Expression(self.predicate.clone()))
    }

    /// Oracle calls charged per drawn record.
    pub fn calls_per_record(&self) -> usize {
        self.predicate.base_names().len().max(1)
    }

    pub fn record_budget(&self) -> usize {
        self.budget / self.calls_per_record()
    }

    /// `(N1, N2)` in record draws.
    pub fn stage_budgets(&self) -> (usize, usize) {
        let total = self.record_budget();
        let n1 = ((self.stage1_fraction * total as f64).round() as usize).min(total);
        (n1, total - n1)
    }

    pub fn bootstrap_config(&self, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            trials: self.bootstrap_trials,
            alpha: self.alpha,
            seed: derive_seed(seed, BOOTSTRAP_STREAM),
        }
    }

    /// Checks everything except the Stage 1 floor, which only applies to the
    /// two-stage methods.
    pub fn validate_common(&self) -> Result<()> {
        if self.record_budget() == 0 {
            return Err(AbaeError::config(format!(
                "budget {} cannot cover one draw at {} oracle calls per record",
                self.budget,
                self.calls_per_record()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AbaeError::config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.bootstrap_trials == 0 {
            return Err(AbaeError::config("bootstrap trials must be at least 1"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction < 1.0) {
            return Err(AbaeError::config(format!(
                "stage-1 fraction must lie in (0, 1), got {}",
                self.stage1_fraction
            )));
        }
        if self.num_strata == 0 {
            return Err(AbaeError::config("number of strata must be at least 1"));
        }
        let (n1, _) = self.stage_budgets();
        if n1 < self.num_strata {
            return Err(AbaeError::config(format!(
                "stage-1 budget {n1} is smaller than the number of strata {}",
                self.num_strata
            )));
        }
        Ok(())
    }
}

/// Draws made by one query execution.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub method: Method,
    pub seed: u64,
    pub stratum_sizes: Vec<usize>,
    /// Stage 1 record ids per stratum.
    pub stage1: Vec<Vec<usize>>,
    /// Stage 2 record ids per stratum, as drawn.
    pub stage2: Vec<Vec<usize>>,
    /// `(statistic, matched)` of the records feeding the final estimate. The
    /// statistic of an unmatched record is never read and is stored as 0.
    pub samples: Vec<Vec<(f64, bool)>>,
    pub stats: Vec<StratumStats>,
    pub allocation: AllocationPlan,
    pub ledger: OracleLedger,
}

impl SamplerState {
    pub fn estimate(&self, aggregate: Aggregate) -> Result<f64> {
        let avg = combine_estimate(&self.stats)?;
        let count: f64 = self
            .stats
            .iter()
            .zip(&self.stratum_sizes)
            .map(|(s, &n)| s.p_hat * n as f64)
            .sum();
        Ok(match aggregate {
            Aggregate::Avg => avg,
            Aggregate::Count => count,
            Aggregate::Sum => avg * count,
        })
    }

    /// Distinct records whose oracle was charged.
    pub fn records_charged(&self) -> usize {
        let mut seen: HashSet<usize> = HashSet::new();
        self.stage1
            .iter()
            .chain(&self.stage2)
            .flatten()
            .for_each(|&i| {
                seen.insert(i);
            });
        seen.len()
    }
}

pub(crate) fn resample_aggregate(
    aggregate: Aggregate,
    sizes: &[usize],
    strata: &[StratumResample],
) -> Option<f64> {
    let count = || {
        strata
            .iter()
            .zip(sizes)
            .map(|(s, &n)| s.p_hat() * n as f64)
            .sum::<f64>()
    };
    match aggregate {
        Aggregate::Avg => combined_mean(strata),
        Aggregate::Count => Some(count()),
        Aggregate::Sum => Some(combined_mean(strata).map_or(0.0, |avg| avg * count())),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub method: Method,
    pub aggregate: Aggregate,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_stratum: Vec<StratumStats>,
    pub allocation_used: AllocationPlan,
    pub oracle_calls: usize,
    pub oracle_budget: usize,
    pub stage1_draws: usize,
    pub stage2_draws: usize,
    pub bootstrap_skipped: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Splits `total` draws across strata by `weights`, flooring each share and
/// capping it at the stratum's `available` records. The leftover goes one draw
/// at a time to strata in descending weight order, cycling while budget and
/// capacity remain; zero-weight strata are used only once every weighted
/// stratum is full.
pub fn allocate_draws(total: usize, weights: &[f64], available: &[usize]) -> Vec<usize> {
    let mut counts: Vec<usize> = weights
        .iter()
        .zip(available)
        .map(|(w, &a)| ((total as f64 * w).floor() as usize).min(a))
        .collect();
    let mut remaining = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let (weighted, unweighted): (Vec<usize>, Vec<usize>) =
        order.into_iter().partition(|&k| weights[k] > 0.0);
    for group in [weighted, unweighted] {
        while remaining > 0 {
            let mut progressed = false;
            for &k in &group {
                if remaining == 0 {
                    break;
                }
                if counts[k] < available[k] {
                    counts[k] += 1;
                    remaining -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }
    counts
}

fn observe(
    ledger: &mut OracleLedger,
    dataset: &Dataset,
    predicate: &BoundPredicate,
    id: usize,
) -> Result<(f64, bool)> {
    let matched = ledger.evaluate(dataset, id, predicate)?;
    Ok((if matched { dataset.statistic(id) } else { 0.0 }, matched))
}

fn stats_of(samples: &[Vec<(f64, bool)>]) -> Vec<StratumStats> {
    samples
        .iter()
        .map(|s| {
            let positives = s.iter().filter(|x| x.1).map(|x| x.0).collect();
            StratumStats::from_positives(s.len(), positives)
        })
        .collect()
}

/// A query bound to a dataset and stratified, ready to execute repeatedly.
#[derive(Debug, Clone)]
pub struct PreparedQuery<'a> {
    dataset: &'a Dataset,
    config: QueryConfig,
    predicate: BoundPredicate,
    stratification: Stratification,
}

impl<'a> PreparedQuery<'a> {
    pub fn new(dataset: &'a Dataset, config: QueryConfig) -> Result<Self> {
        let scores = match config.proxy_source() {
            ProxySource::Column(name) => dataset.proxy(&name)?.to_vec(),
            ProxySource::Expression(expr) => dataset.expression_scores(&expr)?,
        };
        let name = match config.proxy_source() {
            ProxySource::Column(name) => name,
            ProxySource::Expression(expr) => expr.to_string(),
        };
        let stratification = stratify_by_quantile(&scores, config.num_strata, &name)?;
        Self::with_stratification(dataset, config, stratification)
    }

    pub fn with_stratification(
        dataset: &'a Dataset,
        config: QueryConfig,
        stratification: Stratification,
    ) -> Result<Self> {
        if stratification.total() != dataset.len() {
            return Err(AbaeError::DimensionMismatch {
                expected: dataset.len(),
                got: stratification.total(),
            });
        }
        let predicate = dataset.bind_predicate(&config.predicate)?;
        let config = QueryConfig {
            num_strata: stratification.num_strata(),
            ..config
        };
        Ok(PreparedQuery {
            dataset,
            config,
            predicate,
            stratification,
        })
    }

    pub fn config(&self) -> &QueryConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn stratification(&self) -> &Stratification {
        &self.stratification
    }

    /// Runs the sampling part of `method` with the given seed.
    pub fn sample(&self, method: Method, seed: u64) -> Result<SamplerState> {
        match method {
            Method::Uniform => self.sample_uniform(seed),
            Method::Abae => self.sample_two_stage(seed, true, method),
            Method::AbaeNoReuse => self.sample_two_stage(seed, false, method),
        }
    }

    fn sample_uniform(&self, seed: u64) -> Result<SamplerState> {
        self.config.validate_common()?;
        let n = self.dataset.len();
        let mut rng = stream(derive_seed(seed, SAMPLING_STREAM));
        let mut ledger = OracleLedger::new(self.config.budget);
        let ids = PartialShuffle::new(n).draw(&mut rng, self.config.record_budget());
        let samples = vec![ids
            .iter()
            .map(|&id| observe(&mut ledger, self.dataset, &self.predicate, id))
            .collect::<Result<Vec<_>>>()?];
        Ok(SamplerState {
            method: Method::Uniform,
            seed,
            stratum_sizes: vec![n],
            stats: stats_of(&samples),
            stage1: vec![ids],
            stage2: vec![Vec::new()],
            samples,
            allocation: AllocationPlan {
                weights: vec![1.0],
                fallback: false,
            },
            ledger,
        })
    }

    fn sample_two_stage(&self, seed: u64, reuse: bool, method: Method) -> Result<SamplerState> {
        self.config.validate()?;
        let strata = self.stratification.strata();
        let k = strata.len();
        let sizes = self.stratification.sizes();
        let (n1, n2) = self.config.stage_budgets();
        let mut rng = stream(derive_seed(seed, SAMPLING_STREAM));
        let mut ledger = OracleLedger::new(self.config.budget);
        let mut shuffles: Vec<PartialShuffle> =
            sizes.iter().map(|&s| PartialShuffle::new(s)).collect();

        // Stage 1: floor(N1/K) per stratum, the remainder to the first strata.
        let mut unspent = 0;
        let mut stage1 = Vec::with_capacity(k);
        let mut stage1_samples = Vec::with_capacity(k);
        for s in 0..k {
            let want = n1 / k + usize::from(s < n1 % k);
            let ids: Vec<usize> = shuffles[s]
                .draw(&mut rng, want)
                .into_iter()
                .map(|p| strata[s][p])
                .collect();
            unspent += want - ids.len();
            let obs = ids
                .iter()
                .map(|&id| observe(&mut ledger, self.dataset, &self.predicate, id))
                .collect::<Result<Vec<_>>>()?;
            stage1.push(ids);
            stage1_samples.push(obs);
        }
        let pilot = stats_of(&stage1_samples);
        let p: Vec<f64> = pilot.iter().map(|s| s.p_hat).collect();
        let sigma: Vec<f64> = pilot.iter().map(|s| s.sigma_hat).collect();
        let allocation = optimal_allocation(&p, &sigma)?;

        // Stage 2.
        let faithful = self.config.stage2_mode == Stage2Mode::FaithfulResample;
        let available: Vec<usize> = if faithful {
            sizes.clone()
        } else {
            shuffles.iter().map(PartialShuffle::remaining).collect()
        };
        let counts = allocate_draws(n2 + unspent, &allocation.weights, &available);
        let mut stage2 = Vec::with_capacity(k);
        let mut samples = Vec::with_capacity(k);
        for s in 0..k {
            let positions = if faithful {
                PartialShuffle::new(sizes[s]).draw(&mut rng, counts[s])
            } else {
                shuffles[s].draw(&mut rng, counts[s])
            };
            let ids: Vec<usize> = positions.into_iter().map(|p| strata[s][p]).collect();
            let seen: HashSet<usize> = if faithful && reuse {
                stage1[s].iter().copied().collect()
            } else {
                HashSet::new()
            };
            let mut obs = if reuse {
                std::mem::take(&mut stage1_samples[s])
            } else {
                Vec::new()
            };
            for &id in &ids {
                if !seen.contains(&id) {
                    obs.push(observe(&mut ledger, self.dataset, &self.predicate, id)?);
                }
            }
            stage2.push(ids);
            samples.push(obs);
        }

        Ok(SamplerState {
            method,
            seed,
            stratum_sizes: sizes,
            stats: stats_of(&samples),
            stage1,
            stage2,
            samples,
            allocation,
            ledger,
        })
    }

    /// Sampling plus point estimate and bootstrap interval.
    pub fn report(&self, method: Method, seed: u64) -> Result<EstimateReport> {
        let state = self.sample(method, seed)?;
        self.report_from_state(state)
    }

    pub fn report_from_state(&self, state: SamplerState) -> Result<EstimateReport> {
        let aggregate = self.config.aggregate;
        let estimate = state.estimate(aggregate)?;
        let sizes = state.stratum_sizes.clone();
        let ci = bootstrap_ci_with(
            &state.samples,
            &self.config.bootstrap_config(state.seed),
            |r| resample_aggregate(aggregate, &sizes, r),
        )?;
        let mut warnings = Vec::new();
        if state.allocation.fallback {
            warnings.push(
                "stage-1 estimates were degenerate; stage 2 used a uniform allocation".to_owned(),
            );
        }
        if ci.degenerate {
            warnings.push(format!(
                "{} of {} bootstrap trials had no positive samples",
                ci.skipped, ci.trials
            ));
        }
        if !(ci.low <= estimate && estimate <= ci.high) {
            warnings.push("point estimate lies outside the bootstrap interval".to_owned());
        }
        Ok(EstimateReport {
            method: state.method,
            aggregate,
            estimate,
            ci_low: ci.low,
            ci_high: ci.high,
            oracle_calls: state.ledger.calls_made(),
            oracle_budget: self.config.budget,
            stage1_draws: state.stage1.iter().map(Vec::len).sum(),
            stage2_draws: state.stage2.iter().map(Vec::len).sum(),
            bootstrap_skipped: ci.skipped,
            seed: state.seed,
            per_stratum: state.stats,
            allocation_used: state.allocation,
            warnings,
        })
    }
}

/// Runs the two-stage sampler with the configured seed.
pub fn abae_sample(dataset: &Dataset, config: &QueryConfig) -> Result<EstimateReport> {
    PreparedQuery::new(dataset, config.clone())?.report(Method::Abae, config.seed)
}

/// Uniform sampling without replacement over the whole dataset, spending the
/// same budget. Stratification settings in `config` are ignored.
pub fn uniform_sample(dataset: &Dataset, config: &QueryConfig) -> Result<EstimateReport> {
    let config = QueryConfig {
        num_strata: 1,
        ..config.clone()
    };
    PreparedQuery::with_stratification(
        dataset,
        config.clone(),
        Stratification::whole(dataset.len()),
    )?
    .report(Method::Uniform, config.seed)
}
