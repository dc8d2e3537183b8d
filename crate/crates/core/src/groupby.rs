//! Group-by queries: one stratification per group, with the sampling budget
//! split across stratifications to minimise the worst group's expected
//! squared error.
//!
//! Two oracle regimes are supported. With a single oracle, one call reveals
//! a record's group key, so every draw informs every group and estimates from
//! all stratifications are pooled by inverse-variance weighting. With one
//! oracle per group, each call reveals membership of one group only and a
//! group is estimated from its own stratification.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_replicates, combined_mean, percentile, StratumResample};
use crate::data::{Dataset, OracleLedger};
use crate::error::{AbaeError, Result};
use crate::estimators::{optimal_allocation, AllocationPlan, StratumStats};
use crate::optim::{nelder_mead, softmax_point, NelderMeadConfig};
use crate::rng::{derive_seed, stream, PartialShuffle, BOOTSTRAP_STREAM, SAMPLING_STREAM};
use crate::sampler::{
    allocate_draws, DEFAULT_ALPHA, DEFAULT_BOOTSTRAP_TRIALS, DEFAULT_NUM_STRATA,
    DEFAULT_STAGE1_FRACTION,
};
use crate::stratify::{stratify_by_quantile, Stratification};

const OPTIMIZER_STREAM: u64 = 0x4f50_544d;
const SINGLE_KEY_ORACLE: &str = "group_key";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    #[default]
    Single,
    Multiple,
}

impl std::str::FromStr for OracleMode {
    type Err = AbaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(OracleMode::Single),
            "multiple" => Ok(OracleMode::Multiple),
            _ => Err(AbaeError::config(format!("unknown oracle mode `{s}`"))),
        }
    }
}

/// A group: the label column marking membership and the proxy scoring it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKey {
    pub key: String,
    pub proxy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub groups: Vec<GroupKey>,
    #[serde(default)]
    pub oracle_mode: OracleMode,
}

impl GroupSpec {
    pub fn new(groups: Vec<GroupKey>, oracle_mode: OracleMode) -> Self {
        GroupSpec {
            groups,
            oracle_mode,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.groups.len() < 2 {
            return Err(AbaeError::config("group-by needs at least two groups"));
        }
        let mut seen = HashSet::new();
        for g in &self.groups {
            if !seen.insert(&g.key) {
                return Err(AbaeError::config(format!("duplicate group `{}`", g.key)));
            }
            dataset.label_index(&g.key)?;
            dataset.proxy(&g.proxy)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupByConfig {
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

impl GroupByConfig {
    pub fn new(budget: usize) -> Self {
        GroupByConfig {
            budget,
            stage1_fraction: DEFAULT_STAGE1_FRACTION,
            num_strata: DEFAULT_NUM_STRATA,
            alpha: DEFAULT_ALPHA,
            bootstrap_trials: DEFAULT_BOOTSTRAP_TRIALS,
            seed: 0,
        }
    }

    fn stage1_calls(&self) -> usize {
        ((self.stage1_fraction * self.budget as f64).round() as usize).min(self.budget)
    }

    fn validate(&self, groups: usize, mode: OracleMode) -> Result<()> {
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction < 1.0) {
            return Err(AbaeError::config(format!(
                "stage-1 fraction must lie in (0, 1), got {}",
                self.stage1_fraction
            )));
        }
        if self.num_strata == 0 {
            return Err(AbaeError::config("number of strata must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || self.bootstrap_trials == 0 {
            return Err(AbaeError::config(
                "alpha must lie in (0, 1) and bootstrap trials be positive",
            ));
        }
        let per_record = if mode == OracleMode::Multiple {
            groups
        } else {
            1
        };
        if self.stage1_calls() < per_record * self.num_strata {
            return Err(AbaeError::config(format!(
                "stage-1 budget {} is too small for {groups} groups and {} strata",
                self.stage1_calls(),
                self.num_strata
            )));
        }
        Ok(())
    }
}

/// Allocation weights across group stratifications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexPoint {
    pub lambda: Vec<f64>,
}

impl SimplexPoint {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        let total: f64 = lambda.iter().sum();
        if lambda.is_empty()
            || lambda.iter().any(|l| !(0.0..=1.0).contains(l))
            || (total - 1.0).abs() > 1e-9
        {
            return Err(AbaeError::config(format!(
                "{lambda:?} is not a point of the simplex"
            )));
        }
        Ok(SimplexPoint { lambda })
    }

    pub fn uniform(g: usize) -> Self {
        SimplexPoint {
            lambda: vec![1.0 / g as f64; g],
        }
    }
}

/// Error coefficients `E[l][g]`: the predicted squared error of group `g`'s
/// estimate from stratification `l` is `E[l][g] / (lambda_l * N2)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorMatrix {
    rows: Vec<Vec<f64>>,
    /// Groups entering the maximum.
    active: Vec<bool>,
}

impl ErrorMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let g = rows.len();
        if rows.iter().any(|r| r.len() != g) {
            return Err(AbaeError::config("error matrix must be square"));
        }
        Ok(ErrorMatrix {
            active: vec![true; g],
            rows,
        })
    }

    /// Diagonal matrix with infinite off-diagonal errors.
    pub fn diagonal(errors: &[f64]) -> Self {
        let g = errors.len();
        let rows = (0..g)
            .map(|l| {
                (0..g)
                    .map(|j| if j == l { errors[l] } else { f64::INFINITY })
                    .collect()
            })
            .collect();
        ErrorMatrix {
            rows,
            active: vec![true; g],
        }
    }

    pub fn with_active(mut self, active: Vec<bool>) -> Self {
        self.active = active;
        self
    }

    pub fn num_groups(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, l: usize, g: usize) -> f64 {
        self.rows[l][g]
    }

    /// Predicted squared error of group `g` when estimates from all
    /// stratifications are pooled by inverse-variance weighting.
    pub fn pooled_error(&self, g: usize, lambda: &[f64], n2: f64) -> f64 {
        let precision: f64 = (0..self.rows.len())
            .map(|l| {
                let e = self.rows[l][g];
                if e.is_infinite() || lambda[l] == 0.0 {
                    0.0
                } else if e == 0.0 {
                    f64::INFINITY
                } else {
                    lambda[l] * n2 / e
                }
            })
            .sum();
        1.0 / precision
    }

    /// Predicted squared error of group `g` from its own stratification.
    pub fn own_error(&self, g: usize, lambda: &[f64], n2: f64) -> f64 {
        if lambda[g] == 0.0 {
            f64::INFINITY
        } else {
            self.rows[g][g] / (lambda[g] * n2)
        }
    }

    pub fn objective_single(&self, lambda: &[f64], n2: f64) -> f64 {
        self.max_over_active(|g| self.pooled_error(g, lambda, n2))
    }

    pub fn objective_multiple(&self, lambda: &[f64], n2: f64) -> f64 {
        self.max_over_active(|g| self.own_error(g, lambda, n2))
    }

    pub fn objective(&self, mode: OracleMode, lambda: &[f64], n2: f64) -> f64 {
        match mode {
            OracleMode::Single => self.objective_single(lambda, n2),
            OracleMode::Multiple => self.objective_multiple(lambda, n2),
        }
    }

    fn max_over_active(&self, err: impl Fn(usize) -> f64) -> f64 {
        (0..self.rows.len())
            .filter(|&g| self.active[g])
            .map(err)
            .fold(0.0, f64::max)
    }
}

/// Stage-1 plug-in estimates for every (stratification, group) cell.
#[derive(Debug, Clone, Serialize)]
pub struct GroupStageOneEstimates {
    pub mode: OracleMode,
    /// `cells[l][g]`: per-stratum estimates of group `g` under stratification
    /// `l`. Only the diagonal is observed with one oracle per group.
    pub cells: Vec<Vec<Option<Vec<StratumStats>>>>,
    /// Stage-2 allocation within each stratification, targeted at its group.
    pub allocations: Vec<AllocationPlan>,
    /// Groups with at least one Stage-1 positive.
    pub estimable: Vec<bool>,
}

impl GroupStageOneEstimates {
    pub fn num_groups(&self) -> usize {
        self.cells.len()
    }

    /// `sum_k w_k^2 sigma_k^2 / (p_k T_lk)` with `w_k = p_k / sum p`.
    pub fn error_coefficient(&self, l: usize, g: usize) -> f64 {
        let Some(cell) = &self.cells[l][g] else {
            return f64::INFINITY;
        };
        let p_sum: f64 = cell.iter().map(|s| s.p_hat).sum();
        if p_sum == 0.0 {
            return f64::INFINITY;
        }
        cell.iter()
            .zip(&self.allocations[l].weights)
            .map(|(s, &t)| {
                let num = s.p_hat * s.sigma_hat * s.sigma_hat / (p_sum * p_sum);
                if num == 0.0 {
                    0.0
                } else if t == 0.0 {
                    f64::INFINITY
                } else {
                    num / t
                }
            })
            .sum()
    }

    pub fn error_matrix(&self) -> ErrorMatrix {
        let g = self.num_groups();
        let rows = (0..g)
            .map(|l| (0..g).map(|j| self.error_coefficient(l, j)).collect())
            .collect();
        ErrorMatrix {
            rows,
            active: self.estimable.clone(),
        }
    }
}

/// Worst-group predicted error when every stratification shares its samples
/// with every group.
pub fn minimax_objective_single(
    est: &GroupStageOneEstimates,
    lambda: &SimplexPoint,
    n2: usize,
) -> f64 {
    est.error_matrix()
        .objective_single(&lambda.lambda, n2 as f64)
}

/// Worst-group predicted error when each group is estimated from its own
/// stratification only.
pub fn minimax_objective_multiple(
    est: &GroupStageOneEstimates,
    lambda: &SimplexPoint,
    n2: usize,
) -> f64 {
    est.error_matrix()
        .objective_multiple(&lambda.lambda, n2 as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexSolution {
    pub point: SimplexPoint,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `objective` over the probability simplex of dimension `g` with
/// Nelder-Mead on `g - 1` softmax logits, starting from the uniform point.
pub fn nelder_mead_simplex<F>(
    objective: F,
    g: usize,
    tolerance: f64,
    max_iters: usize,
    seed: u64,
) -> SimplexSolution
where
    F: Fn(&SimplexPoint) -> f64,
{
    let cfg = NelderMeadConfig {
        f_tolerance: tolerance,
        max_iters,
        seed,
        ..NelderMeadConfig::new(g)
    };
    let scale = objective(&SimplexPoint::uniform(g));
    let scale = if scale.is_finite() && scale > 0.0 {
        scale
    } else {
        1.0
    };
    let res = nelder_mead(
        |y| {
            objective(&SimplexPoint {
                lambda: softmax_point(y),
            }) / scale
        },
        &vec![0.0; g.saturating_sub(1)],
        &cfg,
    );
    SimplexSolution {
        point: SimplexPoint {
            lambda: softmax_point(&res.point),
        },
        value: res.value * scale,
        iterations: res.iterations,
        converged: res.converged,
    }
}

/// Chooses `lambda` for `errors`. Groups that are not active are held at the
/// floor `1 / (10 G)`; the rest share the remaining mass as optimised.
pub fn solve_allocation(
    errors: &ErrorMatrix,
    mode: OracleMode,
    n2: f64,
    seed: u64,
) -> SimplexSolution {
    let g = errors.num_groups();
    let free: Vec<usize> = (0..g).filter(|&i| errors.active[i]).collect();
    let floor = 1.0 / (10.0 * g as f64);
    if free.is_empty() {
        let point = SimplexPoint::uniform(g);
        let value = errors.objective(mode, &point.lambda, n2);
        return SimplexSolution {
            point,
            value,
            iterations: 0,
            converged: true,
        };
    }
    let mass = 1.0 - floor * (g - free.len()) as f64;
    let embed = |sub: &[f64]| -> Vec<f64> {
        let mut lambda = vec![floor; g];
        for (&i, &x) in free.iter().zip(sub) {
            lambda[i] = mass * x;
        }
        lambda
    };
    let sol = nelder_mead_simplex(
        |p| errors.objective(mode, &embed(&p.lambda), n2),
        free.len(),
        1e-8,
        2000 * g,
        seed,
    );
    SimplexSolution {
        point: SimplexPoint {
            lambda: embed(&sol.point.lambda),
        },
        ..sol
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupEstimate {
    pub key: String,
    /// `None` when no positive of the group was drawn.
    pub estimate: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub lambda: f64,
    pub estimable: bool,
    pub stage1_positives: usize,
    pub positives: usize,
    pub predicted_rmse: Option<f64>,
    /// Final estimates under the group's own stratification.
    pub per_stratum: Vec<StratumStats>,
    pub allocation_used: AllocationPlan,
    /// Pooling weight of each stratification's estimate.
    pub stratification_weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupByReport {
    pub method: &'static str,
    pub oracle_mode: OracleMode,
    pub groups: Vec<GroupEstimate>,
    pub lambda: Vec<f64>,
    pub optimizer_converged: bool,
    pub optimizer_iterations: usize,
    pub max_predicted_rmse: Option<f64>,
    pub oracle_calls: usize,
    pub oracle_budget: usize,
    pub stage1_calls: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl GroupByReport {
    pub fn estimates(&self) -> Vec<Option<f64>> {
        self.groups.iter().map(|g| g.estimate).collect()
    }
}

/// Samples of one stratification, per stratum, as record ids.
type StratumIds = Vec<Vec<usize>>;

/// Group-by query with its stratifications built, ready to run repeatedly.
#[derive(Debug, Clone)]
pub struct PreparedGroupBy<'a> {
    dataset: &'a Dataset,
    spec: GroupSpec,
    config: GroupByConfig,
    columns: Vec<usize>,
    stratifications: Vec<Stratification>,
    membership: Vec<Vec<usize>>,
}

impl<'a> PreparedGroupBy<'a> {
    pub fn new(dataset: &'a Dataset, spec: GroupSpec, config: GroupByConfig) -> Result<Self> {
        spec.validate(dataset)?;
        config.validate(spec.len(), spec.oracle_mode)?;
        let columns = spec
            .groups
            .iter()
            .map(|g| dataset.label_index(&g.key))
            .collect::<Result<_>>()?;
        let stratifications: Vec<Stratification> = spec
            .groups
            .iter()
            .map(|g| stratify_by_quantile(dataset.proxy(&g.proxy)?, config.num_strata, &g.proxy))
            .collect::<Result<_>>()?;
        let membership = stratifications
            .iter()
            .map(Stratification::membership)
            .collect();
        Ok(PreparedGroupBy {
            dataset,
            spec,
            config,
            columns,
            stratifications,
            membership,
        })
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn config(&self) -> &GroupByConfig {
        &self.config
    }

    fn g(&self) -> usize {
        self.spec.len()
    }

    fn mode(&self) -> OracleMode {
        self.spec.oracle_mode
    }

    /// Charges the oracle needed to learn group `g` of `id`. Returns whether a
    /// call was made.
    fn reveal(&self, ledger: &mut OracleLedger, id: usize, g: usize) -> Result<bool> {
        let before = ledger.calls_made();
        match self.mode() {
            OracleMode::Single => {
                ledger.evaluate_key(self.dataset, id, &self.columns, SINGLE_KEY_ORACLE)?
            }
            OracleMode::Multiple => {
                ledger.evaluate_column(self.dataset, id, self.columns[g])?;
            }
        }
        Ok(ledger.calls_made() > before)
    }

    fn is_revealed(&self, ledger: &OracleLedger, id: usize, g: usize) -> bool {
        ledger.revealed(id, self.columns[g]).is_some()
    }

    fn samples(&self, ledger: &OracleLedger, ids: &[usize], g: usize) -> Vec<(f64, bool)> {
        ids.iter()
            .map(|&id| {
                let m = ledger
                    .revealed(id, self.columns[g])
                    .expect("sampled record was revealed");
                (if m { self.dataset.statistic(id) } else { 0.0 }, m)
            })
            .collect()
    }

    fn cell_stats(
        &self,
        ledger: &OracleLedger,
        strata: &StratumIds,
        g: usize,
    ) -> Vec<StratumStats> {
        strata
            .iter()
            .map(|ids| {
                let s = self.samples(ledger, ids, g);
                let positives = s.iter().filter(|x| x.1).map(|x| x.0).collect();
                StratumStats::from_positives(s.len(), positives)
            })
            .collect()
    }

    fn split_by_stratum(&self, l: usize, ids: &[usize]) -> StratumIds {
        let mut out = vec![Vec::new(); self.config.num_strata];
        for &id in ids {
            out[self.membership[l][id]].push(id);
        }
        out
    }

    /// Two-stage group-by sampling. With `with_ci`, per-group bootstrap
    /// intervals are attached.
    pub fn run(&self, seed: u64, with_ci: bool) -> Result<GroupByReport> {
        let g = self.g();
        let k = self.config.num_strata;
        let mode = self.mode();
        let mut rng = stream(derive_seed(seed, SAMPLING_STREAM));
        let mut ledger = OracleLedger::new(self.config.budget);
        let n1 = self.config.stage1_calls();

        // Stage 1: uniform over the whole table.
        let stage1_records = match mode {
            OracleMode::Single => n1,
            OracleMode::Multiple => n1 / g,
        };
        let stage1 = PartialShuffle::new(self.dataset.len()).draw(&mut rng, stage1_records);
        for &id in &stage1 {
            for j in 0..g {
                self.reveal(&mut ledger, id, j)?;
            }
        }
        let stage1_calls = ledger.calls_made();
        let pilot: Vec<StratumIds> = (0..g).map(|l| self.split_by_stratum(l, &stage1)).collect();
        let cells: Vec<Vec<Option<Vec<StratumStats>>>> = (0..g)
            .map(|l| {
                (0..g)
                    .map(|j| {
                        (mode == OracleMode::Single || j == l)
                            .then(|| self.cell_stats(&ledger, &pilot[l], j))
                    })
                    .collect()
            })
            .collect();
        let allocations: Vec<AllocationPlan> = (0..g)
            .map(|l| {
                let own = cells[l][l].as_ref().expect("diagonal cell");
                let p: Vec<f64> = own.iter().map(|s| s.p_hat).collect();
                let sigma: Vec<f64> = own.iter().map(|s| s.sigma_hat).collect();
                optimal_allocation(&p, &sigma)
            })
            .collect::<Result<_>>()?;
        let stage1_positives: Vec<usize> = (0..g)
            .map(|j| {
                self.samples(&ledger, &stage1, j)
                    .iter()
                    .filter(|x| x.1)
                    .count()
            })
            .collect();
        let estimates = GroupStageOneEstimates {
            mode,
            cells,
            allocations,
            estimable: stage1_positives.iter().map(|&c| c > 0).collect(),
        };

        // Allocation across stratifications.
        let n2 = self.config.budget - stage1_calls;
        let errors = estimates.error_matrix();
        let solution = solve_allocation(
            &errors,
            mode,
            n2 as f64,
            derive_seed(seed, OPTIMIZER_STREAM),
        );
        let lambda = solution.point.lambda.clone();
        let per_stratification = allocate_draws(n2, &lambda, &vec![usize::MAX; g]);

        // Stage 2: each stratification draws fresh records for its group.
        // Records another stratification already paid for are kept for free.
        let mut final_ids: Vec<StratumIds> = pilot.clone();
        for l in 0..g {
            let sizes = self.stratifications[l].sizes();
            let available: Vec<usize> = (0..k)
                .map(|s| {
                    self.stratifications[l]
                        .stratum(s)
                        .iter()
                        .filter(|&&id| !self.is_revealed(&ledger, id, l))
                        .count()
                })
                .collect();
            let counts = allocate_draws(
                per_stratification[l],
                &estimates.allocations[l].weights,
                &available,
            );
            for s in 0..k {
                let stratum = self.stratifications[l].stratum(s);
                let mut seen: HashSet<usize> = final_ids[l][s].iter().copied().collect();
                let mut shuffle = PartialShuffle::new(sizes[s]);
                let mut bought = 0;
                while bought < counts[s] {
                    let Some(pos) = shuffle.draw(&mut rng, 1).pop() else {
                        break;
                    };
                    let id = stratum[pos];
                    if !seen.insert(id) {
                        continue;
                    }
                    if self.reveal(&mut ledger, id, l)? {
                        bought += 1;
                    }
                    final_ids[l][s].push(id);
                }
            }
        }

        self.finish(FinishInput {
            method: "abae",
            seed,
            ledger,
            stage1_calls,
            final_ids,
            lambda,
            errors: Some((errors, n2 as f64)),
            solution: Some(solution),
            allocations: estimates.allocations,
            stage1_positives,
            with_ci,
        })
    }

    /// Uniform sampling at the same budget: every group is estimated from one
    /// uniform sample of the table.
    pub fn run_uniform(&self, seed: u64, with_ci: bool) -> Result<GroupByReport> {
        let g = self.g();
        let mut rng = stream(derive_seed(seed, SAMPLING_STREAM));
        let mut ledger = OracleLedger::new(self.config.budget);
        let records = match self.mode() {
            OracleMode::Single => self.config.budget,
            OracleMode::Multiple => self.config.budget / g,
        };
        let ids = PartialShuffle::new(self.dataset.len()).draw(&mut rng, records);
        for &id in &ids {
            for j in 0..g {
                self.reveal(&mut ledger, id, j)?;
            }
        }
        let stage1_positives = (0..g)
            .map(|j| {
                self.samples(&ledger, &ids, j)
                    .iter()
                    .filter(|x| x.1)
                    .count()
            })
            .collect();
        let final_ids = (0..g).map(|_| vec![ids.clone()]).collect();
        self.finish(FinishInput {
            method: "uniform",
            seed,
            stage1_calls: ledger.calls_made(),
            ledger,
            final_ids,
            lambda: vec![1.0 / g as f64; g],
            errors: None,
            solution: None,
            allocations: vec![AllocationPlan::uniform(1); g],
            stage1_positives,
            with_ci,
        })
    }

    fn finish(&self, input: FinishInput) -> Result<GroupByReport> {
        let g = self.g();
        let FinishInput {
            method,
            seed,
            ledger,
            stage1_calls,
            final_ids,
            lambda,
            errors,
            solution,
            allocations,
            stage1_positives,
            with_ci,
        } = input;
        let uniform = solution.is_none();
        let mut warnings = Vec::new();
        let mut groups = Vec::with_capacity(g);
        let bootstrap_seed = derive_seed(seed, BOOTSTRAP_STREAM);
        for j in 0..g {
            // Stratifications whose samples inform group j.
            let sources: Vec<usize> = if uniform || self.mode() == OracleMode::Multiple {
                vec![j]
            } else {
                (0..g).collect()
            };
            let samples: Vec<Vec<Vec<(f64, bool)>>> = sources
                .iter()
                .map(|&l| {
                    final_ids[l]
                        .iter()
                        .map(|ids| self.samples(&ledger, ids, j))
                        .collect()
                })
                .collect();
            let pooled = pool_estimates(&samples);
            let mut weights = vec![0.0; g];
            for (&l, &w) in sources.iter().zip(&pooled.weights) {
                weights[l] = w;
            }
            let own = sources
                .iter()
                .position(|&l| l == j)
                .expect("own stratification");
            let per_stratum: Vec<StratumStats> = samples[own]
                .iter()
                .map(|s| {
                    StratumStats::from_positives(
                        s.len(),
                        s.iter().filter(|x| x.1).map(|x| x.0).collect(),
                    )
                })
                .collect();
            let positives = if uniform || self.mode() == OracleMode::Multiple {
                per_stratum.iter().map(|s| s.n_positive).sum()
            } else {
                let mut ids: HashSet<usize> = HashSet::new();
                for stratification in &final_ids[..g] {
                    for s in stratification {
                        ids.extend(
                            s.iter()
                                .copied()
                                .filter(|&id| ledger.revealed(id, self.columns[j]) == Some(true)),
                        );
                    }
                }
                ids.len()
            };
            let (ci_low, ci_high) = match (with_ci, pooled.estimate) {
                (true, Some(_)) => {
                    let ci = pooled_ci(
                        &samples,
                        &pooled.weights,
                        &self.config,
                        derive_seed(bootstrap_seed, j as u64),
                    );
                    if ci.is_none() {
                        warnings.push(format!(
                            "group `{}`: no bootstrap replicate had positives",
                            self.spec.groups[j].key
                        ));
                    }
                    ci.map_or((None, None), |(lo, hi)| (Some(lo), Some(hi)))
                }
                _ => (None, None),
            };
            let predicted_rmse = errors.as_ref().map(|(e, n2)| {
                let mse = match self.mode() {
                    OracleMode::Single => e.pooled_error(j, &lambda, *n2),
                    OracleMode::Multiple => e.own_error(j, &lambda, *n2),
                };
                mse.sqrt()
            });
            if stage1_positives[j] == 0 && !uniform {
                warnings.push(format!(
                    "group `{}` had no stage-1 positives; its allocation was floored",
                    self.spec.groups[j].key
                ));
            }
            if pooled.estimate.is_none() {
                warnings.push(format!(
                    "group `{}`: no positive samples were drawn",
                    self.spec.groups[j].key
                ));
            }
            groups.push(GroupEstimate {
                key: self.spec.groups[j].key.clone(),
                estimate: pooled.estimate,
                ci_low,
                ci_high,
                lambda: lambda[j],
                estimable: stage1_positives[j] > 0,
                stage1_positives: stage1_positives[j],
                positives,
                predicted_rmse: predicted_rmse.filter(|r| r.is_finite()),
                per_stratum,
                allocation_used: allocations[j].clone(),
                stratification_weights: weights,
            });
        }
        let max_predicted_rmse = errors
            .as_ref()
            .map(|(e, n2)| e.objective(self.mode(), &lambda, *n2).sqrt())
            .filter(|r| r.is_finite());
        if let Some(sol) = &solution {
            if !sol.converged {
                warnings.push("allocation optimiser stopped at its iteration cap".to_owned());
            }
        }
        Ok(GroupByReport {
            method,
            oracle_mode: self.mode(),
            groups,
            lambda,
            optimizer_converged: solution.as_ref().is_none_or(|s| s.converged),
            optimizer_iterations: solution.as_ref().map_or(0, |s| s.iterations),
            max_predicted_rmse,
            oracle_calls: ledger.calls_made(),
            oracle_budget: self.config.budget,
            stage1_calls,
            seed,
            warnings,
        })
    }
}

struct FinishInput {
    method: &'static str,
    seed: u64,
    ledger: OracleLedger,
    stage1_calls: usize,
    final_ids: Vec<StratumIds>,
    lambda: Vec<f64>,
    errors: Option<(ErrorMatrix, f64)>,
    solution: Option<SimplexSolution>,
    allocations: Vec<AllocationPlan>,
    stage1_positives: Vec<usize>,
    with_ci: bool,
}

struct Pooled {
    estimate: Option<f64>,
    weights: Vec<f64>,
}

/// Plug-in variance `sum_k p_k sigma_k^2 / (n_k (sum p)^2)` of a stratified
/// mean. Strata with fewer than two positives borrow the pooled variance of
/// all positives.
fn plug_in_variance(strata: &[Vec<(f64, bool)>]) -> f64 {
    let stats: Vec<StratumStats> = strata
        .iter()
        .map(|s| {
            StratumStats::from_positives(s.len(), s.iter().filter(|x| x.1).map(|x| x.0).collect())
        })
        .collect();
    let all: Vec<f64> = stats
        .iter()
        .flat_map(|s| s.positives.iter().copied())
        .collect();
    let pooled = StratumStats::from_positives(all.len(), all);
    if pooled.n_positive < 2 {
        return f64::INFINITY;
    }
    let p_sum: f64 = stats.iter().map(|s| s.p_hat).sum();
    stats
        .iter()
        .filter(|s| s.n_positive > 0)
        .map(|s| {
            let var = if s.n_positive > 1 {
                s.sigma_hat.powi(2)
            } else {
                pooled.sigma_hat.powi(2)
            };
            s.p_hat * var / (s.n_drawn as f64 * p_sum * p_sum)
        })
        .sum()
}

/// Inverse-variance pooling of stratified means from several sources.
fn pool_estimates(sources: &[Vec<Vec<(f64, bool)>>]) -> Pooled {
    let means: Vec<Option<f64>> = sources
        .iter()
        .map(|s| combined_mean(&summaries(s)))
        .collect();
    let weights = inverse_variance_weights(
        &means,
        &sources
            .iter()
            .map(|s| plug_in_variance(s))
            .collect::<Vec<_>>(),
    );
    let estimate = means.iter().any(Option::is_some).then(|| {
        means
            .iter()
            .zip(&weights)
            .filter_map(|(m, w)| m.map(|m| m * w))
            .sum()
    });
    Pooled { estimate, weights }
}

fn inverse_variance_weights(means: &[Option<f64>], variances: &[f64]) -> Vec<f64> {
    let defined: Vec<usize> = (0..means.len()).filter(|&i| means[i].is_some()).collect();
    let mut w = vec![0.0; means.len()];
    if defined.is_empty() {
        return w;
    }
    let exact: Vec<usize> = defined
        .iter()
        .copied()
        .filter(|&i| variances[i] == 0.0)
        .collect();
    let finite: Vec<usize> = defined
        .iter()
        .copied()
        .filter(|&i| variances[i].is_finite())
        .collect();
    if !exact.is_empty() {
        exact.iter().for_each(|&i| w[i] = 1.0 / exact.len() as f64);
    } else if !finite.is_empty() {
        let total: f64 = finite.iter().map(|&i| 1.0 / variances[i]).sum();
        finite
            .iter()
            .for_each(|&i| w[i] = 1.0 / variances[i] / total);
    } else {
        defined
            .iter()
            .for_each(|&i| w[i] = 1.0 / defined.len() as f64);
    }
    w
}

fn summaries(strata: &[Vec<(f64, bool)>]) -> Vec<StratumResample> {
    strata
        .iter()
        .map(|s| StratumResample {
            drawn: s.len(),
            positives: s.iter().filter(|x| x.1).count(),
            positive_sum: s.iter().filter(|x| x.1).map(|x| x.0).sum(),
        })
        .collect()
}

/// Percentile interval of the pooled estimate, resampling each source's
/// strata independently and pooling with fixed weights.
fn pooled_ci(
    sources: &[Vec<Vec<(f64, bool)>>],
    weights: &[f64],
    config: &GroupByConfig,
    seed: u64,
) -> Option<(f64, f64)> {
    let trials = config.bootstrap_trials;
    let reps: Vec<Vec<Option<f64>>> = sources
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (s, &w))| {
            if w > 0.0 {
                bootstrap_replicates(s, trials, derive_seed(seed, i as u64), combined_mean).0
            } else {
                vec![None; trials]
            }
        })
        .collect();
    let mut values: Vec<f64> = (0..trials)
        .filter_map(|b| {
            let (num, den) = reps
                .iter()
                .zip(weights)
                .fold((0.0, 0.0), |(n, d), (r, &w)| match r[b] {
                    Some(m) if w > 0.0 => (n + w * m, d + w),
                    _ => (n, d),
                });
            (den > 0.0).then(|| num / den)
        })
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some((
        percentile(&values, config.alpha / 2.0),
        percentile(&values, 1.0 - config.alpha / 2.0),
    ))
}

pub fn abae_groupby(
    dataset: &Dataset,
    spec: &GroupSpec,
    config: &GroupByConfig,
) -> Result<GroupByReport> {
    PreparedGroupBy::new(dataset, spec.clone(), config.clone())?.run(config.seed, true)
}

pub fn uniform_groupby(
    dataset: &Dataset,
    spec: &GroupSpec,
    config: &GroupByConfig,
) -> Result<GroupByReport> {
    PreparedGroupBy::new(dataset, spec.clone(), config.clone())?.run_uniform(config.seed, true)
}
