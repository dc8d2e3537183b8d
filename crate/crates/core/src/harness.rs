//! Repeated-trial experiments: accuracy tables per method and budget,
//! parameter sweeps, and pass/fail checks over the resulting tables.

use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, parse_mapping, Dataset, Schema};
use crate::error::{AbaeError, Result};
use crate::groupby::{GroupByConfig, GroupSpec, PreparedGroupBy};
use crate::predicate::{parse_predicate, PredicateExpr};
use crate::rng::derive_seed;
use crate::sampler::{
    Aggregate, Method, PreparedQuery, ProxySource, QueryConfig, Stage2Mode, DEFAULT_ALPHA,
    DEFAULT_BOOTSTRAP_TRIALS, DEFAULT_NUM_STRATA, DEFAULT_STAGE1_FRACTION,
};
use crate::stratify::Stratification;
use crate::synth::{
    generate, generate_multi, ground_truth, GroundTruth, MultiPredSynthSpec, SynthSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synth(SynthSpec),
    MultiPred(MultiPredSynthSpec),
    Csv {
        path: PathBuf,
        statistic_col: String,
        /// `name=column` mappings.
        label_cols: Vec<String>,
        proxy_cols: Vec<String>,
        #[serde(default)]
        tab_separated: bool,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synth(s) => Ok(generate(s)?.0),
            DatasetSource::MultiPred(s) => Ok(generate_multi(s)?.0),
            DatasetSource::Csv {
                path,
                statistic_col,
                label_cols,
                proxy_cols,
                tab_separated,
            } => {
                let mut schema = Schema::new(statistic_col.clone());
                for m in label_cols {
                    let (name, col) = parse_mapping(m)?;
                    schema = schema.label(name, col);
                }
                for m in proxy_cols {
                    let (name, col) = parse_mapping(m)?;
                    schema = schema.proxy(name, col);
                }
                if *tab_separated {
                    schema = schema.tab_separated();
                }
                load_dataset(path, &schema)
            }
        }
    }

    /// Query predicate implied by the source, if any.
    pub fn default_predicate(&self) -> Option<String> {
        match self {
            DatasetSource::Synth(s) => Some(s.predicate.clone()),
            DatasetSource::MultiPred(s) => Some(s.query.clone()),
            DatasetSource::Csv { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    /// Number of strata.
    K,
    /// Stage-1 fraction.
    C,
}

impl SweepParameter {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParameter::K => "K",
            SweepParameter::C => "C",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// A property of the metrics table checked by `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Check {
    /// `rmse(numerator) / rmse(denominator)` lies in `[min, max]` for every
    /// budget (and sweep value) where the denominator was run.
    RmseRatio {
        numerator: Method,
        denominator: Method,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    /// Coverage of `method` lies in `[min, max]` on every row.
    Coverage { method: Method, min: f64, max: f64 },
    /// Least-squares slope of log RMSE against log budget lies in `[min, max]`.
    RmseSlope { method: Method, min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSource,
    /// Defaults to the synthetic source's predicate.
    #[serde(default)]
    pub predicate: Option<String>,
    #[serde(default)]
    pub proxy: Option<ProxySource>,
    #[serde(default)]
    pub aggregate: Aggregate,
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub trials: usize,
    #[serde(default = "default_num_strata")]
    pub num_strata: usize,
    #[serde(default = "default_stage1_fraction")]
    pub stage1_fraction: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_bootstrap_trials")]
    pub bootstrap_trials: usize,
    #[serde(default)]
    pub stage2_mode: Stage2Mode,
    #[serde(default = "default_true")]
    pub compute_ci: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub checks: Vec<Check>,
}

fn default_num_strata() -> usize {
    DEFAULT_NUM_STRATA
}
fn default_stage1_fraction() -> f64 {
    DEFAULT_STAGE1_FRACTION
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_bootstrap_trials() -> usize {
    DEFAULT_BOOTSTRAP_TRIALS
}
fn default_true() -> bool {
    true
}

impl ExperimentSpec {
    pub fn new(
        dataset: DatasetSource,
        methods: Vec<Method>,
        budgets: Vec<usize>,
        trials: usize,
    ) -> Self {
        ExperimentSpec {
            name: String::new(),
            dataset,
            predicate: None,
            proxy: None,
            aggregate: Aggregate::Avg,
            methods,
            budgets,
            trials,
            num_strata: DEFAULT_NUM_STRATA,
            stage1_fraction: DEFAULT_STAGE1_FRACTION,
            alpha: DEFAULT_ALPHA,
            bootstrap_trials: DEFAULT_BOOTSTRAP_TRIALS,
            stage2_mode: Stage2Mode::Exclude,
            compute_ci: true,
            seed: 0,
            sweep: None,
            checks: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(AbaeError::config("trials must be at least 1"));
        }
        if self.budgets.is_empty() || self.methods.is_empty() {
            return Err(AbaeError::config("budgets and methods must be non-empty"));
        }
        Ok(())
    }

    pub fn predicate_expr(&self) -> Result<PredicateExpr> {
        let text = self
            .predicate
            .clone()
            .or_else(|| self.dataset.default_predicate())
            .ok_or_else(|| AbaeError::config("experiment needs a predicate"))?;
        parse_predicate(&text)
    }

    fn query_config(&self, predicate: &PredicateExpr, budget: usize) -> QueryConfig {
        QueryConfig {
            aggregate: self.aggregate,
            proxy: self.proxy.clone(),
            stage1_fraction: self.stage1_fraction,
            num_strata: self.num_strata,
            alpha: self.alpha,
            bootstrap_trials: self.bootstrap_trials,
            seed: self.seed,
            stage2_mode: self.stage2_mode,
            ..QueryConfig::new(predicate.clone(), budget)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub parameter: Option<String>,
    pub value: Option<f64>,
    pub budget: usize,
    pub rmse: f64,
    pub normalized_q_error_mean: f64,
    pub ci_width_mean: f64,
    pub coverage: f64,
    pub trials: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub estimate: f64,
    pub ci: Option<(f64, f64)>,
}

/// `100 * (q - 1)` with `q = max(estimate / truth, truth / estimate)`;
/// `None` unless both are positive.
pub fn normalized_q_error(estimate: f64, truth: f64) -> Option<f64> {
    (estimate > 0.0 && truth > 0.0)
        .then(|| 100.0 * ((estimate / truth).max(truth / estimate) - 1.0))
}

/// Summarises trial outcomes (`None` marks a trial without positive samples).
pub fn summarize(
    method: &str,
    budget: usize,
    truth: f64,
    outcomes: &[Option<TrialOutcome>],
) -> MetricsRow {
    let ok: Vec<&TrialOutcome> = outcomes.iter().flatten().collect();
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let sq: Vec<f64> = ok.iter().map(|o| (o.estimate - truth).powi(2)).collect();
    let q: Vec<f64> = ok
        .iter()
        .filter_map(|o| normalized_q_error(o.estimate, truth))
        .collect();
    let cis: Vec<(f64, f64)> = ok.iter().filter_map(|o| o.ci).collect();
    let widths: Vec<f64> = cis.iter().map(|(lo, hi)| hi - lo).collect();
    let covered: Vec<f64> = cis
        .iter()
        .map(|&(lo, hi)| f64::from(u8::from(lo <= truth && truth <= hi)))
        .collect();
    MetricsRow {
        method: method.to_owned(),
        parameter: None,
        value: None,
        budget,
        rmse: mean(&sq).sqrt(),
        normalized_q_error_mean: mean(&q),
        ci_width_mean: mean(&widths),
        coverage: mean(&covered),
        trials: outcomes.len(),
        failed: outcomes.len() - ok.len(),
    }
}

fn method_tag(method: Method) -> u64 {
    match method {
        Method::Abae => 1,
        Method::Uniform => 2,
        Method::AbaeNoReuse => 3,
    }
}

/// Seed of trial `trial` for `method`: every method sees the same dataset
/// but its own sampling randomness.
pub fn trial_seed(seed: u64, trial: usize, method: Method) -> u64 {
    derive_seed(derive_seed(seed, trial as u64), method_tag(method))
}

/// Runs `trials` executions of a prepared query. Trials run in parallel and
/// are returned in trial order.
pub fn run_trials(
    query: &PreparedQuery<'_>,
    method: Method,
    trials: usize,
    seed: u64,
    compute_ci: bool,
) -> Result<Vec<Option<TrialOutcome>>> {
    let aggregate = query.config().aggregate;
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let s = trial_seed(seed, t, method);
            let outcome = if compute_ci {
                query.report(method, s).map(|r| TrialOutcome {
                    estimate: r.estimate,
                    ci: Some((r.ci_low, r.ci_high)),
                })
            } else {
                query
                    .sample(method, s)
                    .and_then(|st| st.estimate(aggregate))
                    .map(|estimate| TrialOutcome { estimate, ci: None })
            };
            match outcome {
                Ok(o) => Ok(Some(o)),
                Err(AbaeError::NoPositiveSamples) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub name: String,
    pub truth: f64,
    pub rows: Vec<MetricsRow>,
    pub warnings: Vec<String>,
}

/// Loaded dataset plus everything the trials share.
pub struct ExperimentContext {
    pub dataset: Dataset,
    pub predicate: PredicateExpr,
    pub truth: GroundTruth,
}

impl ExperimentContext {
    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let dataset = spec.dataset.load()?;
        let predicate = spec.predicate_expr()?;
        let truth = ground_truth(&dataset, &predicate)?;
        Ok(ExperimentContext {
            dataset,
            predicate,
            truth,
        })
    }
}

fn failure_warning(row: &MetricsRow) -> Option<String> {
    (row.failed * 100 > row.trials).then(|| {
        format!(
            "{} at budget {}: {} of {} trials drew no positives and were excluded",
            row.method, row.budget, row.failed, row.trials
        )
    })
}

fn measure(
    ctx: &ExperimentContext,
    spec: &ExperimentSpec,
    base: &QueryConfig,
    stratification: &Stratification,
    method: Method,
    budget: usize,
) -> Result<MetricsRow> {
    let config = QueryConfig {
        budget,
        ..base.clone()
    };
    let (config, strat) = match method {
        Method::Uniform => (
            QueryConfig {
                num_strata: 1,
                ..config
            },
            Stratification::whole(ctx.dataset.len()),
        ),
        _ => (config, stratification.clone()),
    };
    let query = PreparedQuery::with_stratification(&ctx.dataset, config, strat)?;
    let outcomes = run_trials(&query, method, spec.trials, spec.seed, spec.compute_ci)?;
    Ok(summarize(
        method.as_str(),
        budget,
        ctx.truth.value(spec.aggregate),
        &outcomes,
    ))
}

fn stratify_for(ctx: &ExperimentContext, config: &QueryConfig) -> Result<Stratification> {
    Ok(PreparedQuery::new(&ctx.dataset, config.clone())?
        .stratification()
        .clone())
}

/// One row per (method, budget).
pub fn run_experiment_in(
    ctx: &ExperimentContext,
    spec: &ExperimentSpec,
) -> Result<ExperimentResult> {
    let base = spec.query_config(&ctx.predicate, spec.budgets[0]);
    let strat = stratify_for(ctx, &base)?;
    let mut rows = Vec::new();
    for &method in &spec.methods {
        for &budget in &spec.budgets {
            rows.push(measure(ctx, spec, &base, &strat, method, budget)?);
        }
    }
    let warnings = rows.iter().filter_map(failure_warning).collect();
    Ok(ExperimentResult {
        name: spec.name.clone(),
        truth: ctx.truth.value(spec.aggregate),
        rows,
        warnings,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    run_experiment_in(&ExperimentContext::load(spec)?, spec)
}

/// Rows for every stratified method at every value of `parameter`, plus one
/// uniform-sampling reference row per budget.
pub fn sweep_in(
    ctx: &ExperimentContext,
    spec: &ExperimentSpec,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<ExperimentResult> {
    if values.is_empty() {
        return Err(AbaeError::config("sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut base = spec.query_config(&ctx.predicate, spec.budgets[0]);
        match parameter {
            SweepParameter::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(AbaeError::config(format!(
                        "K must be a positive integer, got {value}"
                    )));
                }
                base.num_strata = value as usize;
            }
            SweepParameter::C => {
                if !(value > 0.0 && value < 1.0) {
                    return Err(AbaeError::config(format!(
                        "C must lie in (0, 1), got {value}"
                    )));
                }
                base.stage1_fraction = value;
            }
        }
        let strat = stratify_for(ctx, &base)?;
        for &method in spec.methods.iter().filter(|&&m| m != Method::Uniform) {
            for &budget in &spec.budgets {
                let mut row = measure(ctx, spec, &base, &strat, method, budget)?;
                row.parameter = Some(parameter.as_str().to_owned());
                row.value = Some(value);
                rows.push(row);
            }
        }
    }
    let base = spec.query_config(&ctx.predicate, spec.budgets[0]);
    let whole = Stratification::whole(ctx.dataset.len());
    for &budget in &spec.budgets {
        let mut row = measure(ctx, spec, &base, &whole, Method::Uniform, budget)?;
        row.parameter = Some("reference".to_owned());
        rows.push(row);
    }
    let warnings = rows.iter().filter_map(failure_warning).collect();
    Ok(ExperimentResult {
        name: spec.name.clone(),
        truth: ctx.truth.value(spec.aggregate),
        rows,
        warnings,
    })
}

pub fn sweep(
    spec: &ExperimentSpec,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<ExperimentResult> {
    sweep_in(&ExperimentContext::load(spec)?, spec, parameter, values)
}

/// Runs the sweep if the spec has one, the plain experiment otherwise.
pub fn run_spec(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    match &spec.sweep {
        Some(s) => sweep(spec, s.parameter, &s.values),
        None => run_experiment(spec),
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Gnuplot data: one block per (method, sweep value), blocks separated by two
/// blank lines so `index` selects them.
pub fn write_plot_data(rows: &[MetricsRow], mut writer: impl Write) -> Result<()> {
    let mut keys: Vec<(&str, Option<f64>)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(m, v)| m == r.method && v == r.value) {
            keys.push((&r.method, r.value));
        }
    }
    for (i, (method, value)) in keys.iter().enumerate() {
        if i > 0 {
            writeln!(writer, "\n")?;
        }
        match value {
            Some(v) => writeln!(writer, "# {method} {v}")?,
            None => writeln!(writer, "# {method}")?,
        }
        writeln!(
            writer,
            "# budget rmse normalized_q_error_mean ci_width_mean coverage"
        )?;
        for r in rows
            .iter()
            .filter(|r| r.method == *method && r.value == *value)
        {
            writeln!(
                writer,
                "{} {} {} {} {}",
                r.budget, r.rmse, r.normalized_q_error_mean, r.ci_width_mean, r.coverage
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: Check,
    pub passed: bool,
    pub details: Vec<String>,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn within(x: f64, min: Option<f64>, max: Option<f64>) -> bool {
    x.is_finite() && min.is_none_or(|m| x >= m) && max.is_none_or(|m| x <= m)
}

pub fn evaluate_check(check: &Check, rows: &[MetricsRow]) -> CheckOutcome {
    let mut details = Vec::new();
    let mut passed = true;
    match check {
        Check::RmseRatio {
            numerator,
            denominator,
            min,
            max,
        } => {
            let dens: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.method == denominator.as_str())
                .collect();
            if dens.is_empty() {
                passed = false;
                details.push(format!("no rows for {}", denominator.as_str()));
            }
            for den in dens {
                let num = rows
                    .iter()
                    .filter(|r| r.method == numerator.as_str() && r.budget == den.budget)
                    .find(|r| r.value == den.value)
                    .or_else(|| {
                        rows.iter().find(|r| {
                            r.method == numerator.as_str()
                                && r.budget == den.budget
                                && r.value.is_none()
                        })
                    });
                let Some(num) = num else {
                    passed = false;
                    details.push(format!(
                        "no {} row at budget {}",
                        numerator.as_str(),
                        den.budget
                    ));
                    continue;
                };
                let ratio = num.rmse / den.rmse;
                let ok = within(ratio, *min, *max);
                passed &= ok;
                let at = den.value.map_or(String::new(), |v| {
                    format!(" {}={v}", den.parameter.as_deref().unwrap_or(""))
                });
                details.push(format!(
                    "budget {}{at}: ratio {ratio:.4}{}",
                    den.budget,
                    if ok { "" } else { " FAIL" }
                ));
            }
        }
        Check::Coverage { method, min, max } => {
            let rs: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.method == method.as_str())
                .collect();
            passed = !rs.is_empty();
            for r in rs {
                let ok = within(r.coverage, Some(*min), Some(*max));
                passed &= ok;
                details.push(format!(
                    "budget {}: coverage {:.4}{}",
                    r.budget,
                    r.coverage,
                    if ok { "" } else { " FAIL" }
                ));
            }
        }
        Check::RmseSlope { method, min, max } => {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.method == method.as_str())
                .map(|r| (r.budget as f64, r.rmse))
                .collect();
            let slope = if pts.len() >= 2 {
                log_log_slope(&pts)
            } else {
                f64::NAN
            };
            passed = within(slope, Some(*min), Some(*max));
            details.push(format!("slope {slope:.4}"));
        }
    }
    CheckOutcome {
        check: check.clone(),
        passed,
        details,
    }
}

pub fn evaluate_checks(checks: &[Check], rows: &[MetricsRow]) -> Vec<CheckOutcome> {
    checks.iter().map(|c| evaluate_check(c, rows)).collect()
}

/// Per-group RMSE of a group-by method over repeated trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub method: String,
    pub budget: usize,
    pub rmse: Vec<f64>,
    pub max_rmse: f64,
    pub trials: usize,
    /// Trials where some group had no positive samples.
    pub failed: usize,
}

/// Repeats a group-by query (`uniform` selects the baseline) and measures
/// each group's RMSE against `truths`.
pub fn groupby_metrics(
    dataset: &Dataset,
    spec: &GroupSpec,
    config: &GroupByConfig,
    truths: &[f64],
    trials: usize,
    uniform: bool,
) -> Result<GroupMetrics> {
    let query = PreparedGroupBy::new(dataset, spec.clone(), config.clone())?;
    let method = if uniform {
        Method::Uniform
    } else {
        Method::Abae
    };
    let results: Vec<Vec<Option<f64>>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(config.seed, t, method);
            let report = if uniform {
                query.run_uniform(seed, false)
            } else {
                query.run(seed, false)
            }?;
            Ok(report.estimates())
        })
        .collect::<Result<_>>()?;
    let complete: Vec<&Vec<Option<f64>>> = results
        .iter()
        .filter(|r| r.iter().all(Option::is_some))
        .collect();
    let rmse: Vec<f64> = (0..truths.len())
        .map(|g| {
            let sq: f64 = complete
                .iter()
                .map(|r| (r[g].unwrap() - truths[g]).powi(2))
                .sum();
            (sq / complete.len() as f64).sqrt()
        })
        .collect();
    Ok(GroupMetrics {
        method: method.as_str().to_owned(),
        budget: config.budget,
        max_rmse: rmse.iter().copied().fold(f64::NAN, f64::max),
        rmse,
        trials,
        failed: trials - complete.len(),
    })
}
