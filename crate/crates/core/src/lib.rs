//! Approximate AVG, SUM and COUNT queries over records whose predicate is
//! expensive to evaluate.
//!
//! Records are stratified by a cheap proxy score. A pilot sample estimates
//! each stratum's positive rate and spread, the remaining oracle budget is
//! allocated to the strata where it reduces error most, and the estimate is
//! reported with a bootstrap confidence interval. Extensions cover group-by
//! keys, boolean combinations of predicates, and choosing or combining
//! proxies.

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod estimators;
pub mod groupby;
pub mod harness;
pub mod optim;
pub mod predicate;
pub mod proxy;
pub mod rng;
pub mod sampler;
pub mod stratify;
pub mod synth;

pub use bootstrap::{bootstrap_ci, BootstrapCi, BootstrapConfig};
pub use data::{load_dataset, oracle_eval, save_dataset, Dataset, OracleLedger, Record, Schema};
pub use error::{AbaeError, Result};
pub use estimators::{
    combine_estimate, optimal_allocation, predicted_mse, stratum_stats, AllocationPlan,
    StratumStats,
};
pub use groupby::{
    abae_groupby, uniform_groupby, GroupByConfig, GroupByReport, GroupKey, GroupSpec, OracleMode,
};
pub use harness::{run_experiment, sweep, ExperimentSpec, MetricsRow};
pub use predicate::{combine_scores, eval_oracle_expr, parse_predicate, PredicateExpr};
pub use proxy::{combined_proxy_scores, fit_logistic, select_proxy, LogisticModel, ProxyCandidate};
pub use sampler::{abae_sample, uniform_sample, Aggregate, EstimateReport, Method, QueryConfig};
pub use stratify::{stratify_by_quantile, Stratification};
pub use synth::{generate, GroundTruth, SynthSpec};
