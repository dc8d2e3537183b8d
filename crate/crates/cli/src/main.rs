//! Command-line front end: approximate aggregate queries, group-by queries,
//! proxy tools, synthetic data and benchmark experiments.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abae_core::data::{load_dataset, parse_mapping, save_dataset, Dataset, Schema};
use abae_core::groupby::{GroupByConfig, GroupKey, GroupSpec, OracleMode, PreparedGroupBy};
use abae_core::harness::{
    evaluate_checks, run_spec, write_metrics_csv, write_plot_data, ExperimentSpec,
};
use abae_core::predicate::{parse_predicate, PredicateExpr};
use abae_core::proxy::{fit_combined_proxy, select_proxy, uniform_pilot, ProxyCandidate};
use abae_core::sampler::{Aggregate, Method, PreparedQuery, ProxySource, QueryConfig, Stage2Mode};
use abae_core::synth::{generate_any, SyntheticSpec};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(
    name = "abae",
    version,
    about = "Approximate aggregates over records with expensive predicates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate AVG, SUM or COUNT over records matching a predicate.
    Run(RunArgs),
    /// Estimate the mean statistic of several groups at once.
    Groupby(GroupbyArgs),
    /// Rank candidate proxies by predicted error on a labelled pilot sample.
    SelectProxy(SelectArgs),
    /// Fit a logistic combination of proxies and write the combined scores.
    CombineProxies(CombineArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Run a repeated-trial experiment and write its metrics table.
    Bench(BenchArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Delimited input file with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "statistic")]
    statistic_col: String,
    /// Oracle label column, as NAME=COLUMN.
    #[arg(long = "label-col", value_name = "NAME=COLUMN")]
    label_cols: Vec<String>,
    /// Proxy score column, as NAME=COLUMN.
    #[arg(long = "proxy-col", value_name = "NAME=COLUMN")]
    proxy_cols: Vec<String>,
    /// Field delimiter.
    #[arg(long, default_value_t = ',', conflicts_with = "tab")]
    delimiter: char,
    /// Tab-separated input.
    #[arg(long)]
    tab: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let mut schema = Schema::new(self.statistic_col.clone());
        for m in &self.label_cols {
            let (name, col) = parse_mapping(m)?;
            schema = schema.label(name, col);
        }
        for m in &self.proxy_cols {
            let (name, col) = parse_mapping(m)?;
            schema = schema.proxy(name, col);
        }
        schema.delimiter = if self.tab {
            b'\t'
        } else {
            u8::try_from(self.delimiter).context("delimiter must be a single-byte character")?
        };
        load_dataset(&self.data, &schema)
            .with_context(|| format!("loading {}", self.data.display()))
    }
}

#[derive(Args)]
struct SamplingArgs {
    /// Oracle-call budget.
    #[arg(long)]
    budget: usize,
    /// Fraction of the budget spent in Stage 1.
    #[arg(long = "stage1-frac", default_value_t = 0.5)]
    stage1_fraction: f64,
    /// Number of proxy strata.
    #[arg(long, default_value_t = 5)]
    strata: usize,
    /// Miscoverage level of the confidence interval.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Abae,
    Uniform,
    AbaeNoReuse,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Abae => Method::Abae,
            MethodArg::Uniform => Method::Uniform,
            MethodArg::AbaeNoReuse => Method::AbaeNoReuse,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Predicate over label names, e.g. "a AND NOT b". Defaults to the only label.
    #[arg(long = "where")]
    predicate: Option<String>,
    /// Proxy column to stratify by. Defaults to combining the predicate's proxies.
    #[arg(long)]
    proxy: Option<String>,
    #[arg(long, default_value = "avg")]
    aggregate: Aggregate,
    #[arg(long, value_enum, default_value = "abae")]
    method: MethodArg,
    /// Stage 2 draws from whole strata and skips records seen in Stage 1.
    #[arg(long)]
    faithful_resample: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GroupbyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Group as LABEL=PROXY (repeatable).
    #[arg(long = "group", value_name = "LABEL=PROXY", required = true)]
    groups: Vec<String>,
    #[arg(long, default_value = "single")]
    oracle_mode: OracleMode,
    /// Use uniform sampling instead of the minimax allocation.
    #[arg(long)]
    uniform: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PilotArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "where")]
    predicate: Option<String>,
    /// Candidate proxy (repeatable). Defaults to every proxy column.
    #[arg(long = "candidate")]
    candidates: Vec<String>,
    /// Pilot sample size. Defaults to the Stage-1 share of the budget.
    #[arg(long)]
    pilot_size: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
    #[arg(long = "stage1-frac", default_value_t = 0.5)]
    stage1_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PilotArgs {
    fn pilot_size(&self) -> usize {
        self.pilot_size
            .unwrap_or((self.stage1_fraction * self.budget as f64).round() as usize)
    }

    fn candidates(&self, ds: &Dataset) -> Result<Vec<ProxyCandidate>> {
        let names = if self.candidates.is_empty() {
            ds.proxy_names()
        } else {
            self.candidates.clone()
        };
        if names.is_empty() {
            bail!("no proxy columns to choose from");
        }
        Ok(names
            .iter()
            .map(|n| ProxyCandidate::from_dataset(ds, n))
            .collect::<abae_core::Result<_>>()?)
    }
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    pilot: PilotArgs,
    #[arg(long, default_value_t = 5)]
    strata: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CombineArgs {
    #[command(flatten)]
    pilot: PilotArgs,
    /// CSV file receiving `id,score` for every record.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON spec tagged by family: {"single": {...}}, {"multi_pred": {...}} or {"groups": {...}}.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON experiment spec.
    #[arg(long)]
    spec: PathBuf,
    /// Metrics table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Optional gnuplot data file.
    #[arg(long)]
    plot_data: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn emit(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{text}")?;
            Ok(())
        }
    }
}

fn predicate_for(text: Option<&str>, ds: &Dataset) -> Result<PredicateExpr> {
    match text {
        Some(t) => Ok(parse_predicate(t)?),
        None => match ds.label_names() {
            [only] => Ok(PredicateExpr::base(only.clone())),
            _ => bail!("--where is required when the dataset has several label columns"),
        },
    }
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn run(args: RunArgs) -> Result<()> {
    let ds = args.data.load()?;
    let s = &args.sampling;
    let config = QueryConfig {
        aggregate: args.aggregate,
        proxy: args.proxy.clone().map(ProxySource::Column),
        stage1_fraction: s.stage1_fraction,
        num_strata: s.strata,
        alpha: s.alpha,
        bootstrap_trials: s.bootstrap,
        seed: s.seed,
        stage2_mode: if args.faithful_resample {
            Stage2Mode::FaithfulResample
        } else {
            Stage2Mode::Exclude
        },
        ..QueryConfig::new(predicate_for(args.predicate.as_deref(), &ds)?, s.budget)
    };
    let method = Method::from(args.method);
    let report = match method {
        Method::Uniform => abae_core::uniform_sample(&ds, &config)?,
        _ => PreparedQuery::new(&ds, config)?.report(method, s.seed)?,
    };
    warn(&report.warnings);
    emit(&report, args.out.as_deref())
}

fn groupby(args: GroupbyArgs) -> Result<()> {
    let ds = args.data.load()?;
    let groups = args
        .groups
        .iter()
        .map(|g| parse_mapping(g).map(|(key, proxy)| GroupKey { key, proxy }))
        .collect::<abae_core::Result<Vec<_>>>()?;
    let s = &args.sampling;
    let config = GroupByConfig {
        stage1_fraction: s.stage1_fraction,
        num_strata: s.strata,
        alpha: s.alpha,
        bootstrap_trials: s.bootstrap,
        seed: s.seed,
        ..GroupByConfig::new(s.budget)
    };
    let query = PreparedGroupBy::new(&ds, GroupSpec::new(groups, args.oracle_mode), config)?;
    let report = if args.uniform {
        query.run_uniform(s.seed, true)?
    } else {
        query.run(s.seed, true)?
    };
    warn(&report.warnings);
    let mut value = serde_json::to_value(&report)?;
    if let Some(Value::Array(list)) = value.get_mut("groups").map(Value::take) {
        let keyed: Map<String, Value> = list
            .into_iter()
            .map(|mut g| {
                let key = g.get_mut("key").map(Value::take);
                let key = key
                    .and_then(|k| k.as_str().map(str::to_owned))
                    .unwrap_or_default();
                if let Value::Object(m) = &mut g {
                    m.remove("key");
                }
                (key, g)
            })
            .collect();
        value["groups"] = Value::Object(keyed);
    }
    emit(&value, args.out.as_deref())
}

fn select(args: SelectArgs) -> Result<()> {
    let p = &args.pilot;
    let ds = p.data.load()?;
    let predicate = predicate_for(p.predicate.as_deref(), &ds)?;
    let candidates = p.candidates(&ds)?;
    let (pilot, ledger) = uniform_pilot(&ds, &predicate, p.pilot_size(), p.seed)?;
    let rankings = select_proxy(&candidates, &pilot, args.strata, p.budget)?;
    let out = serde_json::json!({
        "predicate": predicate.to_string(),
        "pilot_size": pilot.len(),
        "oracle_calls": ledger.calls_made(),
        "best": rankings.first().map(|r| r.name.clone()),
        "rankings": rankings,
    });
    emit(&out, args.out.as_deref())
}

fn combine(args: CombineArgs) -> Result<()> {
    let p = &args.pilot;
    let ds = p.data.load()?;
    let predicate = predicate_for(p.predicate.as_deref(), &ds)?;
    let candidates = p.candidates(&ds)?;
    let (pilot, ledger) = uniform_pilot(&ds, &predicate, p.pilot_size(), p.seed)?;
    let (fit, scores) = fit_combined_proxy(&candidates, &pilot)?;
    if let Some(w) = &fit.warning {
        eprintln!("warning: {w}");
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    ));
    w.write_record(["id", "score"])?;
    for (id, s) in scores.iter().enumerate() {
        w.write_record([id.to_string(), s.to_string()])?;
    }
    w.flush()?;
    let names: Vec<&str> = candidates.iter().map(|c| c.name.as_str()).collect();
    let out = serde_json::json!({
        "predicate": predicate.to_string(),
        "candidates": names,
        "pilot_size": pilot.len(),
        "oracle_calls": ledger.calls_made(),
        "fit": fit,
    });
    emit(&out, None)
}

fn synth(args: SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: SyntheticSpec = serde_json::from_str(&text).context("parsing synthetic spec")?;
    if let Some(seed) = args.seed {
        match &mut spec {
            SyntheticSpec::Single(s) => s.seed = seed,
            SyntheticSpec::MultiPred(s) => s.seed = seed,
            SyntheticSpec::Groups(s) => s.seed = seed,
        }
    }
    let (ds, truths) = generate_any(&spec)?;
    save_dataset(&ds, &args.out, &Schema::for_dataset(&ds))?;
    emit(
        &serde_json::json!({ "records": ds.len(), "ground_truth": truths }),
        None,
    )
}

fn bench(args: BenchArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: ExperimentSpec =
        serde_json::from_str(&text).context("parsing experiment spec")?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let result = run_spec(&spec)?;
    warn(&result.warnings);
    write_metrics_csv(&result.rows, BufWriter::new(File::create(&args.out)?))?;
    if let Some(path) = &args.plot_data {
        write_plot_data(&result.rows, BufWriter::new(File::create(path)?))?;
    }
    let checks = evaluate_checks(&spec.checks, &result.rows);
    let passed = checks.iter().all(|c| c.passed);
    emit(
        &serde_json::json!({ "name": result.name, "truth": result.truth, "checks": checks, "passed": passed }),
        None,
    )?;
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a).map(|()| true),
        Command::Groupby(a) => groupby(a).map(|()| true),
        Command::SelectProxy(a) => select(a).map(|()| true),
        Command::CombineProxies(a) => combine(a).map(|()| true),
        Command::Synth(a) => synth(a).map(|()| true),
        Command::Bench(a) => bench(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
