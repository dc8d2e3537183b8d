//! Synthetic datasets with known per-stratum positive rates and exact ground
//! truth.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AbaeError, Result};
use crate::predicate::{parse_predicate, PredicateExpr};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::sampler::Aggregate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    #[serde(default = "default_beta_a")]
    pub a: f64,
    #[serde(default = "default_beta_b")]
    pub b: f64,
}

fn default_beta_a() -> f64 {
    2.0
}
fn default_beta_b() -> f64 {
    8.0
}

impl Default for BetaParams {
    fn default() -> Self {
        BetaParams {
            a: default_beta_a(),
            b: default_beta_b(),
        }
    }
}

impl BetaParams {
    fn draw(&self, k: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let beta = Beta::new(self.a, self.b).map_err(|e| {
            AbaeError::config(format!(
                "invalid beta parameters ({}, {}): {e}",
                self.a, self.b
            ))
        })?;
        Ok((0..k).map(|_| beta.sample(rng)).collect())
    }
}

/// Exact answers of an aggregate query over a whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub avg: f64,
    pub sum: f64,
    pub count: usize,
}

impl GroundTruth {
    pub fn value(&self, aggregate: Aggregate) -> f64 {
        match aggregate {
            Aggregate::Avg => self.avg,
            Aggregate::Sum => self.sum,
            Aggregate::Count => self.count as f64,
        }
    }
}

/// Exhaustive evaluation of `predicate` over `dataset`.
pub fn ground_truth(dataset: &Dataset, predicate: &PredicateExpr) -> Result<GroundTruth> {
    let matches = dataset.matches(predicate)?;
    let (sum, count) = matches
        .iter()
        .zip(dataset.statistics())
        .filter(|(m, _)| **m)
        .fold((0.0, 0usize), |(s, c), (_, x)| (s + x, c + 1));
    if count == 0 {
        return Err(AbaeError::NoPositiveSamples);
    }
    Ok(GroundTruth {
        avg: sum / count as f64,
        sum,
        count,
    })
}

/// Single-predicate dataset with `k_true` latent strata laid out in contiguous
/// id blocks (block `k` holds ids `[k n / K, (k + 1) n / K)`).
///
/// A record in block `k` matches with probability `p[k]`, carries a statistic
/// drawn from `Normal(mu[k], sigma[k])` whether or not it matches, and has
/// proxy score `clamp(p[k] + Normal(0, proxy_noise), 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub k_true: usize,
    /// Ignored when `beta_params` is set.
    #[serde(default)]
    pub p: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub proxy_noise: f64,
    /// Draw each block's positive rate from this Beta distribution instead.
    #[serde(default)]
    pub beta_params: Option<BetaParams>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_predicate_name")]
    pub predicate: String,
}

fn default_predicate_name() -> String {
    "pred".to_owned()
}

impl Default for SynthSpec {
    /// Five blocks with rare positives concentrated in the top block and a
    /// mildly block-dependent statistic.
    fn default() -> Self {
        SynthSpec {
            n: 500_000,
            k_true: 5,
            p: vec![0.002, 0.004, 0.008, 0.02, 0.3],
            mu: vec![1.0, 1.1, 1.2, 1.3, 1.4],
            sigma: vec![1.0; 5],
            proxy_noise: 0.005,
            beta_params: None,
            seed: 0,
            predicate: default_predicate_name(),
        }
    }
}

const RATE_STREAM: u64 = 0x5241_5445;
const RECORD_STREAM: u64 = 0x5245_4344;

fn normal(rng: &mut StreamRng, mu: f64, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mu + sigma * z
}

fn block_of(n: usize, k: usize) -> impl Iterator<Item = usize> {
    (0..k).flat_map(move |b| std::iter::repeat_n(b, (b + 1) * n / k - b * n / k))
}

fn check_rates(p: &[f64]) -> Result<()> {
    if let Some(x) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(AbaeError::config(format!(
            "positive rate {x} is outside [0, 1]"
        )));
    }
    if p.iter().all(|&x| x == 0.0) {
        return Err(AbaeError::config("every positive rate is zero"));
    }
    Ok(())
}

fn check_common(n: usize, k: usize, mu: &[f64], sigma: &[f64], noise: f64) -> Result<()> {
    if k == 0 || n < k {
        return Err(AbaeError::config(format!(
            "need 1 <= k_true <= n, got k_true={k}, n={n}"
        )));
    }
    if mu.len() != k || sigma.len() != k {
        return Err(AbaeError::DimensionMismatch {
            expected: k,
            got: mu.len().min(sigma.len()),
        });
    }
    if mu.iter().any(|m| !m.is_finite()) || sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(AbaeError::config(
            "mu must be finite and sigma finite and non-negative",
        ));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(AbaeError::config(format!(
            "proxy noise must be non-negative, got {noise}"
        )));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        check_common(self.n, self.k_true, &self.mu, &self.sigma, self.proxy_noise)?;
        if self.beta_params.is_none() {
            if self.p.len() != self.k_true {
                return Err(AbaeError::DimensionMismatch {
                    expected: self.k_true,
                    got: self.p.len(),
                });
            }
            check_rates(&self.p)?;
        }
        Ok(())
    }

    /// Per-block positive rates, drawing them if `beta_params` is set.
    pub fn rates(&self) -> Result<Vec<f64>> {
        match &self.beta_params {
            Some(beta) => beta.draw(
                self.k_true,
                &mut stream(derive_seed(self.seed, RATE_STREAM)),
            ),
            None => Ok(self.p.clone()),
        }
    }

    pub fn predicate_expr(&self) -> PredicateExpr {
        PredicateExpr::base(self.predicate.clone())
    }
}

/// Generates the dataset described by `spec` and its exact answers.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let p = spec.rates()?;
    check_rates(&p)?;
    let mut rng = stream(derive_seed(spec.seed, RECORD_STREAM));
    let n = spec.n;
    let (mut stats, mut labels, mut proxy) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let (mut sum, mut count) = (0.0, 0usize);
    for k in block_of(n, spec.k_true) {
        let matched = rng.random_bool(p[k]);
        let x = normal(&mut rng, spec.mu[k], spec.sigma[k]);
        let score = normal(&mut rng, p[k], spec.proxy_noise).clamp(0.0, 1.0);
        if matched {
            sum += x;
            count += 1;
        }
        stats.push(x);
        labels.push(matched);
        proxy.push(score);
    }
    if count == 0 {
        return Err(AbaeError::NoPositiveSamples);
    }
    let ds = Dataset::new(
        format!("synth-{}", spec.seed),
        stats,
        vec![(spec.predicate.clone(), labels)],
        vec![(spec.predicate.clone(), proxy)],
    )?;
    Ok((
        ds,
        GroundTruth {
            avg: sum / count as f64,
            sum,
            count,
        },
    ))
}

/// Several independent predicates, each with its own latent strata and
/// Beta-drawn rates. The first predicate's strata are contiguous id blocks
/// and drive the statistic; the others are assigned at random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPredSynthSpec {
    pub n: usize,
    pub k_true: usize,
    pub predicates: Vec<String>,
    #[serde(default)]
    pub beta_params: BetaParams,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub proxy_noise: f64,
    pub query: String,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MultiPredSynthSpec {
    fn default() -> Self {
        MultiPredSynthSpec {
            n: 500_000,
            k_true: 5,
            predicates: vec!["a".to_owned(), "b".to_owned()],
            beta_params: BetaParams::default(),
            mu: vec![1.0, 1.1, 1.2, 1.3, 1.4],
            sigma: vec![1.0; 5],
            proxy_noise: 0.005,
            query: "a AND b".to_owned(),
            seed: 0,
        }
    }
}

impl MultiPredSynthSpec {
    pub fn validate(&self) -> Result<()> {
        check_common(self.n, self.k_true, &self.mu, &self.sigma, self.proxy_noise)?;
        if self.predicates.is_empty() {
            return Err(AbaeError::config("at least one predicate is required"));
        }
        let expr = self.query_expr()?;
        expr.bind(&self.predicates)?;
        Ok(())
    }

    pub fn query_expr(&self) -> Result<PredicateExpr> {
        parse_predicate(&self.query)
    }

    /// Rates of predicate `j` per latent stratum.
    pub fn rates(&self) -> Result<Vec<Vec<f64>>> {
        let mut rng = stream(derive_seed(self.seed, RATE_STREAM));
        (0..self.predicates.len())
            .map(|_| self.beta_params.draw(self.k_true, &mut rng))
            .collect()
    }
}

pub fn generate_multi(spec: &MultiPredSynthSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let rates = spec.rates()?;
    let mut rng = stream(derive_seed(spec.seed, RECORD_STREAM));
    let (n, k, m) = (spec.n, spec.k_true, spec.predicates.len());
    let mut stats = Vec::with_capacity(n);
    let mut labels = vec![Vec::with_capacity(n); m];
    let mut proxies = vec![Vec::with_capacity(n); m];
    for z0 in block_of(n, k) {
        for j in 0..m {
            let z = if j == 0 { z0 } else { rng.random_range(0..k) };
            let p = rates[j][z];
            labels[j].push(rng.random_bool(p));
            proxies[j].push(normal(&mut rng, p, spec.proxy_noise).clamp(0.0, 1.0));
        }
        stats.push(normal(&mut rng, spec.mu[z0], spec.sigma[z0]));
    }
    let ds = Dataset::new(
        format!("multi-{}", spec.seed),
        stats,
        spec.predicates.iter().cloned().zip(labels).collect(),
        spec.predicates.iter().cloned().zip(proxies).collect(),
    )?;
    let truth = ground_truth(&ds, &spec.query_expr()?)?;
    Ok((ds, truth))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    /// Each record belongs to at most one group.
    #[default]
    Exclusive,
    /// Group memberships are drawn independently.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub name: String,
    pub rate: f64,
}

/// Group-by dataset. Every group has its own latent strata, assigned
/// independently at random; a record in latent stratum `k` of group `g` has
/// membership propensity `rate_g * K * profile_k / sum(profile)`, and the
/// group's proxy is that propensity plus noise. Statistics are
/// `Normal(mu, sigma)` for every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSynthSpec {
    pub n: usize,
    pub k_true: usize,
    pub groups: Vec<GroupRate>,
    pub profile: Vec<f64>,
    #[serde(default)]
    pub membership: Membership,
    pub mu: f64,
    pub sigma: f64,
    #[serde(default)]
    pub proxy_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GroupSynthSpec {
    fn with_rates(rates: &[f64], membership: Membership) -> Self {
        GroupSynthSpec {
            n: 200_000,
            k_true: 5,
            groups: rates
                .iter()
                .enumerate()
                .map(|(i, &rate)| GroupRate {
                    name: format!("g{i}"),
                    rate,
                })
                .collect(),
            profile: vec![0.0, 0.0, 0.05, 0.15, 0.8],
            membership,
            mu: 1.0,
            sigma: 1.0,
            proxy_noise: 0.005,
            seed: 0,
        }
    }

    /// Four exclusive groups of nearly equal, small size.
    pub fn exclusive_groups() -> Self {
        Self::with_rates(&[0.033, 0.033, 0.034, 0.035], Membership::Exclusive)
    }

    /// Four overlapping groups of decreasing size.
    pub fn independent_groups() -> Self {
        Self::with_rates(&[0.16, 0.12, 0.09, 0.05], Membership::Independent)
    }

    pub fn propensities(&self) -> Vec<Vec<f64>> {
        let total: f64 = self.profile.iter().sum();
        self.groups
            .iter()
            .map(|g| {
                self.profile
                    .iter()
                    .map(|w| g.rate * self.k_true as f64 * w / total)
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_common(
            self.n,
            self.k_true,
            &vec![self.mu; self.k_true],
            &vec![self.sigma; self.k_true],
            self.proxy_noise,
        )?;
        if self.groups.len() < 2 {
            return Err(AbaeError::config("at least two groups are required"));
        }
        if self.profile.len() != self.k_true {
            return Err(AbaeError::DimensionMismatch {
                expected: self.k_true,
                got: self.profile.len(),
            });
        }
        if self.profile.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.profile.iter().sum::<f64>() <= 0.0
        {
            return Err(AbaeError::config(
                "profile weights must be non-negative with a positive sum",
            ));
        }
        for p in self.propensities() {
            check_rates(&p)?;
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }
}

/// Per-group dataset plus the exact mean statistic of each group.
pub fn generate_groups(spec: &GroupSynthSpec) -> Result<(Dataset, Vec<GroundTruth>)> {
    spec.validate()?;
    let prop = spec.propensities();
    let g = spec.groups.len();
    let mut rng = stream(derive_seed(spec.seed, RECORD_STREAM));
    let mut stats = Vec::with_capacity(spec.n);
    let mut labels = vec![Vec::with_capacity(spec.n); g];
    let mut proxies = vec![Vec::with_capacity(spec.n); g];
    let mut pi = vec![0.0; g];
    for _ in 0..spec.n {
        for j in 0..g {
            pi[j] = prop[j][rng.random_range(0..spec.k_true)];
            proxies[j].push(normal(&mut rng, pi[j], spec.proxy_noise).clamp(0.0, 1.0));
        }
        match spec.membership {
            Membership::Independent => {
                for j in 0..g {
                    labels[j].push(rng.random_bool(pi[j]));
                }
            }
            Membership::Exclusive => {
                let total: f64 = pi.iter().sum();
                let scale = if total > 1.0 { 1.0 / total } else { 1.0 };
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = None;
                for (j, &p) in pi.iter().enumerate() {
                    acc += p * scale;
                    if chosen.is_none() && u < acc {
                        chosen = Some(j);
                    }
                }
                for (j, column) in labels.iter_mut().enumerate() {
                    column.push(chosen == Some(j));
                }
            }
        }
        stats.push(normal(&mut rng, spec.mu, spec.sigma));
    }
    let names = spec.names();
    let ds = Dataset::new(
        format!("groups-{}", spec.seed),
        stats,
        names.iter().cloned().zip(labels).collect(),
        names.iter().cloned().zip(proxies).collect(),
    )?;
    let truths = names
        .iter()
        .map(|name| ground_truth(&ds, &PredicateExpr::base(name.clone())))
        .collect::<Result<_>>()?;
    Ok((ds, truths))
}

/// Any of the synthetic dataset families, tagged by family name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticSpec {
    Single(SynthSpec),
    MultiPred(MultiPredSynthSpec),
    Groups(GroupSynthSpec),
}

/// Ground truth of one query over a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedTruth {
    pub predicate: String,
    pub truth: GroundTruth,
}

pub fn generate_any(spec: &SyntheticSpec) -> Result<(Dataset, Vec<NamedTruth>)> {
    let named = |predicate: String, truth| NamedTruth { predicate, truth };
    match spec {
        SyntheticSpec::Single(s) => {
            let (ds, t) = generate(s)?;
            Ok((ds, vec![named(s.predicate.clone(), t)]))
        }
        SyntheticSpec::MultiPred(s) => {
            let (ds, t) = generate_multi(s)?;
            Ok((ds, vec![named(s.query.clone(), t)]))
        }
        SyntheticSpec::Groups(s) => {
            let (ds, ts) = generate_groups(s)?;
            Ok((
                ds,
                s.names()
                    .into_iter()
                    .zip(ts)
                    .map(|(n, t)| named(n, t))
                    .collect(),
            ))
        }
    }
}
