//! Choosing between candidate proxies and combining several proxies into one
//! score with logistic regression, both from a uniform labelled pilot sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OracleLedger};
use crate::error::{AbaeError, Result};
use crate::estimators::{predicted_mse, StratumStats};
use crate::predicate::PredicateExpr;
use crate::rng::{derive_seed, stream, PartialShuffle, SAMPLING_STREAM};
use crate::stratify::stratify_by_quantile;

/// Ridge penalty on the logistic weights (the bias is not penalised).
pub const L2_PENALTY: f64 = 1e-3;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyCandidate {
    pub name: String,
    pub scores: Vec<f64>,
}

impl ProxyCandidate {
    pub fn new(name: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if let Some(row) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(AbaeError::Validation {
                row,
                message: format!("proxy `{name}` score {} is outside [0, 1]", scores[row]),
            });
        }
        Ok(ProxyCandidate { name, scores })
    }

    pub fn from_dataset(dataset: &Dataset, name: &str) -> Result<Self> {
        Ok(ProxyCandidate {
            name: name.to_owned(),
            scores: dataset.proxy(name)?.to_vec(),
        })
    }
}

/// One oracle-labelled pilot record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: usize,
    pub matched: bool,
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProxyRanking {
    pub name: String,
    pub predicted_mse: f64,
}

/// Draws `size` records uniformly and labels them through a fresh ledger.
pub fn uniform_pilot(
    dataset: &Dataset,
    predicate: &PredicateExpr,
    size: usize,
    seed: u64,
) -> Result<(Vec<LabeledSample>, OracleLedger)> {
    let bound = dataset.bind_predicate(predicate)?;
    let mut ledger = OracleLedger::new(size * bound.bases().len().max(1));
    let mut rng = stream(derive_seed(seed, SAMPLING_STREAM));
    let ids = PartialShuffle::new(dataset.len()).draw(&mut rng, size);
    let samples = ids
        .into_iter()
        .map(|id| {
            let matched = ledger.evaluate(dataset, id, &bound)?;
            Ok(LabeledSample {
                id,
                matched,
                statistic: if matched { dataset.statistic(id) } else { 0.0 },
            })
        })
        .collect::<Result<_>>()?;
    Ok((samples, ledger))
}

/// Ranks candidates by the closed-form MSE their quantile stratification
/// would achieve at budget `budget`, estimated by stratifying the pilot
/// sample into `k` strata by each candidate. Ascending, ties broken by name.
pub fn select_proxy(
    candidates: &[ProxyCandidate],
    pilot: &[LabeledSample],
    k: usize,
    budget: usize,
) -> Result<Vec<ProxyRanking>> {
    if !pilot.iter().any(|s| s.matched) {
        return Err(AbaeError::NoPositiveSamples);
    }
    let mut out = candidates
        .par_iter()
        .map(|c| {
            let scores = pilot
                .iter()
                .map(|s| {
                    c.scores
                        .get(s.id)
                        .copied()
                        .ok_or(AbaeError::DimensionMismatch {
                            expected: s.id + 1,
                            got: c.scores.len(),
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            let strat = stratify_by_quantile(&scores, k, &c.name)?;
            let stats: Vec<StratumStats> = strat
                .strata()
                .iter()
                .map(|positions| {
                    let positives = positions
                        .iter()
                        .filter(|&&i| pilot[i].matched)
                        .map(|&i| pilot[i].statistic)
                        .collect();
                    StratumStats::from_positives(positions.len(), positives)
                })
                .collect();
            let p: Vec<f64> = stats.iter().map(|s| s.p_hat).collect();
            let sigma: Vec<f64> = stats.iter().map(|s| s.sigma_hat).collect();
            Ok(ProxyRanking {
                name: c.name.clone(),
                predicted_mse: predicted_mse(&p, &sigma, budget)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        a.predicted_mse
            .total_cmp(&b.predicted_mse)
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LogisticModel {
    pub fn zeros(d: usize) -> Self {
        LogisticModel {
            weights: vec![0.0; d],
            bias: 0.0,
        }
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

/// Mean negative log-likelihood plus `L2_PENALTY / 2 * |w|^2`.
pub fn logistic_loss(model: &LogisticModel, features: &[Vec<f64>], labels: &[bool]) -> f64 {
    let n = features.len() as f64;
    let nll: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = model.logit(x);
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum::<f64>()
        / n;
    nll + 0.5 * L2_PENALTY * model.weights.iter().map(|w| w * w).sum::<f64>()
}

/// Gradient of [`logistic_loss`] as `(d/dw, d/db)`.
pub fn logistic_gradient(
    model: &LogisticModel,
    features: &[Vec<f64>],
    labels: &[bool],
) -> (Vec<f64>, f64) {
    let n = features.len() as f64;
    let mut gw: Vec<f64> = vec![0.0; model.weights.len()];
    let mut gb = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let r = model.predict(x) - if y { 1.0 } else { 0.0 };
        gb += r;
        for (g, v) in gw.iter_mut().zip(x) {
            *g += r * v;
        }
    }
    for (g, w) in gw.iter_mut().zip(&model.weights) {
        *g = *g / n + L2_PENALTY * w;
    }
    (gw, gb / n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Loss after each accepted step, starting with the initial loss.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
    pub warning: Option<String>,
}

/// Fits a ridge-penalised logistic regression by gradient descent with a
/// backtracking (Armijo) line search.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[bool]) -> Result<LogisticFit> {
    let n = features.len();
    if labels.len() != n {
        return Err(AbaeError::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let d = features.first().map_or(0, Vec::len);
    if let Some(bad) = features.iter().find(|x| x.len() != d) {
        return Err(AbaeError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    if n < d + 1 {
        return Err(AbaeError::config(format!(
            "{n} samples cannot fit {d} features and a bias"
        )));
    }
    if let Some(row) = features
        .iter()
        .position(|x| x.iter().any(|v| !v.is_finite()))
    {
        return Err(AbaeError::Validation {
            row,
            message: "feature is not finite".to_owned(),
        });
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == n {
        let rate = (positives as f64 + 0.5) / (n as f64 + 1.0);
        let model = LogisticModel {
            weights: vec![0.0; d],
            bias: (rate / (1.0 - rate)).ln(),
        };
        return Ok(LogisticFit {
            model,
            iterations: 0,
            converged: false,
            gradient_norm: f64::NAN,
            loss_history: Vec::new(),
            warning: Some("labels contain a single class; returning a constant model".to_owned()),
        });
    }

    let mut model = LogisticModel::zeros(d);
    let mut loss = logistic_loss(&model, features, labels);
    let mut history = vec![loss];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let (gw, gb) = logistic_gradient(&model, features, labels);
        let sq = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        grad_norm = sq.sqrt();
        if grad_norm < GRADIENT_TOLERANCE || iterations >= MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = LogisticModel {
                weights: model
                    .weights
                    .iter()
                    .zip(&gw)
                    .map(|(w, g)| w - step * g)
                    .collect(),
                bias: model.bias - step * gb,
            };
            let trial_loss = logistic_loss(&trial, features, labels);
            if trial_loss <= loss - 1e-4 * step * sq {
                model = trial;
                loss = trial_loss;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(loss);
    }
    let converged = grad_norm < GRADIENT_TOLERANCE;
    Ok(LogisticFit {
        model,
        iterations,
        converged,
        gradient_norm: grad_norm,
        loss_history: history,
        warning: (!converged).then(|| format!("stopped with gradient norm {grad_norm:.3e}")),
    })
}

/// Scores every record with a fitted model over the candidates' scores.
pub fn combined_proxy_scores(
    model: &LogisticModel,
    candidates: &[ProxyCandidate],
) -> Result<Vec<f64>> {
    if candidates.len() != model.weights.len() {
        return Err(AbaeError::DimensionMismatch {
            expected: model.weights.len(),
            got: candidates.len(),
        });
    }
    let n = candidates.first().map_or(0, |c| c.scores.len());
    if let Some(c) = candidates.iter().find(|c| c.scores.len() != n) {
        return Err(AbaeError::DimensionMismatch {
            expected: n,
            got: c.scores.len(),
        });
    }
    Ok((0..n)
        .map(|i| {
            let z = model.bias
                + candidates
                    .iter()
                    .zip(&model.weights)
                    .map(|(c, w)| w * c.scores[i])
                    .sum::<f64>();
            sigmoid(z)
        })
        .collect())
}

/// Fits a combination of `candidates` on pilot labels and scores every record.
pub fn fit_combined_proxy(
    candidates: &[ProxyCandidate],
    pilot: &[LabeledSample],
) -> Result<(LogisticFit, Vec<f64>)> {
    let features: Vec<Vec<f64>> = pilot
        .iter()
        .map(|s| candidates.iter().map(|c| c.scores[s.id]).collect())
        .collect();
    let labels: Vec<bool> = pilot.iter().map(|s| s.matched).collect();
    let fit = fit_logistic(&features, &labels)?;
    let scores = combined_proxy_scores(&fit.model, candidates)?;
    Ok((fit, scores))
}
