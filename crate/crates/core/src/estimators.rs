//! Per-stratum plug-in statistics and the allocation / error formulas built on
//! them.
//!
//! Notation: `p` is a stratum's predicate positive rate, `sigma` the standard
//! deviation of the statistic among its positive records, `w = p / sum(p)` the
//! stratum's weight in the overall mean and `T` the share of the sampling
//! budget it receives.

use serde::Serialize;

use crate::error::{AbaeError, Result};

/// Plug-in estimates for one stratum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumStats {
    pub n_drawn: usize,
    /// Statistic values of the drawn records that satisfied the predicate.
    #[serde(skip)]
    pub positives: Vec<f64>,
    pub n_positive: usize,
    pub p_hat: f64,
    pub mu_hat: f64,
    pub sigma_hat: f64,
}

impl StratumStats {
    /// Statistics for a stratum with no draws at all.
    pub fn undrawn() -> Self {
        StratumStats {
            n_drawn: 0,
            positives: Vec::new(),
            n_positive: 0,
            p_hat: 0.0,
            mu_hat: 0.0,
            sigma_hat: 0.0,
        }
    }

    pub fn from_positives(n_drawn: usize, positives: Vec<f64>) -> Self {
        let b = positives.len();
        debug_assert!(b <= n_drawn);
        if n_drawn == 0 {
            return StratumStats::undrawn();
        }
        let mu_hat = if b > 0 {
            positives.iter().sum::<f64>() / b as f64
        } else {
            0.0
        };
        let var = if b > 1 {
            positives.iter().map(|x| (x - mu_hat).powi(2)).sum::<f64>() / (b - 1) as f64
        } else {
            0.0
        };
        StratumStats {
            n_drawn,
            n_positive: b,
            p_hat: b as f64 / n_drawn as f64,
            mu_hat,
            sigma_hat: var.sqrt(),
            positives,
        }
    }
}

/// Computes `p_hat`, `mu_hat` and `sigma_hat` from `(statistic, matched)` draws.
/// The statistic of unmatched draws is ignored.
pub fn stratum_stats(samples: &[(f64, bool)]) -> Result<StratumStats> {
    if samples.is_empty() {
        return Err(AbaeError::EmptyInput("stratum has no samples"));
    }
    let positives = samples
        .iter()
        .filter(|(_, m)| *m)
        .map(|(x, _)| *x)
        .collect();
    Ok(StratumStats::from_positives(samples.len(), positives))
}

/// Fractions of the budget per stratum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationPlan {
    pub weights: Vec<f64>,
    /// Set when every `sqrt(p) * sigma` was zero and the plan fell back to
    /// uniform.
    pub fallback: bool,
}

impl AllocationPlan {
    pub fn uniform(k: usize) -> Self {
        AllocationPlan {
            weights: vec![1.0 / k as f64; k],
            fallback: true,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_lengths(p: &[f64], sigma: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(AbaeError::EmptyInput("no strata"));
    }
    if p.len() != sigma.len() {
        return Err(AbaeError::DimensionMismatch {
            expected: p.len(),
            got: sigma.len(),
        });
    }
    Ok(())
}

/// `T_k = sqrt(p_k) sigma_k / sum_i sqrt(p_i) sigma_i`, or uniform when the
/// denominator is zero.
pub fn optimal_allocation(p: &[f64], sigma: &[f64]) -> Result<AllocationPlan> {
    check_lengths(p, sigma)?;
    let raw: Vec<f64> = p
        .iter()
        .zip(sigma)
        .map(|(p, s)| p.max(0.0).sqrt() * s.max(0.0))
        .collect();
    let total: f64 = raw.iter().sum();
    if total.is_nan() || total <= 0.0 || !total.is_finite() {
        return Ok(AllocationPlan::uniform(p.len()));
    }
    Ok(AllocationPlan {
        weights: raw.into_iter().map(|r| r / total).collect(),
        fallback: false,
    })
}

/// Squared error of the stratified estimator with deterministic draws under
/// the optimal allocation: `(sum_k sqrt(p_k) sigma_k)^2 / (N p_all^2)`.
pub fn predicted_mse(p: &[f64], sigma: &[f64], budget: usize) -> Result<f64> {
    check_lengths(p, sigma)?;
    let p_all: f64 = p.iter().sum();
    if p_all.is_nan() || p_all <= 0.0 {
        return Err(AbaeError::NoPositiveSamples);
    }
    if budget == 0 {
        return Err(AbaeError::config("budget must be positive"));
    }
    let s: f64 = p.iter().zip(sigma).map(|(p, s)| p.sqrt() * s).sum();
    Ok(s * s / (budget as f64 * p_all * p_all))
}

/// Squared error of the stratified estimator with deterministic draws under an
/// arbitrary allocation `t`: `sum_k w_k^2 sigma_k^2 / (p_k T_k N)`.
///
/// Strata with zero weight or zero variance contribute nothing; a stratum with
/// positive contribution and no budget makes the error infinite.
pub fn allocation_mse(p: &[f64], sigma: &[f64], t: &[f64], budget: f64) -> Result<f64> {
    check_lengths(p, sigma)?;
    if t.len() != p.len() {
        return Err(AbaeError::DimensionMismatch {
            expected: p.len(),
            got: t.len(),
        });
    }
    let p_all: f64 = p.iter().sum();
    if p_all.is_nan() || p_all <= 0.0 {
        return Err(AbaeError::NoPositiveSamples);
    }
    Ok(p.iter()
        .zip(sigma)
        .zip(t)
        .map(|((&p, &s), &t)| {
            let w = p / p_all;
            let num = w * w * s * s;
            if num == 0.0 {
                0.0
            } else if t <= 0.0 {
                f64::INFINITY
            } else {
                num / (p * t * budget)
            }
        })
        .sum())
}

/// `sum_k p_hat_k mu_hat_k / sum_k p_hat_k`.
pub fn combine_estimate(stats: &[StratumStats]) -> Result<f64> {
    let den: f64 = stats.iter().map(|s| s.p_hat).sum();
    if den.is_nan() || den <= 0.0 {
        return Err(AbaeError::NoPositiveSamples);
    }
    Ok(stats.iter().map(|s| s.p_hat * s.mu_hat).sum::<f64>() / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn stats_from_mixed_draws() {
        let s = stratum_stats(&[(5.0, true), (7.0, true), (3.0, false), (1.0, false)]).unwrap();
        assert_eq!(s.p_hat, 0.5);
        assert_eq!(s.mu_hat, 6.0);
        assert!((s.sigma_hat.powi(2) - 2.0).abs() < 1e-12);
        assert_eq!(s.n_drawn, 4);
        assert_eq!(s.positives, vec![5.0, 7.0]);
    }

    #[test]
    fn stats_without_positives() {
        let s = stratum_stats(&[(5.0, false), (7.0, false)]).unwrap();
        assert_eq!((s.p_hat, s.mu_hat, s.sigma_hat), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_positive_has_zero_sigma() {
        let s = stratum_stats(&[(5.0, true), (7.0, false)]).unwrap();
        assert_eq!(s.sigma_hat, 0.0);
        assert_eq!(s.mu_hat, 5.0);
    }

    #[test]
    fn empty_stratum_is_error() {
        assert!(matches!(stratum_stats(&[]), Err(AbaeError::EmptyInput(_))));
    }

    #[test]
    fn allocation_examples() {
        let t = optimal_allocation(&[0.25, 0.25], &[1.0, 1.0]).unwrap();
        assert_eq!(t.weights, vec![0.5, 0.5]);
        let t = optimal_allocation(&[0.04, 0.16], &[2.0, 1.0]).unwrap();
        assert!((t.weights[0] - 0.5).abs() < 1e-12);
        let t = optimal_allocation(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(t.weights, vec![1.0, 0.0]);
        assert!(!t.fallback);
    }

    #[test]
    fn degenerate_allocation_falls_back_to_uniform() {
        let t = optimal_allocation(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(t.fallback);
        assert_eq!(t.weights, vec![1.0 / 3.0; 3]);
        let t = optimal_allocation(&[0.5, 0.5], &[0.0, 0.0]).unwrap();
        assert!(t.fallback);
    }

    // Brute-force grid over T_1 in steps of 1e-3 for the two-stratum example.
    #[test]
    fn allocation_matches_grid_minimum() {
        let (p, s) = ([0.04, 0.16], [2.0, 1.0]);
        let best = (1..1000)
            .map(|i| i as f64 / 1000.0)
            .min_by(|a, b| {
                let fa = allocation_mse(&p, &s, &[*a, 1.0 - a], 1.0).unwrap();
                let fb = allocation_mse(&p, &s, &[*b, 1.0 - b], 1.0).unwrap();
                fa.total_cmp(&fb)
            })
            .unwrap();
        let t = optimal_allocation(&p, &s).unwrap();
        assert!((t.weights[0] - best).abs() < 1e-3);
    }

    #[test]
    fn predicted_mse_examples() {
        let mse = predicted_mse(&[1.0, 0.0, 0.0, 0.0, 0.0], &[1.0; 5], 100).unwrap();
        assert!((mse - 0.01).abs() < 1e-15);
        // Uniform sampling with deterministic draws: sigma^2 / (N p_avg).
        let uniform = 1.0 / (100.0 * 0.2);
        assert!((uniform / mse - 5.0).abs() < 1e-12);
        let mse = predicted_mse(&[0.3], &[2.0], 50).unwrap();
        assert!((mse - 4.0 / (50.0 * 0.3)).abs() < 1e-15);
        let mse = predicted_mse(&[0.5, 0.5], &[1.0, 3.0], 1000).unwrap();
        assert!((mse - 0.008).abs() < 1e-15);
        assert!(matches!(
            predicted_mse(&[0.0, 0.0], &[1.0, 1.0], 10),
            Err(AbaeError::NoPositiveSamples)
        ));
    }

    // Deterministic-draw simulation: B_k = p_k T_k N normal positives per
    // stratum, combined with the true weights.
    #[test]
    fn predicted_mse_matches_simulation() {
        let (p, s, n) = ([0.5, 0.5], [1.0, 3.0], 1000usize);
        let t = optimal_allocation(&p, &s).unwrap().weights;
        let mut rng = crate::rng::stream(11);
        let reps = 5000;
        let mut se = 0.0;
        for _ in 0..reps {
            let mut est = 0.0;
            for k in 0..2 {
                let b = (p[k] * t[k] * n as f64).round() as usize;
                let d = Normal::new(0.0, s[k]).unwrap();
                let mean = (0..b).map(|_| d.sample(&mut rng)).sum::<f64>() / b as f64;
                est += 0.5 * mean;
            }
            se += est * est;
        }
        let mc = se / reps as f64;
        assert!((mc / 0.008 - 1.0).abs() < 0.1, "simulated {mc}");
    }

    #[test]
    fn combine_examples() {
        let s = |p: f64, mu: f64| StratumStats {
            p_hat: p,
            mu_hat: mu,
            ..StratumStats::undrawn()
        };
        assert!((combine_estimate(&[s(0.3, 2.0), s(0.3, 4.0)]).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(combine_estimate(&[s(0.2, 4.0), s(0.0, 99.0)]).unwrap(), 4.0);
        assert!((combine_estimate(&[s(0.1, 2.0), s(0.3, 6.0)]).unwrap() - 5.0).abs() < 1e-12);
        assert!(matches!(
            combine_estimate(&[s(0.0, 1.0)]),
            Err(AbaeError::NoPositiveSamples)
        ));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..7).prop_flat_map(|k| {
            (
                prop::collection::vec(0.01f64..1.0, k),
                prop::collection::vec(0.05f64..5.0, k),
            )
        })
    }

    proptest! {
        #[test]
        fn both_mse_forms_agree((p, s) in instance(), n in 1usize..100_000) {
            let t = optimal_allocation(&p, &s).unwrap().weights;
            let closed = predicted_mse(&p, &s, n).unwrap();
            let general = allocation_mse(&p, &s, &t, n as f64).unwrap();
            prop_assert!((closed - general).abs() <= 1e-12 * closed.max(1e-300));
        }

        #[test]
        fn optimum_beats_perturbations((p, s) in instance(), raw in prop::collection::vec(0.01f64..1.0, 6)) {
            let k = p.len();
            let total: f64 = raw[..k].iter().sum();
            let t: Vec<f64> = raw[..k].iter().map(|r| r / total).collect();
            let best = predicted_mse(&p, &s, 1000).unwrap();
            prop_assert!(allocation_mse(&p, &s, &t, 1000.0).unwrap() >= best * (1.0 - 1e-12));
        }

        #[test]
        fn allocation_ignores_sigma_scale((p, s) in instance(), c in 0.01f64..100.0) {
            let a = optimal_allocation(&p, &s).unwrap();
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            let b = optimal_allocation(&p, &scaled).unwrap();
            let total: f64 = a.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn estimates_scale_with_statistic(seed in any::<u64>(), c in -10.0f64..10.0) {
            let mut rng = crate::rng::stream(seed);
            let strata: Vec<Vec<(f64, bool)>> = (0..3)
                .map(|_| (0..20).map(|_| (rng.random_range(-5.0..5.0), rng.random_bool(0.5))).collect())
                .collect();
            let stats: Vec<StratumStats> = strata.iter().map(|s| stratum_stats(s).unwrap()).collect();
            let scaled: Vec<StratumStats> = strata
                .iter()
                .map(|s| stratum_stats(&s.iter().map(|(x, m)| (x * c, *m)).collect::<Vec<_>>()).unwrap())
                .collect();
            prop_assume!(stats.iter().any(|s| s.p_hat > 0.0));
            let a = combine_estimate(&stats).unwrap();
            let b = combine_estimate(&scaled).unwrap();
            prop_assert!((b - c * a).abs() < 1e-9 * (1.0 + a.abs() * c.abs()));
            let p: Vec<f64> = stats.iter().map(|s| s.p_hat).collect();
            let sa: Vec<f64> = stats.iter().map(|s| s.sigma_hat).collect();
            let sb: Vec<f64> = scaled.iter().map(|s| s.sigma_hat).collect();
            let ma = predicted_mse(&p, &sa, 100).unwrap();
            let mb = predicted_mse(&p, &sb, 100).unwrap();
            prop_assert!((mb - c * c * ma).abs() < 1e-9 * (1.0 + ma * c * c));
        }
    }
}
