//! Percentile bootstrap over stratified samples.
//!
//! Each trial resamples every stratum's drawn records (match indicator and
//! value) with replacement to the stratum's original size and recomputes the
//! combined estimate. Resampling drawn records rather than positives carries
//! the uncertainty of `p_hat` into the interval.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AbaeError, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub trials: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(AbaeError::config("bootstrap trials must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AbaeError::config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Resampled summary of one stratum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StratumResample {
    pub drawn: usize,
    pub positives: usize,
    pub positive_sum: f64,
}

impl StratumResample {
    pub fn p_hat(&self) -> f64 {
        if self.drawn == 0 {
            0.0
        } else {
            self.positives as f64 / self.drawn as f64
        }
    }

    pub fn mu_hat(&self) -> f64 {
        if self.positives == 0 {
            0.0
        } else {
            self.positive_sum / self.positives as f64
        }
    }
}

/// `sum p* mu* / sum p*` over resampled strata, `None` when no positives.
pub fn combined_mean(strata: &[StratumResample]) -> Option<f64> {
    let den: f64 = strata.iter().map(StratumResample::p_hat).sum();
    (den > 0.0).then(|| strata.iter().map(|s| s.p_hat() * s.mu_hat()).sum::<f64>() / den)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    pub trials: usize,
    /// Trials whose statistic was undefined (no resampled positives).
    pub skipped: usize,
    /// More than half of the trials were skipped.
    pub degenerate: bool,
}

/// Replicates of `statistic` over `trials` resamples. Trial `b` uses the
/// stream `derive_seed(seed, b)`, so the output does not depend on scheduling.
pub fn bootstrap_replicates<F>(
    per_stratum: &[Vec<(f64, bool)>],
    trials: usize,
    seed: u64,
    statistic: F,
) -> (Vec<Option<f64>>, usize)
where
    F: Fn(&[StratumResample]) -> Option<f64> + Sync,
{
    let pools: Vec<(usize, Vec<f64>)> = per_stratum
        .iter()
        .map(|s| (s.len(), s.iter().filter(|x| x.1).map(|x| x.0).collect()))
        .collect();
    let reps: Vec<Option<f64>> = (0..trials)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(derive_seed(seed, b as u64));
            let resampled: Vec<StratumResample> = pools
                .iter()
                .map(|(n, pos)| resample(*n, pos, &mut rng))
                .collect();
            statistic(&resampled)
        })
        .collect();
    let skipped = reps.iter().filter(|r| r.is_none()).count();
    (reps, skipped)
}

/// Resamples `n` records with replacement from a stratum whose drawn
/// positives are `positives`. The number of resampled positives is
/// Binomial(n, |positives|/n) and, given that count, the positives are drawn
/// uniformly with replacement, which matches record-level resampling exactly
/// at a cost proportional to the positives only.
fn resample<R: Rng>(n: usize, positives: &[f64], rng: &mut R) -> StratumResample {
    let mut out = StratumResample {
        drawn: n,
        ..Default::default()
    };
    let k = positives.len();
    if k == 0 {
        return out;
    }
    out.positives = if k == n {
        n
    } else {
        Binomial::new(n as u64, k as f64 / n as f64)
            .expect("valid binomial")
            .sample(rng) as usize
    };
    for _ in 0..out.positives {
        out.positive_sum += positives[rng.random_range(0..k)];
    }
    out
}

/// Percentile bootstrap interval for the combined mean.
pub fn bootstrap_ci(
    per_stratum: &[Vec<(f64, bool)>],
    cfg: &BootstrapConfig,
) -> Result<BootstrapCi> {
    bootstrap_ci_with(per_stratum, cfg, combined_mean)
}

/// Percentile bootstrap interval for an arbitrary statistic of the resampled
/// strata.
pub fn bootstrap_ci_with<F>(
    per_stratum: &[Vec<(f64, bool)>],
    cfg: &BootstrapConfig,
    statistic: F,
) -> Result<BootstrapCi>
where
    F: Fn(&[StratumResample]) -> Option<f64> + Sync,
{
    cfg.validate()?;
    if per_stratum.iter().all(Vec::is_empty) {
        return Err(AbaeError::EmptyInput("no drawn samples to resample"));
    }
    let (reps, skipped) = bootstrap_replicates(per_stratum, cfg.trials, cfg.seed, statistic);
    let mut values: Vec<f64> = reps.into_iter().flatten().collect();
    if values.is_empty() {
        return Err(AbaeError::NoPositiveSamples);
    }
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        low: percentile(&values, cfg.alpha / 2.0),
        high: percentile(&values, 1.0 - cfg.alpha / 2.0),
        trials: cfg.trials,
        skipped,
        degenerate: 2 * skipped > cfg.trials,
    })
}

/// Linear interpolation between order statistics ("type 7"). `sorted` must be
/// ascending and non-empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of an empty sample");
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn cfg(trials: usize, alpha: f64) -> BootstrapConfig {
        BootstrapConfig {
            trials,
            alpha,
            seed: 7,
        }
    }

    #[test]
    fn percentile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert!((percentile(&v, 0.5) - 2.5).abs() < 1e-12);
        assert!((percentile(&v, 0.25) - 1.75).abs() < 1e-12);
        assert_eq!(percentile(&[3.0], 0.9), 3.0);
    }

    #[test]
    fn constant_matches_give_point_interval() {
        let s = vec![vec![(2.5, true); 30], vec![(2.5, true); 10]];
        let ci = bootstrap_ci(&s, &cfg(200, 0.05)).unwrap();
        assert_eq!((ci.low, ci.high), (2.5, 2.5));
        assert_eq!(ci.skipped, 0);
    }

    #[test]
    fn normal_mean_interval_matches_analytic() {
        let mut rng = stream(2);
        let xs: Vec<(f64, bool)> = (0..1000)
            .map(|_| (StandardNormal.sample(&mut rng), true))
            .collect();
        let mean = xs.iter().map(|x| x.0).sum::<f64>() / 1000.0;
        let ci = bootstrap_ci(&[xs], &cfg(1000, 0.05)).unwrap();
        let half = 1.96 / 1000f64.sqrt();
        assert!(((ci.low - mean) + half).abs() < 0.2 * half, "{ci:?}");
        assert!(((ci.high - mean) - half).abs() < 0.2 * half, "{ci:?}");
    }

    #[test]
    fn empty_input_is_error() {
        assert!(bootstrap_ci(&[vec![], vec![]], &cfg(10, 0.05)).is_err());
        assert!(bootstrap_ci(&[], &cfg(10, 0.05)).is_err());
        assert!(bootstrap_ci(&[vec![(1.0, true)]], &cfg(0, 0.05)).is_err());
        assert!(bootstrap_ci(&[vec![(1.0, true)]], &cfg(10, 1.0)).is_err());
    }

    #[test]
    fn sparse_positives_are_skipped_and_flagged() {
        let mut s = vec![(0.0, false); 99];
        s.push((1.0, true));
        let ci = bootstrap_ci(&[s], &cfg(500, 0.05)).unwrap();
        // P(no positive in a resample) = 0.99^100 ~ 0.37.
        assert!(ci.skipped > 100 && ci.skipped < 270, "{}", ci.skipped);
        assert!(!ci.degenerate);
        let mut s = vec![(0.0, false); 999];
        s.push((1.0, true));
        let ci = bootstrap_ci(&[s.clone(), s], &cfg(200, 0.05)).unwrap();
        // Two strata: 0.999^2000 ~ 0.135 skipped; not degenerate.
        assert!(!ci.degenerate);
        // A single positive can never empty more than ~37% of resamples, so
        // exercise the flag through a statistic that is mostly undefined.
        let s = vec![vec![(1.0, true), (2.0, true)]];
        let ci = bootstrap_ci_with(&s, &cfg(200, 0.05), |r| {
            (r[0].positive_sum > 3.5).then_some(1.0)
        })
        .unwrap();
        assert!(ci.degenerate, "{ci:?}");
    }

    #[test]
    fn resample_sizes_are_preserved() {
        let s = vec![vec![(1.0, true); 7], vec![(0.0, false); 3], vec![]];
        let (reps, _) = bootstrap_replicates(&s, 20, 3, |r| {
            assert_eq!(r.iter().map(|x| x.drawn).collect::<Vec<_>>(), vec![7, 3, 0]);
            combined_mean(r)
        });
        assert_eq!(reps.len(), 20);
    }

    #[test]
    fn narrower_level_nests_inside_wider() {
        let mut rng = stream(5);
        let s: Vec<Vec<(f64, bool)>> = (0..3)
            .map(|_| {
                (0..200)
                    .map(|_| (StandardNormal.sample(&mut rng), rng.random_bool(0.3)))
                    .collect()
            })
            .collect();
        let wide = bootstrap_ci(&s, &cfg(500, 0.05)).unwrap();
        let narrow = bootstrap_ci(&s, &cfg(500, 0.5)).unwrap();
        assert!(wide.low <= narrow.low && narrow.high <= wide.high);
        assert!(wide.low <= wide.high);
    }

    #[test]
    fn replicates_are_deterministic() {
        let s = vec![vec![(1.0, true), (2.0, false), (3.0, true)]];
        let a = bootstrap_replicates(&s, 50, 1, combined_mean).0;
        let b = bootstrap_replicates(&s, 50, 1, combined_mean).0;
        assert_eq!(a, b);
    }
}
