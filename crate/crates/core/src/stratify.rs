use serde::Serialize;

use crate::data::Dataset;
use crate::error::{AbaeError, Result};

/// Partition of record ids into `K` strata of increasing proxy score.
///
/// After sorting by `(score, id)`, stratum `k` holds sorted positions
/// `[floor(k*n/K), floor((k+1)*n/K))`. Ids inside each stratum are kept in
/// ascending id order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratification {
    proxy_name: String,
    strata: Vec<Vec<usize>>,
}

impl Stratification {
    pub fn proxy_name(&self) -> &str {
        &self.proxy_name
    }

    pub fn num_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn strata(&self) -> &[Vec<usize>] {
        &self.strata
    }

    pub fn stratum(&self, k: usize) -> &[usize] {
        &self.strata[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.strata.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.strata.iter().map(Vec::len).sum()
    }

    /// Stratum index of every record id.
    pub fn membership(&self) -> Vec<usize> {
        let mut out = vec![0; self.total()];
        for (k, ids) in self.strata.iter().enumerate() {
            for &id in ids {
                out[id] = k;
            }
        }
        out
    }

    /// A single stratum holding every id.
    pub fn whole(n: usize) -> Self {
        Stratification {
            proxy_name: String::new(),
            strata: vec![(0..n).collect()],
        }
    }

    pub fn by_proxy(dataset: &Dataset, proxy: &str, k: usize) -> Result<Self> {
        stratify_by_quantile(dataset.proxy(proxy)?, k, proxy)
    }
}

/// Splits records into `k` equal-quantile strata of `scores`. Ties are broken
/// by record id.
pub fn stratify_by_quantile(scores: &[f64], k: usize, proxy_name: &str) -> Result<Stratification> {
    let n = scores.len();
    if k == 0 {
        return Err(AbaeError::config("number of strata must be at least 1"));
    }
    if k > n {
        return Err(AbaeError::config(format!(
            "{k} strata requested for {n} records"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let strata = (0..k)
        .map(|s| {
            let mut ids = order[s * n / k..(s + 1) * n / k].to_vec();
            ids.sort_unstable();
            ids
        })
        .collect();
    Ok(Stratification {
        proxy_name: proxy_name.to_owned(),
        strata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_halves() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let s = stratify_by_quantile(&scores, 2, "p").unwrap();
        assert_eq!(s.stratum(0), &[0, 1, 2, 3, 4]);
        assert_eq!(s.stratum(1), &[5, 6, 7, 8, 9]);
    }

    #[test]
    fn floor_boundaries() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(
            stratify_by_quantile(&scores, 3, "p").unwrap().sizes(),
            vec![3, 3, 4]
        );
        let flat = vec![0.5; 10];
        let s = stratify_by_quantile(&flat, 4, "p").unwrap();
        assert_eq!(s.sizes(), vec![2, 3, 2, 3]);
        assert_eq!(s.stratum(0), &[0, 1]);
        assert_eq!(s.stratum(3), &[7, 8, 9]);
    }

    #[test]
    fn rejects_bad_k() {
        assert!(stratify_by_quantile(&[0.1, 0.2], 0, "p").is_err());
        assert!(stratify_by_quantile(&[0.1, 0.2], 3, "p").is_err());
    }

    #[test]
    fn single_stratum_is_everything() {
        let s = stratify_by_quantile(&[0.9, 0.1, 0.5], 1, "p").unwrap();
        assert_eq!(s.stratum(0), &[0, 1, 2]);
        assert_eq!(
            s,
            Stratification {
                proxy_name: "p".into(),
                ..Stratification::whole(3)
            }
        );
    }

    proptest! {
        #[test]
        fn partition_invariants(scores in prop::collection::vec(0.0f64..=1.0, 1..200), k in 1usize..12) {
            let n = scores.len();
            prop_assume!(k <= n);
            let s = stratify_by_quantile(&scores, k, "p").unwrap();
            let mut all: Vec<usize> = s.strata().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for (j, size) in s.sizes().into_iter().enumerate() {
                prop_assert_eq!(size, (j + 1) * n / k - j * n / k);
            }
            for j in 1..k {
                let lo = s.stratum(j - 1).iter().map(|&i| scores[i]).fold(f64::MIN, f64::max);
                let hi = s.stratum(j).iter().map(|&i| scores[i]).fold(f64::MAX, f64::min);
                prop_assert!(lo <= hi);
            }
        }

        #[test]
        fn permutation_keeps_stratum_contents(
            scores in prop::collection::btree_set(0u32..1_000_000, 2..100),
            k in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 1e6).collect();
            prop_assume!(k <= scores.len());
            let mut perm = scores.clone();
            perm.shuffle(&mut crate::rng::stream(seed));
            let a = stratify_by_quantile(&scores, k, "p").unwrap();
            let b = stratify_by_quantile(&perm, k, "p").unwrap();
            for j in 0..k {
                let mut sa: Vec<f64> = a.stratum(j).iter().map(|&i| scores[i]).collect();
                let mut sb: Vec<f64> = b.stratum(j).iter().map(|&i| perm[i]).collect();
                sa.sort_by(f64::total_cmp);
                sb.sort_by(f64::total_cmp);
                prop_assert_eq!(sa, sb);
            }
        }
    }
}
