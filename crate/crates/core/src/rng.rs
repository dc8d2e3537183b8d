//! Seeded random streams and incremental sampling without replacement.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for sub-stream `index` of `seed`: `seed XOR splitmix64(index)`.
///
/// Trials, bootstrap streams and per-group runs all derive their seeds through
/// this rule, so results do not depend on thread scheduling.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ splitmix64(index)
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used to keep the sampling and resampling streams of one query
/// execution apart.
pub(crate) const SAMPLING_STREAM: u64 = 0x5a4d_504c;
pub(crate) const BOOTSTRAP_STREAM: u64 = 0x4253_5452;

/// Lazily materialised Fisher–Yates shuffle over positions `0..len`.
///
/// Successive calls to [`draw`](Self::draw) yield a uniformly random
/// permutation prefix, so a draw of `a` then `b` items is the same as a draw of
/// `a + b` items. Memory is proportional to the number of items drawn.
#[derive(Debug, Clone)]
pub struct PartialShuffle {
    len: usize,
    next: usize,
    displaced: HashMap<usize, usize>,
}

impl PartialShuffle {
    pub fn new(len: usize) -> Self {
        PartialShuffle {
            len,
            next: 0,
            displaced: HashMap::new(),
        }
    }

    pub fn drawn(&self) -> usize {
        self.next
    }

    pub fn remaining(&self) -> usize {
        self.len - self.next
    }

    /// Draws up to `amount` further positions (fewer if the population runs out).
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R, amount: usize) -> Vec<usize> {
        let amount = amount.min(self.remaining());
        let mut out = Vec::with_capacity(amount);
        for _ in 0..amount {
            let i = self.next;
            let j = rng.random_range(i..self.len);
            let at_j = self.displaced.get(&j).copied().unwrap_or(j);
            let at_i = self.displaced.remove(&i).unwrap_or(i);
            if j != i {
                self.displaced.insert(j, at_i);
            }
            out.push(at_j);
            self.next += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_distinct_and_exhaustive() {
        let mut rng = stream(3);
        let mut sh = PartialShuffle::new(50);
        let mut all = sh.draw(&mut rng, 20);
        all.extend(sh.draw(&mut rng, 100));
        assert_eq!(all.len(), 50);
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(sh.draw(&mut rng, 1).is_empty());
    }

    #[test]
    fn split_draw_equals_single_draw() {
        let mut a = PartialShuffle::new(1000);
        let mut b = PartialShuffle::new(1000);
        let (mut ra, mut rb) = (stream(9), stream(9));
        let mut first = a.draw(&mut ra, 37);
        first.extend(a.draw(&mut ra, 63));
        assert_eq!(first, b.draw(&mut rb, 100));
    }

    #[test]
    fn marginals_are_uniform() {
        let n = 10;
        let mut counts = vec![0usize; n];
        let mut rng = stream(1);
        for _ in 0..20_000 {
            let mut sh = PartialShuffle::new(n);
            for i in sh.draw(&mut rng, 3) {
                counts[i] += 1;
            }
        }
        // Each position is included with probability 3/10.
        for c in counts {
            assert!(
                (c as f64 - 6000.0).abs() < 4.0 * (20_000.0f64 * 0.3 * 0.7).sqrt(),
                "{c}"
            );
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_eq!(derive_seed(5, 7), derive_seed(5, 7));
    }
}
