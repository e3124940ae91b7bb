//! Importance sampling of large bags.
//!
//! Power-law degree distributions put millions of instances into some bags.
//! Denylisted (positive) neighbors are rare and informative, so they are all
//! kept with weight 1; unknown (negative) neighbors are uniformly subsampled
//! to at most `k_minus` and reweighted by `n_minus / k_minus` so that the
//! weighted mean over the sampled bag is an unbiased estimate of the mean
//! over the full bag. The weights reconstruct the original counts exactly:
//! their sum is `n_plus + n_minus` up to rounding, which keeps the weighted
//! mean's normalizer deterministic.

use rand::Rng;

use crate::graph::{ActiveDenylist, DomainId};
use crate::seed::rng_from;

/// Sampled bag content with unbiasedness weights.
#[derive(Clone, Debug)]
pub struct WeightedInstanceSet {
    /// (neighbor, weight), sorted by neighbor id so downstream reductions
    /// have a fixed summation order.
    pub instances: Vec<(DomainId, f64)>,
    pub n_plus: usize,
    pub n_minus: usize,
}

impl WeightedInstanceSet {
    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.instances.iter().map(|&(_, w)| w).sum()
    }
}

/// Samples a bag from `neighbors`: every member of the active denylist is
/// kept with weight 1; if more than `k_minus` negatives exist, exactly
/// `k_minus` are drawn uniformly without repetition and weighted
/// `n_minus / k_minus`. Deterministic given the seed.
pub fn sample_bag(
    neighbors: &[DomainId],
    active: &ActiveDenylist,
    k_minus: usize,
    seed: u64,
) -> WeightedInstanceSet {
    assert!(k_minus >= 1, "k_minus must be at least 1");

    let mut positives: Vec<DomainId> = Vec::new();
    let mut negatives: Vec<DomainId> = Vec::new();
    for &u in neighbors {
        if active.contains(u) {
            positives.push(u);
        } else {
            negatives.push(u);
        }
    }
    let (n_plus, n_minus) = (positives.len(), negatives.len());

    let mut instances: Vec<(DomainId, f64)> = positives.into_iter().map(|d| (d, 1.0)).collect();
    if n_minus > k_minus {
        let w = n_minus as f64 / k_minus as f64;
        let mut rng = rng_from(&[seed, 0x5A17]);
        // Partial Fisher-Yates: an exact uniform k-subset in O(k_minus).
        for i in 0..k_minus {
            let j = rng.random_range(i..n_minus);
            negatives.swap(i, j);
            instances.push((negatives[i], w));
        }
    } else {
        instances.extend(negatives.into_iter().map(|d| (d, 1.0)));
    }
    instances.sort_unstable_by_key(|&(d, _)| d);

    WeightedInstanceSet {
        instances,
        n_plus,
        n_minus,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(range: std::ops::Range<u32>) -> Vec<DomainId> {
        range.map(DomainId).collect()
    }

    #[test]
    fn subsampled_negatives_are_reweighted() {
        let neighbors = ids(0..200);
        let active = ActiveDenylist::empty(200);
        let set = sample_bag(&neighbors, &active, 100, 7);
        assert_eq!(set.n_plus, 0);
        assert_eq!(set.n_minus, 200);
        assert_eq!(set.len(), 100);
        assert!(set.instances.iter().all(|&(_, w)| w == 2.0));
        // No repetition.
        let mut seen = std::collections::HashSet::new();
        assert!(set.instances.iter().all(|&(d, _)| seen.insert(d)));
    }

    #[test]
    fn small_bags_are_kept_whole() {
        let neighbors = ids(0..50);
        let active = ActiveDenylist::empty(50);
        let set = sample_bag(&neighbors, &active, 100, 7);
        assert_eq!(set.len(), 50);
        assert!(set.instances.iter().all(|&(_, w)| w == 1.0));
    }

    #[test]
    fn positives_always_survive() {
        let neighbors = ids(0..500);
        let active = ActiveDenylist::from_members(500, (0..500).step_by(37).map(DomainId));
        for seed in 0..20 {
            let set = sample_bag(&neighbors, &active, 10, seed);
            for d in (0..500).step_by(37).map(DomainId) {
                assert!(
                    set.instances.iter().any(|&(u, w)| u == d && w == 1.0),
                    "positive {d} dropped at seed {seed}"
                );
            }
            assert_eq!(set.len(), set.n_plus + 10);
        }
    }

    #[test]
    fn empty_neighborhood() {
        let active = ActiveDenylist::empty(10);
        let set = sample_bag(&[], &active, 100, 0);
        assert!(set.is_empty());
        assert_eq!(set.n_plus, 0);
        assert_eq!(set.n_minus, 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let neighbors = ids(0..1000);
        let active = ActiveDenylist::from_members(1000, [DomainId(3), DomainId(500)]);
        let a = sample_bag(&neighbors, &active, 50, 42);
        let b = sample_bag(&neighbors, &active, 50, 42);
        assert_eq!(a.instances, b.instances);
        let c = sample_bag(&neighbors, &active, 50, 43);
        assert_ne!(a.instances, c.instances);
    }

    #[test]
    fn weighted_mean_is_unbiased() {
        // Value function: phi(d) = id as f64. Compare the Monte-Carlo mean of
        // the weighted estimate against the full-bag mean.
        let n = 1000u32;
        let neighbors = ids(0..n);
        let active = ActiveDenylist::from_members(n as usize, (0..5).map(DomainId));
        let phi = |d: DomainId| d.0 as f64;
        let full_mean = neighbors.iter().map(|&d| phi(d)).sum::<f64>() / n as f64;

        let draws = 20_000;
        let mut estimates = Vec::with_capacity(draws);
        for seed in 0..draws as u64 {
            let set = sample_bag(&neighbors, &active, 100, seed);
            let est = set
                .instances
                .iter()
                .map(|&(d, w)| w * phi(d))
                .sum::<f64>()
                / set.total_weight();
            estimates.push(est);
        }
        let mc_mean = estimates.iter().sum::<f64>() / draws as f64;
        let var = estimates
            .iter()
            .map(|e| (e - mc_mean).powi(2))
            .sum::<f64>()
            / (draws as f64 - 1.0);
        let se = (var / draws as f64).sqrt();
        assert!(
            (mc_mean - full_mean).abs() <= 3.0 * se,
            "bias {} exceeds 3 se {}",
            (mc_mean - full_mean).abs(),
            se
        );
    }
}
