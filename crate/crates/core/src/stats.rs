//! Mann–Whitney U test with rank-biserial effect size.
//!
//! `U` counts pairs `(a, b)` with `a > b`, ties counting one half. The
//! rank-biserial correlation is `1 − 2U/(n₁n₂)`. Two-sided p-values are exact
//! (permutation distribution of the mid-rank sum) when `n₁n₂ ≤ 400`, and
//! otherwise come from the tie-corrected normal approximation with
//! continuity correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{data_err, Result};

/// Largest `n₁n₂` handled by exact enumeration.
pub const EXACT_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    pub u: f64,
    pub rbc: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / core::f64::consts::SQRT_2)
}

pub fn normal_cdf(z: f64) -> f64 {
    normal_sf(-z)
}

/// Doubled mid-ranks (integers) of the pooled sample and the tie-group sizes.
fn doubled_midranks(pooled: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let n = pooled.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share rank ((i+1)+(j+1))/2.
        let r2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Number of size-`k` subsets of `values` per subset sum.
fn subset_sum_counts(values: &[u64], k: usize) -> Vec<f64> {
    let max: u64 = {
        let mut v = values.to_vec();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v.iter().take(k).sum()
    };
    let width = max as usize + 1;
    let mut dp = vec![vec![0.0f64; width]; k + 1];
    dp[0][0] = 1.0;
    for (seen, &v) in values.iter().enumerate() {
        let v = v as usize;
        for j in (1..=k.min(seen + 1)).rev() {
            let (lo, hi) = dp.split_at_mut(j);
            let (prev, cur) = (&lo[j - 1], &mut hi[0]);
            for s in (v..width).rev() {
                cur[s] += prev[s - v];
            }
        }
    }
    dp.swap_remove(k)
}

/// `U` of `a` against `b` from pooled mid-ranks, `O(n log n)`.
pub fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, _) = doubled_midranks(&pooled);
    let s2: u64 = ranks[..a.len()].iter().sum();
    s2 as f64 / 2.0 - (a.len() * (a.len() + 1)) as f64 / 2.0
}

/// Reusable tester for fixed group sizes; caches the tie-free exact null.
#[derive(Debug, Clone)]
pub struct MannWhitneyTester {
    n1: usize,
    n2: usize,
    tie_free: Option<Vec<f64>>,
}

impl MannWhitneyTester {
    pub fn new(n1: usize, n2: usize) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(data_err!("Mann-Whitney needs two non-empty groups, got {n1} and {n2}"));
        }
        let tie_free = if n1 * n2 <= EXACT_LIMIT {
            let ranks: Vec<u64> = (1..=(n1 + n2) as u64).map(|r| 2 * r).collect();
            Some(subset_sum_counts(&ranks, n1))
        } else {
            None
        };
        Ok(Self { n1, n2, tie_free })
    }

    pub fn test(&self, a: &[f64], b: &[f64]) -> Result<MannWhitney> {
        if a.len() != self.n1 || b.len() != self.n2 {
            return Err(data_err!("group sizes {}/{} differ from tester {}/{}", a.len(), b.len(), self.n1, self.n2));
        }
        if a.iter().chain(b).any(|x| !x.is_finite()) {
            return Err(data_err!("non-finite value in Mann-Whitney input"));
        }
        let (n1, n2) = (self.n1, self.n2);
        let n = n1 + n2;
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let (ranks, ties) = doubled_midranks(&pooled);
        let s2: u64 = ranks[..n1].iter().sum();
        let nn = (n1 * n2) as f64;
        let u = s2 as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0;
        let rbc = 1.0 - 2.0 * u / nn;
        if ties.len() == 1 {
            return Ok(MannWhitney { u, rbc: 0.0, p_value: 1.0, exact: n1 * n2 <= EXACT_LIMIT });
        }
        let has_ties = ties.iter().any(|&t| t > 1);
        if n1 * n2 <= EXACT_LIMIT {
            let owned;
            let counts = match (&self.tie_free, has_ties) {
                (Some(c), false) => c,
                _ => {
                    owned = subset_sum_counts(&ranks, n1);
                    &owned
                }
            };
            let total: f64 = counts.iter().sum();
            let s = s2 as usize;
            let lower: f64 = counts[..=s.min(counts.len() - 1)].iter().sum();
            let upper: f64 = counts.get(s..).map_or(0.0, |t| t.iter().sum());
            let p = (2.0 * lower.min(upper) / total).min(1.0);
            return Ok(MannWhitney { u, rbc, p_value: p, exact: true });
        }
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1)) as f64;
        let var = nn / 12.0 * ((n + 1) as f64 - tie_term);
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((u - nn / 2.0).abs() - 0.5).max(0.0) / libm::sqrt(var);
            (2.0 * normal_sf(z)).min(1.0)
        };
        Ok(MannWhitney { u, rbc, p_value: p, exact: false })
    }
}

/// One-off two-sided Mann–Whitney test of `a` against `b`.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    MannWhitneyTester::new(a.len(), b.len())?.test(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn brute_u(a: &[f64], b: &[f64]) -> f64 {
        let mut u = 0.0;
        for x in a {
            for y in b {
                if x > y {
                    u += 1.0;
                } else if x == y {
                    u += 0.5;
                }
            }
        }
        u
    }

    /// Two-sided p by enumerating every relabelling of the pooled sample.
    fn brute_p(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let (n, n1) = (pooled.len(), a.len());
        let obs = brute_u(a, b);
        let (mut le, mut ge, mut total) = (0.0, 0.0, 0.0);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let (ga, gb): (Vec<f64>, Vec<f64>) = {
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                for (i, &v) in pooled.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        ga.push(v)
                    } else {
                        gb.push(v)
                    }
                }
                (ga, gb)
            };
            let u = brute_u(&ga, &gb);
            total += 1.0;
            if u <= obs + 1e-9 {
                le += 1.0;
            }
            if u >= obs - 1e-9 {
                ge += 1.0;
            }
        }
        (2.0 * f64::min(le, ge) / total).min(1.0)
    }

    #[test]
    fn extreme_ranks() {
        let r = mann_whitney(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.rbc, 1.0);
        // Exact null of U for 2 vs 2 is uniform over 6 arrangements, one per tail.
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn identical_groups() {
        let a = [0.3, 0.1, 0.9, 0.4];
        let r = mann_whitney(&a, &a).unwrap();
        assert_eq!(r.rbc, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_voxel_is_degenerate() {
        let r = mann_whitney(&[2.0; 5], &[2.0; 7]).unwrap();
        assert_eq!((r.rbc, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn matches_enumeration_for_ten_vs_ten() {
        let mut rng = crate::Rng::seed_from_u64(11);
        for trial in 0..3 {
            let a: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 0.1 * trial as f64).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let r = mann_whitney(&a, &b).unwrap();
            assert!(r.exact);
            assert!((r.rbc - (1.0 - 2.0 * brute_u(&a, &b) / 100.0)).abs() < 1e-12);
            assert!((r.p_value - brute_p(&a, &b)).abs() < 1e-6, "{} vs {}", r.p_value, brute_p(&a, &b));
        }
    }

    #[test]
    fn exact_with_ties_matches_enumeration() {
        let a = [1.0, 2.0, 2.0, 3.0, 5.0, 5.0];
        let b = [2.0, 3.0, 3.0, 4.0, 5.0, 6.0, 6.0];
        let r = mann_whitney(&a, &b).unwrap();
        assert!((r.p_value - brute_p(&a, &b)).abs() < 1e-12);
    }

    /// Reference values of the continuity-corrected, tie-corrected normal
    /// approximation worked by hand from its defining formula.
    #[test]
    fn normal_approximation_formula() {
        let a: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| 10.0 + 2.0 * i as f64).collect();
        let r = mann_whitney(&a, &b).unwrap();
        assert!(!r.exact);
        let u = brute_u(&a, &b);
        assert_eq!(r.u, u);
        let mut pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        pooled.sort_by(f64::total_cmp);
        let mut t3 = 0.0;
        let mut i = 0;
        while i < pooled.len() {
            let t = pooled.iter().filter(|&&v| v == pooled[i]).count();
            t3 += (t * t * t - t) as f64;
            i += t;
        }
        let (n1, n2, n) = (25.0, 20.0, 45.0);
        let sigma = (n1 * n2 / 12.0 * ((n + 1.0) - t3 / (n * (n - 1.0)))).sqrt();
        let z = ((u - n1 * n2 / 2.0).abs() - 0.5) / sigma;
        let p = libm::erfc(z / 2f64.sqrt());
        assert!((r.p_value - p).abs() < 1e-14);
    }

    #[test]
    fn normal_tail_values() {
        assert!((normal_sf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
    }

    #[test]
    fn random_instances_match_pair_counting() {
        let mut rng = crate::Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n1 = rng.random_range(1..30);
            let n2 = rng.random_range(1..30);
            let a: Vec<f64> = (0..n1).map(|_| (rng.random_range(0..8) as f64) * 0.5).collect();
            let b: Vec<f64> = (0..n2).map(|_| (rng.random_range(0..8) as f64) * 0.5).collect();
            let r = mann_whitney(&a, &b).unwrap();
            let u = brute_u(&a, &b);
            assert!((r.u - u).abs() < 1e-12);
            assert!((r.rbc - (1.0 - 2.0 * u / (n1 * n2) as f64)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn swap_symmetry(a in proptest::collection::vec(-5i32..5, 1..15), b in proptest::collection::vec(-5i32..5, 1..15)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let ab = mann_whitney(&a, &b).unwrap();
            let ba = mann_whitney(&b, &a).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab.rbc));
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
            prop_assert!((ab.rbc + ba.rbc).abs() < 1e-12);
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-9);
        }
    }
}
