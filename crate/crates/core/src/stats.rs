//! Exact Wilcoxon rank-sum test for small independent samples.
//!
//! The null distribution of the first group's rank sum is built by counting
//! every way of choosing which `n` of the `n + m` pooled ranks belong to the
//! first group. Tied values share their mid-rank, so the enumeration runs over
//! the observed rank multiset. Ranks are kept doubled, which makes every
//! mid-rank and every rank sum an integer and the p-value an exact ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest group size for which the exact distribution is computed.
pub const MAX_GROUP: usize = 12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// First group tends to be smaller.
    Less,
    /// First group tends to be larger.
    Greater,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSumTest {
    /// Rank sum of the first group.
    pub statistic: f64,
    /// Its mean under the null hypothesis.
    pub expected: f64,
    pub p_value: f64,
    /// Number of equally likely group assignments, C(n + m, n).
    pub assignments: u64,
    pub ties: bool,
    pub alternative: Alternative,
}

/// Doubled mid-ranks of the pooled sample, in input order.
fn doubled_ranks(pooled: &[f64]) -> (Vec<u64>, bool) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0; pooled.len()];
    let mut ties = false;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && pooled[order[end + 1]] == pooled[order[start]] {
            end += 1;
        }
        ties |= end > start;
        // positions start..=end hold 1-based ranks start+1..=end+1
        for &k in &order[start..=end] {
            ranks[k] = (start + end + 2) as u64;
        }
        start = end + 1;
    }
    (ranks, ties)
}

/// `counts[s]` = number of size-`n` subsets of `ranks` whose sum is `s`.
fn subset_sum_counts(ranks: &[u64], n: usize) -> Vec<u64> {
    let max_sum = ranks.iter().sum::<u64>() as usize;
    let mut table = vec![vec![0u64; max_sum + 1]; n + 1];
    table[0][0] = 1;
    for (seen, &r) in ranks.iter().enumerate() {
        let r = r as usize;
        for k in (1..=n.min(seen + 1)).rev() {
            let (lower, upper) = table.split_at_mut(k);
            let (from, to) = (&lower[k - 1], &mut upper[0]);
            for s in (r..=max_sum).rev() {
                to[s] += from[s - r];
            }
        }
    }
    table.swap_remove(n)
}

pub fn rank_sum_test(a: &[f64], b: &[f64], alternative: Alternative) -> Result<RankSumTest> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Invalid("rank-sum test needs at least one score per group".into()));
    }
    if n > MAX_GROUP || m > MAX_GROUP {
        return Err(Error::EnumerationBound { n, m, max: MAX_GROUP });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("rank-sum scores must be finite".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let observed: u64 = ranks[..n].iter().sum();
    let centre = (n * (n + m + 1)) as u64;
    let counts = subset_sum_counts(&ranks, n);
    let assignments: u64 = counts.iter().sum();
    let extreme = |s: u64| match alternative {
        Alternative::TwoSided => s.abs_diff(centre) >= observed.abs_diff(centre),
        Alternative::Less => s <= observed,
        Alternative::Greater => s >= observed,
    };
    let hits: u64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| extreme(*s as u64))
        .map(|(_, c)| c)
        .sum();
    Ok(RankSumTest {
        statistic: observed as f64 / 2.0,
        expected: centre as f64 / 2.0,
        p_value: hits as f64 / assignments as f64,
        assignments,
        ties,
        alternative,
    })
}

/// Two-sided exact p-value.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(rank_sum_test(a, b, Alternative::TwoSided)?.p_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Literal enumeration over index subsets with textbook mid-ranks.
    fn brute_force(a: &[f64], b: &[f64], alternative: Alternative) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let total = pooled.len();
        let rank = |v: f64| {
            let below = pooled.iter().filter(|&&x| x < v).count() as f64;
            let equal = pooled.iter().filter(|&&x| x == v).count() as f64;
            below + (equal + 1.0) / 2.0
        };
        let ranks: Vec<f64> = pooled.iter().map(|&v| rank(v)).collect();
        let observed: f64 = ranks[..a.len()].iter().sum();
        let centre = a.len() as f64 * (total as f64 + 1.0) / 2.0;
        let (mut hits, mut all) = (0u64, 0u64);
        for bits in 0u32..(1 << total) {
            if bits.count_ones() as usize != a.len() {
                continue;
            }
            let s: f64 = (0..total).filter(|k| bits >> k & 1 == 1).map(|k| ranks[k]).sum();
            all += 1;
            let extreme = match alternative {
                Alternative::TwoSided => (s - centre).abs() >= (observed - centre).abs() - 1e-9,
                Alternative::Less => s <= observed + 1e-9,
                Alternative::Greater => s >= observed - 1e-9,
            };
            hits += extreme as u64;
        }
        hits as f64 / all as f64
    }

    fn range(from: i32, to: i32, step: usize) -> Vec<f64> {
        (from..=to).step_by(step).map(f64::from).collect()
    }

    #[test]
    fn complete_separation() {
        let (a, b) = (range(1, 5, 1), range(6, 10, 1));
        assert!((wilcoxon_rank_sum(&a, &b).unwrap() - 2.0 / 252.0).abs() < 1e-12);
        assert!((wilcoxon_rank_sum(&b, &a).unwrap() - 2.0 / 252.0).abs() < 1e-12);
        let t = rank_sum_test(&a, &b, Alternative::Less).unwrap();
        assert_eq!((t.statistic, t.expected, t.assignments), (15.0, 27.5, 252));
        assert!((t.p_value - 1.0 / 252.0).abs() < 1e-15);
    }

    #[test]
    fn one_swap_from_separation_gives_twelve_of_252() {
        let a = [1.0, 2.0, 3.0, 4.0, 9.0];
        let b = [5.0, 6.0, 7.0, 8.0, 10.0];
        let t = rank_sum_test(&a, &b, Alternative::Less).unwrap();
        assert_eq!(t.statistic, 19.0);
        assert!((t.p_value - 12.0 / 252.0).abs() < 1e-15);
    }

    #[test]
    fn interleaved_groups_are_not_significant() {
        let (a, b) = (range(1, 9, 2), range(2, 10, 2));
        let p = wilcoxon_rank_sum(&a, &b).unwrap();
        // rank sum 25 against a null mean of 27.5: 78 of 252 splits are closer
        assert!((p - 174.0 / 252.0).abs() < 1e-15);
        assert_eq!(p, brute_force(&a, &b, Alternative::TwoSided));
        assert_eq!(wilcoxon_rank_sum(&[1.0, 4.0], &[2.0, 3.0]).unwrap(), 1.0);
    }

    #[test]
    fn single_scores() {
        assert_eq!(wilcoxon_rank_sum(&[1.0], &[2.0]).unwrap(), 1.0);
        assert_eq!(rank_sum_test(&[1.0], &[2.0], Alternative::Less).unwrap().p_value, 0.5);
    }

    #[test]
    fn ties_use_mid_ranks() {
        let (a, b) = ([1.0, 1.0, 2.0, 5.0], [2.0, 3.0, 3.0]);
        let t = rank_sum_test(&a, &b, Alternative::TwoSided).unwrap();
        assert!(t.ties);
        assert_eq!(t.statistic, 1.5 + 1.5 + 3.5 + 7.0);
        for alt in [Alternative::TwoSided, Alternative::Less, Alternative::Greater] {
            let got = rank_sum_test(&a, &b, alt).unwrap().p_value;
            assert!((got - brute_force(&a, &b, alt)).abs() < 1e-12);
        }
        assert_eq!(wilcoxon_rank_sum(&[4.0; 3], &[4.0; 2]).unwrap(), 1.0);
    }

    #[test]
    fn group_size_limits() {
        assert!(matches!(wilcoxon_rank_sum(&[0.0; 13], &[1.0; 3]), Err(Error::EnumerationBound { .. })));
        assert!(wilcoxon_rank_sum(&[], &[1.0]).is_err());
        assert!(wilcoxon_rank_sum(&[f64::NAN], &[1.0]).is_err());
        let t = rank_sum_test(&range(1, 12, 1), &range(13, 24, 1), Alternative::TwoSided).unwrap();
        assert_eq!(t.assignments, 2_704_156);
        assert!((t.p_value - 2.0 / 2_704_156.0).abs() < 1e-18);
    }

    fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec((0u8..12).prop_map(f64::from), 1..=max)
    }

    proptest! {
        #[test]
        fn matches_literal_enumeration(a in scores(6), b in scores(6)) {
            for alt in [Alternative::TwoSided, Alternative::Less, Alternative::Greater] {
                let got = rank_sum_test(&a, &b, alt).unwrap().p_value;
                prop_assert!((got - brute_force(&a, &b, alt)).abs() < 1e-12);
            }
        }

        #[test]
        fn two_sided_is_symmetric(a in scores(MAX_GROUP), b in scores(MAX_GROUP)) {
            let p = wilcoxon_rank_sum(&a, &b).unwrap();
            prop_assert_eq!(p, wilcoxon_rank_sum(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn tie_free_p_is_a_multiple_of_one_assignment(
            (n, pooled) in (1usize..=8, 1usize..=8).prop_flat_map(|(n, m)| {
                (Just(n), Just((0..n + m).map(|v| v as f64).collect::<Vec<_>>()).prop_shuffle())
            })
        ) {
            let t = rank_sum_test(&pooled[..n], &pooled[n..], Alternative::TwoSided).unwrap();
            let k = t.p_value * t.assignments as f64;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!(!t.ties);
        }
    }
}
