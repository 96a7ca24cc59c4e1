
use crate::error::{Error, Result};

/// Both samples at or below this size use exact enumeration.
pub const EXACT_LIMIT: usize = 10;

const TIE_EPS: f64 = 1e-9;

/// Mid-ranks (1-based) of `values`, ties sharing the average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Two-sided Wilcoxon rank-sum p-value.
///
/// Exact when both samples have at most ten values (every split of the pooled
/// mid-ranks is enumerated); otherwise the tie-corrected normal approximation
/// with a continuity correction of 0.5.
pub fn rank_sum_test(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Parameter("rank-sum test needs two non-empty samples".into()));
    }
    if sample_a.iter().chain(sample_b).any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("rank-sum sample contains a non-finite value".into()));
    }
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    if pooled.iter().all(|&v| v == pooled[0]) {
        return Ok(1.0);
    }
    let ranks = midranks(&pooled);
    let n1 = sample_a.len();
    let n2 = sample_b.len();
    let observed: f64 = ranks[..n1].iter().sum();
    let expected = n1 as f64 * (n1 + n2 + 1) as f64 / 2.0;
    if n1 <= EXACT_LIMIT && n2 <= EXACT_LIMIT {
        Ok(exact_p(&ranks, n1, (observed - expected).abs(), expected))
    } else {
        Ok(normal_p(&pooled, n1, n2, observed))
    }
}

fn exact_p(ranks: &[f64], n1: usize, observed_dev: f64, expected: f64) -> f64 {
    let mut extreme = 0u64;
    let mut total = 0u64;
    let mut visit = |sum: f64| {
        total += 1;
        if (sum - expected).abs() >= observed_dev - TIE_EPS {
            extreme += 1;
        }
    };
    enumerate(ranks, 0, n1, 0.0, &mut visit);
    extreme as f64 / total as f64
}

fn enumerate(ranks: &[f64], from: usize, remaining: usize, sum: f64, visit: &mut impl FnMut(f64)) {
    if remaining == 0 {
        visit(sum);
        return;
    }
    for i in from..=ranks.len() - remaining {
        enumerate(ranks, i + 1, remaining - 1, sum + ranks[i], visit);
    }
}

fn normal_p(pooled: &[f64], n1: usize, n2: usize, rank_sum_a: f64) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let n = n1f + n2f;
    let u = rank_sum_a - n1f * (n1f + 1.0) / 2.0;
    let mean = n1f * n2f / 2.0;
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n1f * n2f / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    // two-sided normal tail: 2 * (1 - Phi(z)) = erfc(z / sqrt 2)
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;
    use rand::Rng;

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(midranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn exact_examples() {
        assert_eq!(rank_sum_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        // C(6,3) = 20 splits, only {1,2,3} and {4,5,6} are as extreme
        let p = rank_sum_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((p - 0.1).abs() < 1e-15);
        assert_eq!(rank_sum_test(&[2.0, 2.0], &[2.0]).unwrap(), 1.0);
    }

    #[test]
    fn exact_with_ties_matches_brute_force() {
        let a = [1.0, 2.0, 2.0, 5.0];
        let b = [2.0, 3.0, 5.0, 6.0, 7.0];
        let p = rank_sum_test(&a, &b).unwrap();
        // brute force over bitmasks of the 9 pooled positions
        let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        let r = midranks(&pooled);
        let exp = 4.0 * 10.0 / 2.0;
        let obs: f64 = r[..4].iter().sum::<f64>() - exp;
        let (mut hit, mut all) = (0, 0);
        for bits in 0u32..(1 << 9) {
            if bits.count_ones() != 4 {
                continue;
            }
            all += 1;
            let s: f64 = (0..9).filter(|i| bits & (1 << i) != 0).map(|i| r[i]).sum();
            if (s - exp).abs() >= obs.abs() - 1e-9 {
                hit += 1;
            }
        }
        assert_eq!(all, 126);
        assert!((p - hit as f64 / all as f64).abs() < 1e-15);
    }

    #[test]
    fn normal_approximation_reference() {
        // separated samples of 12: U = 0, mean 72, var 12*12*25/12 = 300
        let a: Vec<f64> = (0..12).map(f64::from).collect();
        let b: Vec<f64> = (12..24).map(f64::from).collect();
        let p = rank_sum_test(&a, &b).unwrap();
        let z: f64 = (72.0 - 0.5) / 300f64.sqrt();
        let expected = libm::erfc(z / std::f64::consts::SQRT_2);
        assert!((p - expected).abs() < 1e-14);
        assert!(p < 1e-4);
    }

    #[test]
    fn erfc_matches_tabulated_values() {
        for (x, want) in [
            (0.5, 0.479_500_122_186_953_462_3),
            (1.0, 0.157_299_207_050_285_130_7),
            (2.0, 0.004_677_734_981_047_265_838),
        ] {
            let got = libm::erfc(x);
            assert!(((got - want) / want).abs() < 1e-15, "erfc({x}) = {got}");
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(rank_sum_test(&[], &[1.0]), Err(Error::Parameter(_))));
        assert!(matches!(
            rank_sum_test(&[f64::NAN], &[1.0]),
            Err(Error::NumericInput(_))
        ));
    }

    #[test]
    fn null_calibration() {
        let mut rejections = 0;
        for seed in 0..100 {
            let mut g = rng_for(seed, &[77]).generator();
            let a: Vec<f64> = (0..50).map(|_| g.random::<f64>()).collect();
            let b: Vec<f64> = (0..50).map(|_| g.random::<f64>()).collect();
            if rank_sum_test(&a, &b).unwrap() <= 0.01 {
                rejections += 1;
            }
        }
        assert!(rejections <= 5, "{rejections} rejections");
    }
}
