use faithcore::metrics::{
    aopc, baseline_gap, diagnosticity, midranks, normalized_comprehensiveness, normalized_sufficiency,
    rank_sum_test, soft_nc_with, soft_ns_with, LikelihoodTriple, Outcome, SoftAggregate, DEGENERATE_GAP,
};
use faithcore::numerics::{bernoulli_mask, rng_for, Matrix};
use faithcore::perturbation::{soft_perturb, SoftMode, SoftPerturbConfig};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

fn in_unit(o: Outcome) -> bool {
    o.value().is_none_or(|v| (0.0..=1.0).contains(&v))
}

proptest! {
    #[test]
    fn hard_metrics_stay_in_unit_interval(pf in unit(), pp in unit(), pz in unit()) {
        let t = LikelihoodTriple::new(pf, pp, pz).unwrap();
        let (ns, nc) = (normalized_sufficiency(&t), normalized_comprehensiveness(&t));
        prop_assert!(in_unit(ns) && in_unit(nc));
        let excluded = pf - pz <= DEGENERATE_GAP;
        prop_assert_eq!(ns.value().is_none(), excluded);
        prop_assert_eq!(nc.value().is_none(), excluded);
        prop_assert_eq!(baseline_gap(pf, pz).is_none(), excluded);
    }

    #[test]
    fn sufficiency_rises_and_comprehensiveness_falls_with_the_perturbed_probability(
        pf in unit(), pz in unit(), a in unit(), b in unit(),
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let at = |pp| LikelihoodTriple::new(pf, pp, pz).unwrap();
        if let (Some(n_lo), Some(n_hi)) = (normalized_sufficiency(&at(lo)).value(), normalized_sufficiency(&at(hi)).value()) {
            prop_assert!(n_lo <= n_hi + 1e-12);
        }
        if let (Some(c_lo), Some(c_hi)) = (normalized_comprehensiveness(&at(lo)).value(), normalized_comprehensiveness(&at(hi)).value()) {
            prop_assert!(c_lo + 1e-12 >= c_hi);
        }
    }

    #[test]
    fn soft_metrics_stay_in_unit_interval(
        pf in unit(), pz in unit(), probs in prop::collection::vec(unit(), 1..32),
    ) {
        for agg in [SoftAggregate::MeanProbability, SoftAggregate::MeanMetric] {
            prop_assert!(in_unit(soft_ns_with(pf, &probs, pz, agg).unwrap()));
            prop_assert!(in_unit(soft_nc_with(pf, &probs, pz, agg).unwrap()));
        }
    }

    #[test]
    fn aopc_lies_between_its_extremes(values in prop::collection::vec(unit(), 1..8)) {
        let opt: Vec<_> = values.iter().map(|&v| Some(v)).collect();
        let a = aopc(&opt, values.len()).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn diagnosticity_counts_are_consistent(pairs in prop::collection::vec((unit(), unit()), 1..50)) {
        let d = diagnosticity(&pairs, 0.0).unwrap();
        prop_assert_eq!(d.pairs, pairs.len());
        prop_assert!(d.wins + d.ties <= d.pairs);
        prop_assert!((d.value - d.wins as f64 / d.pairs as f64).abs() < 1e-15);
        let swapped: Vec<_> = pairs.iter().map(|&(u, v)| (v, u)).collect();
        let s = diagnosticity(&swapped, 0.0).unwrap();
        prop_assert_eq!(d.wins + s.wins + d.ties, d.pairs);
    }

    #[test]
    fn rank_sum_is_a_symmetric_probability(
        a in prop::collection::vec(-3f64..3.0, 1..40),
        b in prop::collection::vec(-3f64..3.0, 1..40),
    ) {
        let p = rank_sum_test(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p - rank_sum_test(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn midranks_sum_to_the_triangular_number(v in prop::collection::vec(0u8..6, 1..40)) {
        let values: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let n = values.len() as f64;
        let total: f64 = midranks(&values).iter().sum();
        prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn masks_are_reproducible_and_respect_extremes(seed in any::<u64>(), n in 1usize..200) {
        let s = rng_for(seed, &[5]);
        prop_assert_eq!(bernoulli_mask(&s, 0.37, n).unwrap(), bernoulli_mask(&s, 0.37, n).unwrap());
        prop_assert_eq!(bernoulli_mask(&s, 0.0, n).unwrap().ones(), 0);
        prop_assert_eq!(bernoulli_mask(&s, 1.0, n).unwrap().ones(), n);
    }

    #[test]
    fn soft_perturbation_is_deterministic_and_only_zeroes_entries(
        seed in any::<u64>(),
        a in prop::collection::vec(unit(), 1..10),
    ) {
        let x = Matrix::from_fn(a.len(), 4, |r, c| (r * 4 + c) as f64 + 1.0);
        for mode in [SoftMode::Retain, SoftMode::Remove] {
            let cfg = SoftPerturbConfig { mode, samples: 6, rng: rng_for(seed, &[1]) };
            let first = soft_perturb(&x, &a, &cfg).unwrap();
            prop_assert_eq!(&first, &soft_perturb(&x, &a, &cfg).unwrap());
            for xp in &first {
                prop_assert_eq!(xp.shape(), x.shape());
                for r in 0..x.rows() {
                    for c in 0..4 {
                        prop_assert!(xp.get(r, c) == x.get(r, c) || xp.get(r, c) == 0.0);
                    }
                }
            }
            let ones = vec![1.0; a.len()];
            let cfg = SoftPerturbConfig { mode: SoftMode::Retain, samples: 3, rng: rng_for(seed, &[2]) };
            for xp in soft_perturb(&x, &ones, &cfg).unwrap() {
                prop_assert_eq!(&xp, &x);
            }
        }
    }
}
