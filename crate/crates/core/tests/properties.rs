//! Invariants of the model, distribution, synthesis and periodic layers.

use fairshield::distribution::{build_theta, AcceptanceRates, InputDistribution, ThetaKind};
use fairshield::model::{
    bias, statistic, trace_cost, update_counters, welfare, within, CounterVector, Decision, FairnessSpec, Group,
    InputEvent, Property, StepRecord,
};
use fairshield::oracle::{
    balanced_probability, counterexample_family, counterexample_static_fair, feasible_sequence, mediant_check,
    tightness_family_even, tightness_family_odd, CounterexamplePair,
};
use fairshield::periodic::{min_balance, WelfareBounds};
use fairshield::synthesis::{synthesize, TerminalRule};
use proptest::prelude::*;

fn group() -> impl Strategy<Value = Group> {
    prop_oneof![Just(Group::A), Just(Group::B)]
}

fn decision() -> impl Strategy<Value = Decision> {
    prop_oneof![Just(Decision::Reject), Just(Decision::Accept)]
}

fn step() -> impl Strategy<Value = StepRecord> {
    (group(), decision(), decision(), 0.0f64..10.0, any::<bool>()).prop_map(|(g, r, y, c, z)| StepRecord {
        input: InputEvent::new(g, r, c),
        final_decision: y,
        ground_truth: Some(z),
    })
}

fn property() -> impl Strategy<Value = Property> {
    prop_oneof![Just(Property::DemographicParity), Just(Property::EqualOpportunity)]
}

fn counters() -> impl Strategy<Value = CounterVector> {
    (0u32..60, 0u32..60)
        .prop_flat_map(|(na, nb)| (Just(na), 0..=na, Just(nb), 0..=nb))
        .prop_map(|(na, na1, nb, nb1)| CounterVector::dp(na, na1, nb, nb1))
}

/// Counts taken straight from the trace, without the fold.
fn direct_counters(property: Property, trace: &[StepRecord]) -> CounterVector {
    let counted = |g: Group, accepted: bool| {
        trace
            .iter()
            .filter(|s| s.input.group == g)
            .filter(|s| property == Property::DemographicParity || s.ground_truth == Some(true))
            .filter(|s| !accepted || s.final_decision.is_accept())
            .count() as u32
    };
    CounterVector {
        n_a: counted(Group::A, false),
        n_a1: counted(Group::A, true),
        n_b: counted(Group::B, false),
        n_b1: counted(Group::B, true),
        stage: match property {
            Property::DemographicParity => 0,
            Property::EqualOpportunity => trace.len() as u32,
        },
    }
}

fn normalized(c: CounterVector, property: Property) -> CounterVector {
    match property {
        Property::DemographicParity => CounterVector { stage: 0, ..c },
        Property::EqualOpportunity => c,
    }
}

fn replay(pair: &CounterexamplePair) -> (f64, f64, f64) {
    let period = |c: [u32; 4]| {
        let mut steps = Vec::new();
        for (g, n, n1) in [(Group::A, c[0], c[1]), (Group::B, c[2], c[3])] {
            for i in 0..n {
                let y = Decision::from_bool(i < n1);
                steps.push((g, y));
            }
        }
        steps
    };
    let fold = |from: CounterVector, steps: &[(Group, Decision)]| {
        steps.iter().fold(from, |c, &(g, y)| {
            update_counters(Property::DemographicParity, &c, &InputEvent::new(g, y, 1.0), y, None).unwrap()
        })
    };
    let first = fold(CounterVector::ZERO, &period(pair.first));
    let second = fold(CounterVector::ZERO, &period(pair.second));
    let both = fold(first, &period(pair.second));
    (bias(&first), bias(&second), bias(&both))
}

proptest! {
    #[test]
    fn bias_is_bounded(c in counters()) {
        let b = bias(&c);
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn equal_ratios_are_unbiased(p in 0u32..20, q in 1u32..20, ka in 1u32..6, kb in 1u32..6) {
        let p = p.min(q);
        let c = CounterVector::dp(ka * q, ka * p, kb * q, kb * p);
        prop_assert_eq!(bias(&c), 0.0);
    }

    #[test]
    fn statistic_matches_direct_count(prop in property(), trace in prop::collection::vec(step(), 0..40)) {
        let folded = statistic(prop, &trace).unwrap();
        prop_assert!(folded.is_valid(prop));
        prop_assert_eq!(normalized(folded, prop), normalized(direct_counters(prop, &trace), prop));
    }

    #[test]
    fn trace_cost_is_additive(a in prop::collection::vec(step(), 0..20), b in prop::collection::vec(step(), 0..20)) {
        let mut joined = a.clone();
        joined.extend_from_slice(&b);
        let lhs = trace_cost(&joined, None);
        let rhs = trace_cost(&a, None) + trace_cost(&b, None);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        prop_assert_eq!(trace_cost(&[], None), 0.0);
        prop_assert!((trace_cost(&joined, Some(a.len())) - trace_cost(&a, None)).abs() <= 1e-12 * (1.0 + lhs));
    }

    #[test]
    fn permutation_invariance(
        prop in property(),
        (trace, shuffled) in prop::collection::vec(step(), 0..30)
            .prop_flat_map(|t| (Just(t.clone()), Just(t).prop_shuffle()))
    ) {
        let c1 = statistic(prop, &trace).unwrap();
        let c2 = statistic(prop, &shuffled).unwrap();
        prop_assert_eq!(bias(&c1), bias(&c2));
        let (k1, k2) = (trace_cost(&trace, None), trace_cost(&shuffled, None));
        prop_assert!((k1 - k2).abs() <= 1e-9 * (1.0 + k1));
    }

    #[test]
    fn mediant(pairs in prop::collection::vec((1e-3f64..1e3, 1e-3f64..1e3), 1..12)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(mediant_check(&a, &b).unwrap());
    }

    #[test]
    fn welfare_composes(
        (l, u) in (0.0f64..0.9).prop_flat_map(|l| (Just(l), (l + 0.05)..=1.0)),
        raw in prop::collection::vec((1u32..40, 0.0f64..=1.0), 1..8),
    ) {
        // each period: n members, accepted count chosen inside [l n, u n]
        let mut total = CounterVector::ZERO;
        let mut used = 0;
        for (n, t) in raw {
            let lo = (l * n as f64).ceil() as u32;
            let hi = (u * n as f64).floor() as u32;
            if lo > hi {
                continue;
            }
            let k = lo + ((hi - lo) as f64 * t).round() as u32;
            let period = CounterVector::dp(n, k, 0, 0);
            let w = welfare(Group::A, &period).unwrap();
            prop_assert!(within(l, w) && within(w, u));
            total = total.merged(&period);
            used += 1;
        }
        if used > 0 {
            let w = welfare(Group::A, &total).unwrap();
            prop_assert!(within(l, w) && within(w, u), "{w} outside [{l}, {u}]");
        }
    }

    #[test]
    fn bounded_welfare_implies_fairness(c in counters(), l in 0.0f64..1.0, width in 0.0f64..0.5) {
        let u = (l + width).min(1.0);
        let inside = |g| welfare(g, &c).is_some_and(|w| within(l, w) && within(w, u));
        if inside(Group::A) && inside(Group::B) {
            prop_assert!(within(bias(&c), u - l));
        }
    }

    #[test]
    fn builder_marginals(
        kind in prop_oneof![Just(ThetaKind::Constant), Just(ThetaKind::ConstantK), Just(ThetaKind::Hybrid), Just(ThetaKind::HybridK)],
        p_a in 0.01f64..0.99,
        ra in 0.01f64..0.99,
        rb in 0.01f64..0.99,
        costs in prop::collection::btree_set(1u32..50, 1..5),
    ) {
        let costs: Vec<f64> = costs.into_iter().map(|c| c as f64 / 4.0).collect();
        let theta = build_theta(kind, p_a, Some(AcceptanceRates { a: ra, b: rb }), Some(&costs)).unwrap();
        let sum: f64 = theta.probabilities().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!((theta.group_mass(Group::A) - p_a).abs() <= 1e-12);
        prop_assert!((theta.group_mass(Group::B) - (1.0 - p_a)).abs() <= 1e-12);
    }

    #[test]
    fn static_fair_equal_denominators(
        half in 1u32..30,
        periods in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..6),
        kappa in 0.01f64..0.5,
    ) {
        // periods with den_a = den_b = half and bias <= kappa
        let mut total = CounterVector::ZERO;
        for (x, dy) in periods {
            let a1 = (x * half as f64).round() as u32;
            let span = (kappa * half as f64).floor() as u32;
            let lo = a1.saturating_sub(span);
            let hi = (a1 + span).min(half);
            let b1 = lo + ((hi - lo) as f64 * dy).round() as u32;
            let period = CounterVector::dp(half, a1, half, b1);
            prop_assert!(within(bias(&period), kappa));
            total = total.merged(&period);
        }
        prop_assert!(within(bias(&total), kappa));
    }

    #[test]
    fn feasible_sequences(l in 0.0f64..0.95, width in 0.01f64..1.0) {
        let u = (l + width).min(1.0);
        let b = WelfareBounds::new(l, u).unwrap();
        let n = min_balance(&b) as u64;
        let seq = feasible_sequence(&b, n + 200).unwrap();
        prop_assert_eq!(seq.len(), 201);
    }
}

fn small_theta() -> impl Strategy<Value = InputDistribution> {
    (0.05f64..0.95, 0.05f64..0.95, 0.05f64..0.95, prop::collection::btree_set(1u32..8, 1..3)).prop_map(
        |(p_a, ra, rb, costs)| {
            let costs: Vec<f64> = costs.into_iter().map(f64::from).collect();
            build_theta(ThetaKind::HybridK, p_a, Some(AcceptanceRates { a: ra, b: rb }), Some(&costs)).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn root_value_monotone_in_kappa(theta in small_theta(), horizon in 1u32..10, k1 in 0.01f64..1.0, k2 in 0.01f64..1.0) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let value = |kappa: f64| {
            let spec = FairnessSpec::new(Property::DemographicParity, kappa, horizon).unwrap();
            synthesize(&theta, &spec, &TerminalRule::Fair { kappa }).unwrap().root_value().raw()
        };
        prop_assert!(value(lo) >= value(hi) - 1e-9);
    }

    #[test]
    fn accept_all_bounds_root_value(theta in small_theta(), horizon in 1u32..12, kappa in 0.01f64..1.0) {
        let spec = FairnessSpec::new(Property::DemographicParity, kappa, horizon).unwrap();
        let v = synthesize(&theta, &spec, &TerminalRule::Fair { kappa }).unwrap().root_value().raw();
        let reject_mass_cost: f64 = (0..theta.n_inputs())
            .map(|i| (theta.input(i), theta.probabilities()[i]))
            .filter(|(x, _)| x.recommendation == Decision::Reject)
            .map(|(x, p)| p * x.cost)
            .sum();
        prop_assert!(v <= horizon as f64 * reject_mass_cost + 1e-9);
    }
}

#[test]
fn counterexamples_replay() {
    for t in [2, 3, 10, 100, 1000] {
        let c = counterexample_static_fair(t).unwrap();
        let (b1, b2, b12) = replay(&c);
        assert_eq!((b1, b2), (0.0, 0.0));
        assert!((b12 - c.combined_bias).abs() < 1e-15, "T={t}: {b12}");
    }
    for (t, k) in [(10, 2), (4, 1), (100, 10), (51, 25), (7, 3)] {
        let c = counterexample_family(t, k).unwrap();
        let (b1, b2, b12) = replay(&c);
        assert!((b1 - c.first_bias).abs() < 1e-15 && (b2 - c.second_bias).abs() < 1e-15);
        assert!((b12 - c.combined_bias).abs() < 1e-15);
    }
    for h in [2, 4, 8, 20] {
        let c = tightness_family_odd(h).unwrap();
        let (b1, b2, b12) = replay(&c);
        assert!((b1 - c.first_bias).abs() < 1e-15 && (b2 - c.second_bias).abs() < 1e-15);
        assert!((b12 - c.combined_bias).abs() < 1e-15);
        assert!(c.combination_worse);
    }
    for h in [2, 3, 5, 10, 40] {
        let c = tightness_family_even(h).unwrap();
        let (b1, b2, b12) = replay(&c);
        assert!((b1 - c.first_bias).abs() < 1e-15 && (b2 - c.second_bias).abs() < 1e-15);
        assert!((b12 - c.combined_bias).abs() < 1e-15);
    }
}

#[test]
fn balanced_probability_symmetry() {
    // with p = 1/2 both tails are equal: P(balanced) + 2 P(X < N) = 1
    for (t, n) in [(10u32, 2u32), (25, 7), (40, 20), (99, 1), (300, 140)] {
        let mut lower = 0.0f64;
        let mut choose = 1.0f64;
        for k in 0..n {
            if k > 0 {
                choose *= (t - k + 1) as f64 / k as f64;
            }
            lower += choose * 0.5f64.powi(t as i32);
        }
        let p = balanced_probability(t, n, 0.5).unwrap().probability;
        assert!((p + 2.0 * lower - 1.0).abs() < 1e-12, "T={t} N={n}");
    }
}

#[test]
fn balanced_probability_exact_integers() {
    // at p = 1/2 the sum is an integer count over 2^T
    for t in [1u32, 2, 7, 10, 33, 64, 100] {
        let mut row = vec![1u128];
        for _ in 0..t {
            let mut next = vec![1u128; row.len() + 1];
            for k in 1..row.len() {
                next[k] = row[k - 1] + row[k];
            }
            row = next;
        }
        for n in 0..=t / 2 {
            let inside: u128 = row[n as usize..=(t - n) as usize].iter().sum();
            let exact = inside as f64 / 2f64.powi(t as i32);
            let got = balanced_probability(t, n, 0.5).unwrap().probability;
            assert!((got - exact).abs() <= 4.0 * f64::EPSILON * exact.max(1e-300), "T={t} N={n}: {got} vs {exact}");
        }
    }
}
