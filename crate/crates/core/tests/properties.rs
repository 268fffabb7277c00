mod common;

use common::*;
use proptest::prelude::*;
use qvi::attention::{GateMode, ScoreFn, ValueFn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_fn() -> impl Strategy<Value = ValueFn> {
    prop::sample::select(ValueFn::ALL.to_vec())
}

fn score_fn() -> impl Strategy<Value = ScoreFn> {
    prop::sample::select(vec![ScoreFn::Dot, ScoreFn::Mlp])
}

fn gate_mode() -> impl Strategy<Value = GateMode> {
    prop::sample::select(vec![GateMode::PerPosition, GateMode::Scalar])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vectorized_matches_loops(seed in any::<u64>()) {
        let dev = oracle_deviation(seed, 5);
        prop_assert!(dev <= 1e-12, "deviation {dev:e}");
    }

    #[test]
    fn unit_gate_reduces_to_standard(
        seed in any::<u64>(), n in 1usize..=6, nq in 1usize..=6, d in 1usize..=6,
        sf in score_fn(), mode in gate_mode(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = AdditiveCase::random(&mut rng, n, d, ValueFn::Qvi, sf);
        let forced = a.cfg.clone().with_gate_override(1.0);
        let mut standard = a.cfg.clone();
        standard.value_fn = ValueFn::Standard;
        prop_assert!(max_abs(&a.run(&forced).0, &a.run(&standard).0) <= 1e-12);

        let c = DotCase::random(&mut rng, nq, n, d, ValueFn::Qvi, mode);
        let forced = c.cfg.clone().with_gate_override(1.0);
        let mut standard = c.cfg.clone();
        standard.value_fn = ValueFn::Standard;
        prop_assert!(max_abs(&c.run(&forced).0, &c.run(&standard).0) <= 1e-12);
    }

    #[test]
    fn zero_gate_reduces_to_interactions(
        seed in any::<u64>(), n in 1usize..=6, nq in 1usize..=6, d in 1usize..=6, mode in gate_mode(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = AdditiveCase::random(&mut rng, n, d, ValueFn::Qvi, ScoreFn::Dot);
        let closed = a.value_fn_with(&a.cfg.clone().with_gate_override(0.0));
        prop_assert!(max_abs(&a.value_fn(ValueFn::InteractionsOnly), &closed) <= 1e-12);

        let c = DotCase::random(&mut rng, nq, n, d, ValueFn::Qvi, mode);
        let forced = c.cfg.clone().with_gate_override(0.0);
        let mut inter = c.cfg.clone();
        inter.value_fn = ValueFn::InteractionsOnly;
        prop_assert!(max_abs(&c.run(&forced).0, &c.run(&inter).0) <= 1e-12);
    }

    #[test]
    fn simple_sum_is_exactly_values_plus_interactions(
        seed in any::<u64>(), n in 1usize..=6, nq in 1usize..=6, d in 1usize..=6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = AdditiveCase::random(&mut rng, n, d, ValueFn::SimpleSum, ScoreFn::Mlp);
        let (g1, g2, g3) = (a.value_fn(ValueFn::ValuesOnly), a.value_fn(ValueFn::InteractionsOnly), a.value_fn(ValueFn::SimpleSum));
        for i in 0..g3.len() {
            prop_assert_eq!(g3[i], g2[i] + g1[i]);
        }
        let c = DotCase::random(&mut rng, nq, n, d, ValueFn::SimpleSum, GateMode::PerPosition);
        let (g1, g2, g3) = (c.value_fn(ValueFn::ValuesOnly), c.value_fn(ValueFn::InteractionsOnly), c.value_fn(ValueFn::SimpleSum));
        for i in 0..g3.len() {
            prop_assert_eq!(g3[i], g2[i] + g1[i]);
        }
    }

    #[test]
    fn weights_are_distributions_and_qhat_is_convex(
        seed in any::<u64>(), n in 1usize..=6, nq in 1usize..=6, d in 1usize..=6,
        vf in value_fn(), sf in score_fn(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = AdditiveCase::random(&mut rng, n, d, vf, sf);
        let (_, w, gates) = a.run(&a.cfg);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (i, &x) in w.iter().enumerate() {
            prop_assert!(x >= 0.0);
            if !a.keep[i] { prop_assert_eq!(x, 0.0); }
        }
        for b in gates.unwrap_or_default() {
            prop_assert!(b > 0.0 && b < 1.0);
        }

        let c = DotCase::random(&mut rng, nq, n, d, vf, GateMode::PerPosition);
        let (_, w) = c.run(&c.cfg);
        for row in w.chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, &x) in row.iter().enumerate() {
                prop_assert!(x >= 0.0);
                if !c.keep_k[j] { prop_assert_eq!(x, 0.0); }
            }
        }
        let qh = c.qhat();
        for row in qh.chunks(d) {
            for (k, &x) in row.iter().enumerate() {
                let col = (0..nq).filter(|&j| c.keep_q[j]).map(|j| c.q[j][k]);
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn additive_pooling_ignores_order(seed in any::<u64>(), n in 2usize..=6, d in 1usize..=5, vf in value_fn(), sf in score_fn()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = AdditiveCase::random(&mut rng, n, d, vf, sf);
        let before = a.run(&a.cfg).0;
        a.values.reverse();
        a.keep.reverse();
        let after = a.run(&a.cfg).0;
        prop_assert!(max_abs(&before, &after) <= 1e-12);
    }

    #[test]
    fn masked_values_do_not_leak(seed in any::<u64>(), n in 1usize..=5, nq in 1usize..=5, d in 1usize..=5, vf in value_fn(), mode in gate_mode()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = DotCase::random(&mut rng, nq, n, d, vf, mode);
        let before = c.run(&c.cfg).0;
        for j in 0..n {
            if !c.keep_k[j] {
                c.k[j] = uniform(&mut rng, d).iter().map(|x| x * 100.0).collect();
                c.v[j] = uniform(&mut rng, d).iter().map(|x| x * 100.0).collect();
            }
        }
        for j in 0..nq {
            if !c.keep_q[j] {
                c.q[j] = uniform(&mut rng, d).iter().map(|x| x * 100.0).collect();
            }
        }
        let after = c.run(&c.cfg).0;
        // Rows of masked queries may change; kept query rows must not.
        for i in 0..nq {
            if c.keep_q[i] {
                prop_assert!(max_abs(&before[i * d..(i + 1) * d], &after[i * d..(i + 1) * d]) <= 1e-12);
            }
        }
    }
}
