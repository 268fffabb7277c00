use super::*;
use crate::error::Error;
use crate::params::ParamStore;
use crate::tensor::{Graph, Mask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn additive_setup(cfg: &AttentionConfig, seed: u64) -> (ParamStore, AdditiveParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qrng = ChaCha8Rng::seed_from_u64(seed + 1);
    let p = AdditiveParams::init(&mut store, "att", cfg, &mut rng, &mut qrng);
    (store, p)
}

#[test]
fn identical_values_give_uniform_weights() {
    for score in [ScoreFn::Dot, ScoreFn::Mlp] {
        let cfg = AttentionConfig::additive(3, ValueFn::Standard).with_score_fn(score);
        let (store, p) = additive_setup(&cfg, 1);
        let mut g = Graph::new();
        let q = g.constant(Tensor::vector(vec![0.3, -2.0, 1.0]));
        let row = vec![0.5, 0.1, -0.7];
        let v = g.constant(Tensor::matrix(&[row.clone(), row.clone(), row.clone(), row]).unwrap());
        let a = additive_scores(&mut g, &store, q, v, None, &p, score).unwrap();
        for &w in g.value(a).data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn dot_score_hand_example() {
    let cfg = AttentionConfig::additive(2, ValueFn::Standard);
    let (store, p) = additive_setup(&cfg, 2);
    let mut g = Graph::new();
    let q = g.constant(Tensor::vector(vec![1.0, 0.0]));
    let v = g.constant(Tensor::eye(2));
    let a = additive_scores(&mut g, &store, q, v, None, &p, ScoreFn::Dot).unwrap();
    let e = std::f64::consts::E;
    assert!((g.value(a).data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((g.value(a).data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
}

#[test]
fn zero_mlp_weights_give_uniform_weights() {
    let cfg = AttentionConfig::additive(3, ValueFn::Standard).with_score_fn(ScoreFn::Mlp);
    let (mut store, p) = additive_setup(&cfg, 3);
    let mlp = p.score.unwrap();
    store.set(mlp.weight, Tensor::zeros(&[3, 3])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[3]));
    let v = g.constant(rand_tensor(&mut rng, &[5, 3]));
    let a = additive_scores(&mut g, &store, q, v, None, &p, ScoreFn::Mlp).unwrap();
    for &w in g.value(a).data() {
        assert!((w - 0.2).abs() < 1e-15);
    }
}

#[test]
fn fully_masked_sequence_is_rejected() {
    let cfg = AttentionConfig::additive(2, ValueFn::Standard);
    let (store, p) = additive_setup(&cfg, 4);
    let mut g = Graph::new();
    let v = g.constant(Tensor::eye(2));
    let mask = Mask::new(vec![2], vec![false, false]).unwrap();
    let r = additive_attention(&mut g, &store, None, v, Some(&mask), &cfg, &p);
    assert!(matches!(r, Err(Error::DegenerateMask { .. })));
}

#[test]
fn pool_selection_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gv = rand_tensor(&mut rng, &[4, 3]);
    let mut g = Graph::new();
    let gvar = g.constant(gv.clone());
    let onehot = g.constant(Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]));
    let o = additive_pool(&mut g, onehot, gvar).unwrap();
    assert_eq!(g.value(o).data(), gv.row(2));

    let uniform = g.constant(Tensor::full(&[4], 0.25));
    let o = additive_pool(&mut g, uniform, gvar).unwrap();
    for j in 0..3 {
        let mean = (0..4).map(|i| gv.at(&[i, j])).sum::<f64>() / 4.0;
        assert!((g.value(o).data()[j] - mean).abs() < 1e-15);
    }
}

#[test]
fn additive_gate_overrides() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = AttentionConfig::additive(3, ValueFn::Qvi);
    let (mut store, p) = additive_setup(&cfg, 6);
    let vt = rand_tensor(&mut rng, &[4, 3]);
    let qt = rand_tensor(&mut rng, &[3]);

    let mut g = Graph::new();
    let q = g.constant(qt);
    let v = g.constant(vt.clone());
    let (gv, _) = qvi_gate_additive(&mut g, &store, q, v, &p, Some(1.0)).unwrap();
    assert_eq!(g.value(gv), &vt);

    store.set(p.w.unwrap(), Tensor::eye(3)).unwrap();
    let mut g = Graph::new();
    let q = g.constant(Tensor::ones(&[3]));
    let v = g.constant(vt.clone());
    let (gv, _) = qvi_gate_additive(&mut g, &store, q, v, &p, Some(0.0)).unwrap();
    assert_eq!(g.value(gv), &vt);
}

#[test]
fn additive_gates_start_at_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = AttentionConfig::additive(4, ValueFn::Qvi);
    let (store, p) = additive_setup(&cfg, 7);
    let mut g = Graph::new();
    let v = g.constant(rand_tensor(&mut rng, &[2, 5, 4]));
    let out = additive_attention(&mut g, &store, None, v, None, &cfg, &p).unwrap();
    assert_eq!(g.shape(out.output), &[2, 4]);
    for &b in g.value(out.gate.unwrap()).data() {
        assert_eq!(b, 0.5);
    }
}

#[test]
fn additive_dimension_mismatch() {
    let cfg = AttentionConfig::additive(3, ValueFn::Qvi);
    let (store, p) = additive_setup(&cfg, 8);
    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(&[2, 4]));
    let r = additive_attention(&mut g, &store, None, v, None, &cfg, &p);
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn dot_attention_single_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[3, 4]));
    let k = g.constant(rand_tensor(&mut rng, &[1, 4]));
    let vt = rand_tensor(&mut rng, &[1, 4]);
    let v = g.constant(vt.clone());
    let o = dot_attention(&mut g, q, k, v, None).unwrap().output;
    for r in 0..3 {
        assert!(g
            .value(o)
            .row(r)
            .iter()
            .zip(vt.data())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }
}

#[test]
fn dot_attention_near_hard_selection() {
    // Orthonormal keys scaled by a large factor; each query selects its own value.
    let scale = 40.0;
    let mut k = Tensor::eye(3);
    k.data_mut().iter_mut().for_each(|x| *x *= scale);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vt = rand_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::new();
    let qv = g.constant(k.clone());
    let kv = g.constant(k);
    let v = g.constant(vt.clone());
    let o = dot_attention(&mut g, qv, kv, v, None).unwrap().output;
    // Off-diagonal weight is exp(-scale²/√d) relative to the diagonal.
    let leak = 2.0 * (-scale * scale / 3f64.sqrt()).exp();
    assert!(g.value(o).max_abs_diff(&vt).unwrap() <= 2.0 * leak + 1e-15);
}

#[test]
fn dot_attention_dimension_mismatch() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[2, 3]));
    let k = g.constant(Tensor::zeros(&[4, 2]));
    let v = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(dot_attention(&mut g, q, k, v, None), Err(Error::Dimension { .. })));
}

#[test]
fn transformed_queries_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let qrow = rand_tensor(&mut rng, &[1, 3]);
    let mut g = Graph::new();
    let q = g.constant(qrow.clone());
    let v = g.constant(rand_tensor(&mut rng, &[4, 3]));
    let qh = transformed_queries(&mut g, q, v, None).unwrap();
    assert_eq!(g.shape(qh), &[4, 3]);
    for r in 0..4 {
        assert_eq!(g.value(qh).row(r), qrow.data());
    }

    let row = vec![0.2, -0.4, 0.9];
    let q = g.constant(Tensor::matrix(&[row.clone(), row.clone()]).unwrap());
    let qh = transformed_queries(&mut g, q, v, None).unwrap();
    for r in 0..4 {
        for (a, b) in g.value(qh).row(r).iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn dot_gate_overrides() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let p = DotGateParams::init(&mut store, "h0", 3, ValueFn::Qvi, &mut rng);
    let vt = rand_tensor(&mut rng, &[4, 3]);
    for mode in [GateMode::PerPosition, GateMode::Scalar] {
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, &[2, 3]));
        let v = g.constant(vt.clone());
        let (gv, _) = qvi_gate_dot(&mut g, &store, q, v, &p, mode, Some(1.0), None, None).unwrap();
        assert_eq!(g.value(gv), &vt);
    }
    store.set(p.w.unwrap(), Tensor::eye(3)).unwrap();
    let mut g = Graph::new();
    let q = g.constant(Tensor::ones(&[1, 3]));
    let v = g.constant(vt.clone());
    let (gv, _) =
        qvi_gate_dot(&mut g, &store, q, v, &p, GateMode::PerPosition, Some(0.0), None, None).unwrap();
    assert_eq!(g.value(gv), &vt);
}

#[test]
fn scalar_gate_is_shared_across_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let p = DotGateParams::init(&mut store, "h0", 3, ValueFn::Qvi, &mut rng);
    store.set(p.h_gate.unwrap(), rand_tensor(&mut rng, &[6])).unwrap();
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[2, 2, 3]));
    let v = g.constant(rand_tensor(&mut rng, &[2, 4, 3]));
    let mask = Mask::new(vec![2, 4], vec![true, true, true, false, true, true, true, true]).unwrap();
    let (_, beta) =
        qvi_gate_dot(&mut g, &store, q, v, &p, GateMode::Scalar, None, None, Some(&mask)).unwrap();
    assert_eq!(g.shape(beta), &[2, 1, 1]);
    for &b in g.value(beta).data() {
        assert!(b > 0.0 && b < 1.0);
    }
}

#[test]
fn qvi_dot_standard_equals_dot_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let store = ParamStore::new();
    let cfg = AttentionConfig::dot_product(4, 1, ValueFn::Standard);
    let (qt, kt, vt) = (
        rand_tensor(&mut rng, &[2, 4]),
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[3, 4]),
    );
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(qt), g.constant(kt), g.constant(vt));
    let a = dot_attention(&mut g, q, k, v, None).unwrap().output;
    let b = qvi_dot_attention(&mut g, &store, q, k, v, None, None, &cfg, &DotGateParams::none(4))
        .unwrap()
        .output;
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn multi_head_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut qrng = ChaCha8Rng::seed_from_u64(17);
    let cfg = AttentionConfig::dot_product(2, 3, ValueFn::Qvi);
    let mut store = ParamStore::new();
    let p = MultiHeadParams::init(&mut store, "mha", 6, &cfg, &mut rng, &mut qrng).unwrap();
    for n in 1..5 {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[n, 6]));
        let y = multi_head_self_attention(&mut g, &store, x, None, &cfg, &p).unwrap();
        assert_eq!(g.shape(y), &[n, 6]);
    }
    let bad = AttentionConfig::dot_product(4, 3, ValueFn::Qvi);
    assert!(MultiHeadParams::init(&mut store, "bad", 6, &bad, &mut rng, &mut qrng).is_err());
}

#[test]
fn enum_names_round_trip() {
    for v in ValueFn::ALL {
        assert_eq!(v.to_string().parse::<ValueFn>().unwrap(), v);
    }
    assert!("gated".parse::<ValueFn>().is_err());
    assert_eq!("scalar".parse::<GateMode>().unwrap(), GateMode::Scalar);
    assert_eq!("mlp".parse::<ScoreFn>().unwrap(), ScoreFn::Mlp);
    assert_eq!("dot_product".parse::<Form>().unwrap(), Form::DotProduct);
}
