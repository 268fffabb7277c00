use super::*;
use crate::attention::ValueFn;
use crate::data::gen_token_retrieval;
use crate::models::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn tiny_task() -> (Dataset, Dataset, ModelConfig) {
    let ds = gen_token_retrieval(120, 5, 16, 2, 3).unwrap();
    let (train, val) = ds.split_at(90);
    let cfg = ModelConfig::additive_pool(16, 8, 2, ValueFn::Qvi);
    (train, val, cfg)
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 16,
        epochs: 4,
        early_stop_patience: 0,
        ..Default::default()
    }
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[3, 4]));
    let loss = g.cross_entropy(logits, &[0, 1, 3]).unwrap();
    assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    let big = g.constant(Tensor::matrix(&[vec![800.0, 0.0]]).unwrap());
    let loss = g.cross_entropy(big, &[0]).unwrap();
    assert!(g.value(loss).item() < 1e-300);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![1.0, -2.0]));
    let mut state = AdamState::new(&store);
    let before = store.get(store.find("w").unwrap()).clone();
    adam_step(&mut store, &[Some(Tensor::zeros(&[2]))], &mut state, &AdamConfig::new(0.1));
    assert_eq!(store.get(store.find("w").unwrap()), &before);
}

#[test]
fn adam_constant_gradient_steps_by_lr() {
    // Bias correction makes m̂ = g and v̂ = g² exactly in exact arithmetic,
    // so every step moves by lr·|g|/(|g| + ε) against the gradient.
    for g in [0.3f64, -2.0, 1e-3] {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.0]));
        let cfg = AdamConfig::new(0.01);
        let mut state = AdamState::new(&store);
        let step = cfg.lr * g.abs() / (g.abs() + cfg.eps);
        for t in 1..=50 {
            adam_step(&mut store, &[Some(Tensor::vector(vec![g]))], &mut state, &cfg);
            let expect = -g.signum() * step * t as f64;
            assert!((store.get(id).data()[0] - expect).abs() < 1e-12, "g={g} t={t}");
        }
    }
}

#[test]
fn optimizer_state_round_trips_bit_exactly() {
    let (train, _, cfg) = tiny_task();
    let mut model = Model::new(cfg, 1).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, model.store());
    let batch = crate::data::batched(&train, 8, 0, false).next().unwrap().unwrap();
    for _ in 0..3 {
        train_step(&mut model, &mut opt, &batch, None, 5.0).unwrap();
    }
    let Optimizer::Adam(_, state) = &opt else { unreachable!() };
    let bytes = state.to_bytes();
    let back = AdamState::from_bytes(&bytes).unwrap();
    assert_eq!(&back, state);
    assert_eq!(back.to_bytes(), bytes);
    assert!(AdamState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(AdamState::from_bytes(b"garbage!garbage!").is_err());
}

#[test]
fn metric_examples() {
    let m = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
    assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    let m = classification_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], 2);
    assert_eq!(m.accuracy, 0.5);
    assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    // Class 2 never appears: excluded from the mean.
    let m = classification_metrics(&[0, 1], &[0, 1], 3);
    assert_eq!(m.macro_f1, 1.0);
    let p = [0, 1, 1, 0, 2];
    let y = [0, 1, 0, 2, 2];
    let a = classification_metrics(&p, &y, 3);
    let b = classification_metrics(&[2, 0, 1, 1, 0], &[2, 2, 0, 1, 0], 3);
    assert_eq!(a, b);
}

#[test]
fn evaluate_ignores_batch_size() {
    let (train, _, cfg) = tiny_task();
    let model = Model::new(cfg, 2).unwrap();
    let a = evaluate(&model, &train, 1).unwrap();
    let b = evaluate(&model, &train, 7).unwrap();
    let c = evaluate(&model, &train, 1000).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn fit_is_deterministic_and_returns_full_curves() {
    let (train, val, cfg) = tiny_task();
    let run = |seed| {
        let mut m = Model::new(cfg.clone(), seed).unwrap();
        let r = fit(&mut m, &train, &val, &TrainConfig { seed, ..quick_cfg() }).unwrap();
        (r, m)
    };
    let (a, ma) = run(4);
    let (b, mb) = run(4);
    assert_eq!(a.tsv_rows("qvi"), b.tsv_rows("qvi"));
    assert_eq!(a.epochs.len(), 4);
    assert!(a.epochs.iter().all(|e| e.loss.is_finite() && e.val.is_some()));
    for ((_, _, x), (_, _, y)) in ma.store().iter().zip(mb.store().iter()) {
        assert_eq!(x, y);
    }
    // The model holds the best epoch's parameters.
    let acc = evaluate(&ma, &val, 64).unwrap().accuracy;
    assert_eq!(acc, a.best.accuracy);
    assert!(a.summary().contains("best epoch"));
}

#[test]
fn early_stopping_and_sparse_evaluation() {
    let (train, val, cfg) = tiny_task();
    let mut m = Model::new(cfg.clone(), 0).unwrap();
    let tc = TrainConfig {
        lr: 1e-9,
        epochs: 30,
        early_stop_patience: 2,
        ..quick_cfg()
    };
    let r = fit(&mut m, &train, &val, &tc).unwrap();
    assert!(r.epochs.len() < 30, "never stopped");

    let mut m = Model::new(cfg, 0).unwrap();
    let tc = TrainConfig {
        epochs: 5,
        eval_every: 2,
        ..quick_cfg()
    };
    let r = fit(&mut m, &train, &val, &tc).unwrap();
    let evaluated: Vec<usize> = r.epochs.iter().filter(|e| e.val.is_some()).map(|e| e.epoch).collect();
    assert_eq!(evaluated, vec![2, 4, 5]);
    assert!(r.tsv_rows("qvi").contains("\t-\t-"));
}

#[test]
fn non_finite_loss_names_the_culprit() {
    let (train, val, cfg) = tiny_task();
    let mut m = Model::new(cfg, 0).unwrap();
    let id = m.store().find("classifier.b").unwrap();
    m.store_mut().get_mut(id).data_mut()[0] = f64::NAN;
    match fit(&mut m, &train, &val, &quick_cfg()) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("classifier.b"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn training_rejects_gate_override() {
    let (train, val, mut cfg) = tiny_task();
    cfg.attention.gate_override = Some(1.0);
    let mut m = Model::new(cfg, 0).unwrap();
    assert!(matches!(
        fit(&mut m, &train, &val, &quick_cfg()),
        Err(Error::Config { key, .. }) if key == "attention.gate_override"
    ));
    let bad = TrainConfig { lr: 0.0, ..quick_cfg() };
    assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "train.lr"));
}

#[test]
fn clipping_rescales_to_the_ceiling() {
    let mut g = vec![Some(Tensor::vector(vec![3.0, 0.0])), None, Some(Tensor::vector(vec![4.0]))];
    let norm = clip_global_norm(&mut g, 1.0);
    assert_eq!(norm, 5.0);
    let after: f64 = g.iter().flatten().flat_map(|t| t.data()).map(|x| x * x).sum();
    assert!((after.sqrt() - 1.0).abs() < 1e-15);
    assert_eq!(clip_global_norm(&mut g, 10.0), after.sqrt());
}

#[test]
fn single_batch_overfits() {
    let (train, _, cfg) = tiny_task();
    let batch = crate::data::batched(&train, 8, 0, false).next().unwrap().unwrap();
    let mut model = Model::new(cfg, 0).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, model.store());
    let first = model.loss(&batch).unwrap();
    for _ in 0..100 {
        train_step(&mut model, &mut opt, &batch, None, 0.0).unwrap();
    }
    let last = model.loss(&batch).unwrap();
    assert!(last < 0.01 && last < first, "{first} -> {last}");
}

#[test]
fn ablation_table_shape_and_zero_spread() {
    let (train, val, cfg) = tiny_task();
    let task = AblationTask {
        train,
        val,
        model: cfg,
        train_cfg: TrainConfig { epochs: 2, ..quick_cfg() },
        threads: 2,
    };
    let t = run_ablation(&task, &[ValueFn::Standard], &[7]).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.summary_tsv().lines().count(), 2);
    let t = run_ablation(&task, &[ValueFn::Qvi, ValueFn::ValuesOnly], &[3, 3]).unwrap();
    for r in &t.rows {
        assert_eq!(r.acc_std, 0.0);
        assert_eq!(r.f1_std, 0.0);
    }
    assert!(t.metrics_tsv().starts_with(METRICS_HEADER));
    assert!(run_ablation(&task, &[], &[1]).is_err());
}
