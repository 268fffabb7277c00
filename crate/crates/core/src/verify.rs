//! Finite-difference verification of every differentiable operation,
//! attention variant and model, grouped by scope.

use crate::attention::{
    additive_attention, multi_head_self_attention, qvi_dot_attention, AdditiveParams,
    AttentionConfig, DotGateParams, GateMode, MultiHeadParams, ScoreFn, ValueFn,
};
use crate::config::str_enum;
use crate::data::{Batch, Sample};
use crate::error::Result;
use crate::models::{InputMode, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{gradcheck_with, BinaryOp, Graph, GradcheckOptions, GradcheckReport, Mask, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Attention,
    Models,
    All,
}

str_enum!(Scope, "scope", {
    "ops" => Scope::Ops,
    "attention" => Scope::Attention,
    "models" => Scope::Models,
    "all" => Scope::All,
});

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradcheckReport,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.report.passes(GRADCHECK_TOL)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Moves every parameter off its initial value, so zero-initialised gates
/// and biases do not sit at special points.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

/// Gradcheck of `f` over `inputs` followed by every parameter of `store`.
fn check_with_params<F>(store: &ParamStore, inputs: Vec<Tensor>, opts: GradcheckOptions, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let n = inputs.len();
    let mut all = inputs;
    all.extend(ids.iter().map(|&id| store.get(id).clone()));
    gradcheck_with(
        |g, vars| {
            for (&id, &v) in ids.iter().zip(&vars[n..]) {
                g.bind_param(store, id, v);
            }
            f(g, &vars[..n])
        },
        &all,
        opts,
    )
}

fn ops_cases(rng: &mut ChaCha8Rng, opts: GradcheckOptions, out: &mut Vec<CaseResult>) -> Result<()> {
    let mut push = |name: &str, report: GradcheckReport| {
        out.push(CaseResult {
            name: format!("ops/{name}"),
            report,
        })
    };
    let a = uniform(rng, &[3, 4]);
    let b = uniform(rng, &[4, 5]);
    push("matmul", gradcheck_with(|g, x| g.matmul(x[0], x[1]), &[a, b], opts)?);
    let a = uniform(rng, &[2, 3, 4]);
    let b = uniform(rng, &[4, 2]);
    push("matmul_shared", gradcheck_with(|g, x| g.matmul(x[0], x[1]), &[a.clone(), b], opts)?);
    let b = uniform(rng, &[2, 4, 3]);
    push("matmul_batched", gradcheck_with(|g, x| g.matmul(x[0], x[1]), &[a.clone(), b], opts)?);
    push("transpose", gradcheck_with(|g, x| g.transpose(x[0]), std::slice::from_ref(&a), opts)?);

    let mask = Mask::new(vec![2, 4], vec![true, true, false, true, true, false, false, false])?;
    let s = uniform(rng, &[2, 4]);
    push(
        "masked_softmax",
        gradcheck_with(|g, x| g.row_softmax(x[0], Some(&mask)), &[s], opts)?,
    );
    let c = uniform(rng, &[4]);
    for (name, op) in [("add", BinaryOp::Add), ("sub", BinaryOp::Sub), ("mul", BinaryOp::Mul)] {
        push(
            &format!("{name}_broadcast"),
            gradcheck_with(|g, x| g.elementwise(op, x[0], x[1]), &[a.clone(), c.clone()], opts)?,
        );
    }
    push("sigmoid", gradcheck_with(|g, x| Ok(g.sigmoid(x[0])), std::slice::from_ref(&a), opts)?);
    push("tanh", gradcheck_with(|g, x| Ok(g.tanh(x[0])), std::slice::from_ref(&a), opts)?);
    // Keep inputs away from the kink at zero.
    let r = a.data().iter().map(|v| if v.abs() < 0.05 { 0.5 } else { *v }).collect();
    let r = Tensor::new(a.shape().to_vec(), r)?;
    push("relu", gradcheck_with(|g, x| Ok(g.relu(x[0])), &[r], opts)?);
    push("affine", gradcheck_with(|g, x| Ok(g.affine(x[0], -1.5, 0.25)), std::slice::from_ref(&a), opts)?);
    let other = uniform(rng, &[2, 3, 2]);
    push(
        "concat",
        gradcheck_with(|g, x| g.concat_features(x[0], x[1]), &[a.clone(), other], opts)?,
    );
    for axis in 0..3 {
        push(
            &format!("sum_axis{axis}"),
            gradcheck_with(|g, x| g.sum(x[0], axis), std::slice::from_ref(&a), opts)?,
        );
        push(
            &format!("mean_axis{axis}"),
            gradcheck_with(|g, x| g.mean(x[0], axis), std::slice::from_ref(&a), opts)?,
        );
    }
    push(
        "reshape",
        gradcheck_with(|g, x| g.reshape(x[0], &[6, 4]), std::slice::from_ref(&a), opts)?,
    );
    let gain = uniform(rng, &[4]);
    let bias = uniform(rng, &[4]);
    push(
        "layer_norm",
        gradcheck_with(|g, x| g.layer_norm(x[0], x[1], x[2]), &[a.clone(), gain, bias], opts)?,
    );
    let table = uniform(rng, &[5, 3]);
    push(
        "gather",
        gradcheck_with(|g, x| g.gather(x[0], &[4, 0, 4, 2], &[2, 2]), &[table], opts)?,
    );
    let logits = uniform(rng, &[3, 4]);
    push(
        "softmax_cross_entropy",
        gradcheck_with(|g, x| g.cross_entropy(x[0], &[0, 3, 1]), &[logits], opts)?,
    );
    Ok(())
}

fn attention_cases(rng: &mut ChaCha8Rng, opts: GradcheckOptions, out: &mut Vec<CaseResult>) -> Result<()> {
    let (b, n, d) = (2, 4, 3);
    let mask = Mask::new(vec![b, n], vec![true, true, true, false, true, true, true, true])?;

    for score_fn in [ScoreFn::Dot, ScoreFn::Mlp] {
        for vf in ValueFn::ALL {
            let cfg = AttentionConfig::additive(d, vf).with_score_fn(score_fn);
            let mut store = ParamStore::new();
            let params = AdditiveParams::init(&mut store, "a", &cfg, rng, &mut rng.clone());
            jitter(&mut store, rng, 0.3);
            let q = uniform(rng, &[b, d]);
            let v = uniform(rng, &[b, n, d]);
            let report = check_with_params(&store, vec![q, v], opts, |g, x| {
                Ok(additive_attention(g, &store, Some(x[0]), x[1], Some(&mask), &cfg, &params)?.output)
            })?;
            out.push(CaseResult {
                name: format!("attention/additive_{score_fn}/{vf}"),
                report,
            });
        }
    }

    for mode in [GateMode::PerPosition, GateMode::Scalar] {
        for vf in ValueFn::ALL {
            if mode == GateMode::Scalar && vf != ValueFn::Qvi {
                continue;
            }
            let cfg = AttentionConfig::dot_product(d, 1, vf).with_gate_mode(mode);
            let mut store = ParamStore::new();
            let params = DotGateParams::init(&mut store, "h", d, vf, rng);
            jitter(&mut store, rng, 0.3);
            let q = uniform(rng, &[b, 2, d]);
            let k = uniform(rng, &[b, n, d]);
            let v = uniform(rng, &[b, n, d]);
            let qmask = Mask::new(vec![b, 2], vec![true, true, true, false])?;
            let report = check_with_params(&store, vec![q, k, v], opts, |g, x| {
                Ok(qvi_dot_attention(g, &store, x[0], x[1], x[2], Some(&mask), Some(&qmask), &cfg, &params)?.output)
            })?;
            let tag = match mode {
                GateMode::PerPosition => "per_position",
                GateMode::Scalar => "scalar",
            };
            out.push(CaseResult {
                name: format!("attention/dot_{tag}/{vf}"),
                report,
            });
        }
    }

    for vf in [ValueFn::Standard, ValueFn::Qvi] {
        let cfg = AttentionConfig::dot_product(2, 2, vf);
        let mut store = ParamStore::new();
        let params = MultiHeadParams::init(&mut store, "mh", 4, &cfg, rng, &mut rng.clone())?;
        jitter(&mut store, rng, 0.3);
        let x = uniform(rng, &[b, n, 4]);
        let report = check_with_params(&store, vec![x], opts, |g, x| {
            multi_head_self_attention(g, &store, x[0], Some(&mask), &cfg, &params)
        })?;
        out.push(CaseResult {
            name: format!("attention/multi_head/{vf}"),
            report,
        });
    }
    Ok(())
}

const MAX_REDRAWS: usize = 20;
/// Required ReLU clearance in units of the finite-difference step.
const KINK_CLEARANCE: f64 = 10.0;

fn model_cases(rng: &mut ChaCha8Rng, opts: GradcheckOptions, out: &mut Vec<CaseResult>) -> Result<()> {
    let seqs: [&[usize]; 3] = [&[1, 2, 3, 4], &[4, 0, 2], &[3]];
    let samples: Vec<Sample> = seqs
        .iter()
        .enumerate()
        .map(|(i, ids)| Sample::Tokens {
            ids: ids.to_vec(),
            label: i % 2,
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let tokens = Batch::from_samples(&refs)?;

    let vec_samples: Vec<Sample> = (0..2)
        .map(|i| Sample::Vectors {
            query: uniform(rng, &[4]).into_data(),
            values: uniform(rng, &[3 - i, 4]).into_data(),
            len: 3 - i,
            label: i,
        })
        .collect();
    let vec_refs: Vec<&Sample> = vec_samples.iter().collect();
    let vectors = Batch::from_samples(&vec_refs)?;

    let seed: u64 = rng.gen();
    for vf in ValueFn::ALL {
        let mut configs = vec![
            ("additive_pool", ModelConfig::additive_pool(5, 4, 2, vf), &tokens),
            ("transformer", ModelConfig::transformer(5, 8, 1, 2, 2, vf), &tokens),
        ];
        let mut vcfg = ModelConfig::additive_pool(1, 4, 2, vf);
        vcfg.input = InputMode::Vectors;
        vcfg.attention.score_fn = ScoreFn::Mlp;
        configs.push(("additive_pool_vectors", vcfg, &vectors));
        if vf == ValueFn::Qvi {
            let mut scalar = ModelConfig::transformer(5, 8, 1, 2, 2, vf);
            scalar.attention.gate_mode = GateMode::Scalar;
            configs.push(("transformer_scalar_gate", scalar, &tokens));
        }
        for (name, mut cfg, batch) in configs {
            cfg.max_len = 4;
            let base = Model::new(cfg, seed)?;
            // Redraw the jitter until every ReLU input is clear of the
            // finite-difference stencil.
            let mut model = base.clone();
            for _ in 0..MAX_REDRAWS {
                model = base.clone();
                jitter(model.store_mut(), rng, 0.2);
                if model.kink_margin(batch)?.is_none_or(|m| m > KINK_CLEARANCE * opts.eps) {
                    break;
                }
            }
            out.push(CaseResult {
                name: format!("models/{name}/{vf}"),
                report: model.gradcheck(batch, opts)?,
            });
        }
    }
    Ok(())
}

/// Runs every case in `scope`. Inputs are drawn from `seed`, so a fixed
/// seed reproduces the report exactly.
pub fn run_gradcheck_suite(scope: Scope, seed: u64, opts: GradcheckOptions) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        ops_cases(&mut rng, opts, &mut out)?;
    }
    if matches!(scope, Scope::Attention | Scope::All) {
        attention_cases(&mut rng, opts, &mut out)?;
    }
    if matches!(scope, Scope::Models | Scope::All) {
        model_cases(&mut rng, opts, &mut out)?;
    }
    Ok(out)
}

/// One `name<TAB>max_rel_error<TAB>PASS|FAIL` line per case and a final
/// summary line.
pub fn format_report(cases: &[CaseResult]) -> String {
    let mut out = String::new();
    for c in cases {
        let status = if c.passes() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{}\t{:.3e}\t{status}", c.name, c.report.max_rel_error);
    }
    let failed = cases.iter().filter(|c| !c.passes()).count();
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let _ = writeln!(
        out,
        "{} cases, {failed} failed, worst relative error {worst:.3e} (tolerance {GRADCHECK_TOL:e})",
        cases.len()
    );
    out
}
