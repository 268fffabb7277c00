use super::{check_feature_dim, fixed_gate, gate_mix, project_rows, AttentionConfig, ScoreFn, ValueFn};
use crate::error::{Error, Result};
use crate::params::{glorot, near_identity, normal, ParamId, ParamStore};
use crate::tensor::{Graph, Mask, Tensor, Var};
use rand::Rng;

/// Perceptron score `h(q, v) = q · tanh(S v + b)` with hidden size `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpScore {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Learnable symbols of one additive attention site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdditiveParams {
    pub dim: usize,
    /// Parameter query, used when no external query is supplied.
    pub query: ParamId,
    pub score: Option<MlpScore>,
    /// Square interaction map `W` (`d×d`).
    pub w: Option<ParamId>,
    /// Gate vector `u` (`2d`).
    pub u: Option<ParamId>,
}

impl AdditiveParams {
    /// Registers the parameters `cfg` needs under `prefix`.
    ///
    /// Non-interaction parameters are drawn from `rng`; `W` is drawn from
    /// `qvi_rng`, so variants that differ only in their value function
    /// share identical remaining parameters for the same seeds.
    pub fn init<R: Rng, Q: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
        qvi_rng: &mut Q,
    ) -> Self {
        let d = cfg.dim;
        let query = store.add(format!("{prefix}.query"), normal(rng, &[d], 0.1));
        let score = (cfg.score_fn == ScoreFn::Mlp).then(|| MlpScore {
            weight: store.add(format!("{prefix}.score_w"), glorot(rng, d, d)),
            bias: store.add(format!("{prefix}.score_b"), Tensor::zeros(&[d])),
        });
        let w = cfg
            .value_fn
            .uses_interaction()
            .then(|| store.add(format!("{prefix}.qvi_w"), near_identity(qvi_rng, d, 0.01)));
        let u = cfg
            .value_fn
            .is_gated()
            .then(|| store.add(format!("{prefix}.qvi_u"), Tensor::zeros(&[2 * d])));
        AdditiveParams {
            dim: d,
            query,
            score,
            w,
            u,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdditiveOutput {
    /// `[d]` or `[B×d]`.
    pub output: Var,
    /// Attention weights, `[N]` or `[B×N]`.
    pub weights: Var,
    /// Per-value gates `[N×1]` / `[B×N×1]` when the value function is gated.
    pub gate: Option<Var>,
}

/// Shapes the query so that it broadcasts over value rows.
fn broadcast_query(g: &mut Graph, q: Var, values: Var) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let vs = g.shape(values).to_vec();
    match (qs.len(), vs.len()) {
        (1, 2) | (1, 3) => Ok(q),
        (2, 3) if qs[0] == vs[0] => g.reshape(q, &[qs[0], 1, qs[1]]),
        _ => Err(Error::dim(
            "additive_attention",
            format!("query {qs:?} does not fit values {vs:?}"),
        )),
    }
}

fn resolve_query(g: &mut Graph, store: &ParamStore, q: Option<Var>, params: &AdditiveParams) -> Var {
    q.unwrap_or_else(|| g.param(store, params.query))
}

/// Attention weights `α_i = softmax_i(h(q, v_i))` over unmasked values.
pub fn additive_scores(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    values: Var,
    mask: Option<&Mask>,
    params: &AdditiveParams,
    score_fn: ScoreFn,
) -> Result<Var> {
    check_feature_dim(g, "additive_scores", values, params.dim)?;
    check_feature_dim(g, "additive_scores", q, params.dim)?;
    let qb = broadcast_query(g, q, values)?;
    let keys = match score_fn {
        ScoreFn::Dot => values,
        ScoreFn::Mlp => {
            let mlp = params.score.ok_or_else(|| {
                Error::Contract("mlp score requested but no score weights registered".into())
            })?;
            let s = g.param(store, mlp.weight);
            let b = g.param(store, mlp.bias);
            let h = project_rows(g, values, s)?;
            let h = g.add(h, b)?;
            g.tanh(h)
        }
    };
    let prod = g.mul(keys, qb)?;
    let last = g.shape(prod).len() - 1;
    let scores = g.sum(prod, last)?;
    g.row_softmax(scores, mask)
}

/// `o = Σ_i α_i G_i`.
pub fn additive_pool(g: &mut Graph, weights: Var, gvals: Var) -> Result<Var> {
    let ws = g.shape(weights).to_vec();
    let gs = g.shape(gvals).to_vec();
    if gs.len() != ws.len() + 1 || gs[..ws.len()] != ws[..] {
        return Err(Error::dim(
            "additive_pool",
            format!("weights {ws:?} do not match values {gs:?}"),
        ));
    }
    let mut col = ws.clone();
    col.push(1);
    let a = g.reshape(weights, &col)?;
    let weighted = g.mul(gvals, a)?;
    g.sum(weighted, ws.len() - 1)
}

/// Interaction term `q ∗ W v_i` for every value row.
fn interaction(
    g: &mut Graph,
    store: &ParamStore,
    qb: Var,
    values: Var,
    params: &AdditiveParams,
) -> Result<Var> {
    let w = params
        .w
        .ok_or_else(|| Error::Contract("interaction requested but W is not registered".into()))?;
    let w = g.param(store, w);
    let wv = project_rows(g, values, w)?;
    g.mul(wv, qb)
}

/// Gated query-aware values `g(q, v_i) = (1 − β_i) q ∗ W v_i + β_i v_i`
/// with `β_i = σ(uᵀ [q ∗ W v_i; v_i])`. Returns the values and the gates.
pub fn qvi_gate_additive(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    values: Var,
    params: &AdditiveParams,
    gate_override: Option<f64>,
) -> Result<(Var, Var)> {
    check_feature_dim(g, "qvi_gate_additive", values, params.dim)?;
    check_feature_dim(g, "qvi_gate_additive", q, params.dim)?;
    let qb = broadcast_query(g, q, values)?;
    let m = interaction(g, store, qb, values, params)?;
    let mut gate_shape = g.shape(values).to_vec();
    *gate_shape.last_mut().unwrap() = 1;
    let beta = match gate_override {
        Some(b) => fixed_gate(g, &gate_shape, b),
        None => {
            let u = params.u.ok_or_else(|| {
                Error::Contract("gated values requested but u is not registered".into())
            })?;
            let u = g.param(store, u);
            let u = g.reshape(u, &[2 * params.dim, 1])?;
            let cat = g.concat_features(m, values)?;
            let z = g.matmul(cat, u)?;
            g.sigmoid(z)
        }
    };
    let out = gate_mix(g, m, values, beta)?;
    Ok((out, beta))
}

/// Value function `g(q, V)` of additive attention for the configured
/// variant. Returns the values and, for gated variants, the gates.
pub fn additive_value_fn(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    values: Var,
    cfg: &AttentionConfig,
    params: &AdditiveParams,
) -> Result<(Var, Option<Var>)> {
    match cfg.value_fn {
        ValueFn::Standard | ValueFn::ValuesOnly => Ok((values, None)),
        ValueFn::Qvi => {
            let (v, b) = qvi_gate_additive(g, store, q, values, params, cfg.gate_override)?;
            Ok((v, Some(b)))
        }
        ValueFn::InteractionsOnly | ValueFn::SimpleSum => {
            check_feature_dim(g, "additive_value_fn", values, params.dim)?;
            let qb = broadcast_query(g, q, values)?;
            let m = interaction(g, store, qb, values, params)?;
            if cfg.value_fn == ValueFn::SimpleSum {
                Ok((g.add(m, values)?, None))
            } else {
                Ok((m, None))
            }
        }
    }
}

/// Additive attention `ô = Σ_i α_i g(q, v_i)`.
///
/// `q` is `[d]` or `[B×d]`; when `None` the parameter query is used.
pub fn additive_attention(
    g: &mut Graph,
    store: &ParamStore,
    q: Option<Var>,
    values: Var,
    mask: Option<&Mask>,
    cfg: &AttentionConfig,
    params: &AdditiveParams,
) -> Result<AdditiveOutput> {
    let q = resolve_query(g, store, q, params);
    let weights = additive_scores(g, store, q, values, mask, params, cfg.score_fn)?;
    let (gvals, gate) = additive_value_fn(g, store, q, values, cfg, params)?;
    let output = additive_pool(g, weights, gvals)?;
    Ok(AdditiveOutput {
        output,
        weights,
        gate,
    })
}
