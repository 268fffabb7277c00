use super::{check_feature_dim, fixed_gate, gate_mix, project_rows, AttentionConfig, GateMode, ValueFn};
use crate::error::{Error, Result};
use crate::params::{near_identity, ParamId, ParamStore};
use crate::tensor::{Graph, Mask, Tensor, Var};
use rand::Rng;

/// Interaction parameters of one dot-product attention head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DotGateParams {
    pub dim: usize,
    /// Square interaction map `W` (`d×d`).
    pub w: Option<ParamId>,
    /// Gate projection over `[Q̂ ∗ WV; V]` (`2d`).
    pub h_gate: Option<ParamId>,
}

impl DotGateParams {
    pub fn init<Q: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        value_fn: ValueFn,
        qvi_rng: &mut Q,
    ) -> Self {
        let w = value_fn
            .uses_interaction()
            .then(|| store.add(format!("{prefix}.qvi_w"), near_identity(qvi_rng, dim, 0.01)));
        let h_gate = value_fn
            .is_gated()
            .then(|| store.add(format!("{prefix}.qvi_h"), Tensor::zeros(&[2 * dim])));
        DotGateParams { dim, w, h_gate }
    }

    /// A parameterless head for the standard value function.
    pub fn none(dim: usize) -> Self {
        DotGateParams {
            dim,
            w: None,
            h_gate: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DotOutput {
    /// `[n_q×d]` or `[B×n_q×d]`.
    pub output: Var,
    /// Softmax weights over keys, `[n_q×N]` or `[B×n_q×N]`.
    pub weights: Var,
    pub gate: Option<Var>,
}

/// Expands a `[N]`/`[B×N]` column mask into the score layout
/// `[rows×N]`/`[B×rows×N]`.
fn score_mask(mask: Option<&Mask>, rank: usize, rows: usize) -> Result<Option<Mask>> {
    let Some(m) = mask else { return Ok(None) };
    let expanded = m.expand_rows(rows)?;
    if rank == 2 {
        let n = *m.shape().last().unwrap();
        Ok(Some(expanded.reshape(&[rows, n])?))
    } else {
        Ok(Some(expanded))
    }
}

fn check_same_layout(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    let ok = sa.len() == sb.len()
        && (sa.len() == 2 || (sa.len() == 3 && sa[0] == sb[0]))
        && sa.last() == sb.last();
    if !ok {
        return Err(Error::dim(op, format!("incompatible {sa:?} and {sb:?}")));
    }
    Ok(())
}

/// `softmax(A Bᵀ / √d)` with an optional mask over the rows of `B`.
fn scaled_scores(g: &mut Graph, a: Var, b: Var, mask: Option<&Mask>) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let d = *s.last().unwrap();
    let rows = s[s.len() - 2];
    let bt = g.transpose(b)?;
    let raw = g.matmul(a, bt)?;
    let scaled = g.scale(raw, 1.0 / (d as f64).sqrt());
    let m = score_mask(mask, s.len(), rows)?;
    g.row_softmax(scaled, m.as_ref())
}

/// Scaled dot-product attention `O = softmax(QKᵀ/√d) V`.
pub fn dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&Mask>,
) -> Result<DotOutput> {
    check_same_layout(g, "dot_attention", q, k)?;
    check_same_layout(g, "dot_attention", k, v)?;
    if g.shape(k) != g.shape(v) {
        return Err(Error::dim(
            "dot_attention",
            format!("keys {:?} and values {:?} differ", g.shape(k), g.shape(v)),
        ));
    }
    let weights = scaled_scores(g, q, k, key_mask)?;
    let output = g.matmul(weights, v)?;
    Ok(DotOutput {
        output,
        weights,
        gate: None,
    })
}

/// Value-aligned transformed queries `Q̂ = softmax(VQᵀ/√d) Q`: one row per
/// value, each a convex combination of the (unmasked) query rows.
pub fn transformed_queries(g: &mut Graph, q: Var, v: Var, query_mask: Option<&Mask>) -> Result<Var> {
    check_same_layout(g, "transformed_queries", q, v)?;
    let weights = scaled_scores(g, v, q, query_mask)?;
    g.matmul(weights, q)
}

/// The interaction term `Q̂ ∗ WV`.
fn interaction(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    v: Var,
    params: &DotGateParams,
    query_mask: Option<&Mask>,
) -> Result<Var> {
    check_feature_dim(g, "qvi_gate_dot", v, params.dim)?;
    let w = params
        .w
        .ok_or_else(|| Error::Contract("interaction requested but W is not registered".into()))?;
    let qhat = transformed_queries(g, q, v, query_mask)?;
    let w = g.param(store, w);
    let wv = project_rows(g, v, w)?;
    g.mul(qhat, wv)
}

/// Gated query-aware values `(1 − β) Q̂ ∗ WV + β V`.
///
/// In per-position mode `β_i = σ([M_i; V_i] · h)` for `M = Q̂ ∗ WV`. In
/// scalar mode one gate per sequence, `σ` of the masked row mean of the
/// same scores.
#[allow(clippy::too_many_arguments)]
pub fn qvi_gate_dot(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    v: Var,
    params: &DotGateParams,
    gate_mode: GateMode,
    gate_override: Option<f64>,
    query_mask: Option<&Mask>,
    value_mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let m = interaction(g, store, q, v, params, query_mask)?;
    let vs = g.shape(v).to_vec();
    let rank = vs.len();
    let gate_shape: Vec<usize> = match gate_mode {
        GateMode::PerPosition => {
            let mut s = vs.clone();
            s[rank - 1] = 1;
            s
        }
        GateMode::Scalar if rank == 3 => vec![vs[0], 1, 1],
        GateMode::Scalar => vec![1, 1],
    };
    let beta = if let Some(b) = gate_override {
        fixed_gate(g, &gate_shape, b)
    } else {
        let h = params.h_gate.ok_or_else(|| {
            Error::Contract("gated values requested but h_gate is not registered".into())
        })?;
        let h = g.param(store, h);
        let h = g.reshape(h, &[2 * params.dim, 1])?;
        let cat = g.concat_features(m, v)?;
        let z = g.matmul(cat, h)?;
        let z = match gate_mode {
            GateMode::PerPosition => z,
            GateMode::Scalar => masked_row_mean(g, z, value_mask, &gate_shape)?,
        };
        g.sigmoid(z)
    };
    let out = gate_mix(g, m, v, beta)?;
    Ok((out, beta))
}

/// Mean of `[..×N×1]` scores over the unmasked rows, shaped `out_shape`.
fn masked_row_mean(g: &mut Graph, z: Var, mask: Option<&Mask>, out_shape: &[usize]) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    let n = zs[zs.len() - 2];
    let batch: usize = zs[..zs.len() - 2].iter().product();
    let keep: Vec<bool> = match mask {
        Some(m) if m.data().len() == batch * n => m.data().to_vec(),
        Some(m) => {
            return Err(Error::dim(
                "qvi_gate_dot",
                format!("value mask {:?} does not fit {zs:?}", m.shape()),
            ))
        }
        None => vec![true; batch * n],
    };
    let mut weights = Vec::with_capacity(batch * n);
    for b in 0..batch {
        let row = &keep[b * n..(b + 1) * n];
        let count = row.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::DegenerateMask {
                op: "qvi_gate_dot",
                row: b,
            });
        }
        let w = 1.0 / count as f64;
        weights.extend(row.iter().map(|&k| if k { w } else { 0.0 }));
    }
    let wt = g.constant(Tensor::new(zs.clone(), weights)?);
    let weighted = g.mul(z, wt)?;
    let summed = g.sum(weighted, zs.len() - 2)?;
    g.reshape(summed, out_shape)
}

/// Value function `g(Q, V)` of dot-product attention for the configured
/// variant. For the ablations the query is read as `Q̂`, the form that is
/// row-aligned with `V`.
#[allow(clippy::too_many_arguments)]
pub fn dot_value_fn(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    v: Var,
    cfg: &AttentionConfig,
    params: &DotGateParams,
    query_mask: Option<&Mask>,
    value_mask: Option<&Mask>,
) -> Result<(Var, Option<Var>)> {
    match cfg.value_fn {
        ValueFn::Standard | ValueFn::ValuesOnly => Ok((v, None)),
        ValueFn::Qvi => {
            let (out, beta) = qvi_gate_dot(
                g,
                store,
                q,
                v,
                params,
                cfg.gate_mode,
                cfg.gate_override,
                query_mask,
                value_mask,
            )?;
            Ok((out, Some(beta)))
        }
        ValueFn::InteractionsOnly | ValueFn::SimpleSum => {
            let m = interaction(g, store, q, v, params, query_mask)?;
            if cfg.value_fn == ValueFn::SimpleSum {
                Ok((g.add(m, v)?, None))
            } else {
                Ok((m, None))
            }
        }
    }
}

/// Dot-product attention with query-value interactions,
/// `Ô = softmax(QKᵀ/√d) g(Q, V)`.
///
/// `key_mask` marks real key/value rows; `query_mask` marks real query
/// rows and keeps padded queries out of `Q̂`.
#[allow(clippy::too_many_arguments)]
pub fn qvi_dot_attention(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&Mask>,
    query_mask: Option<&Mask>,
    cfg: &AttentionConfig,
    params: &DotGateParams,
) -> Result<DotOutput> {
    check_same_layout(g, "qvi_dot_attention", q, k)?;
    if g.shape(k) != g.shape(v) {
        return Err(Error::dim(
            "qvi_dot_attention",
            format!("keys {:?} and values {:?} differ", g.shape(k), g.shape(v)),
        ));
    }
    let weights = scaled_scores(g, q, k, key_mask)?;
    let (gvals, gate) = dot_value_fn(g, store, q, v, cfg, params, query_mask, key_mask)?;
    let output = g.matmul(weights, gvals)?;
    Ok(DotOutput {
        output,
        weights,
        gate,
    })
}
