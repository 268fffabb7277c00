use super::{qvi_dot_attention, AttentionConfig, DotGateParams};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::{Graph, Mask, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub query_proj: ParamId,
    pub key_proj: ParamId,
    pub value_proj: ParamId,
    pub gate: DotGateParams,
}

/// Per-head projections plus the shared output projection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadParams {
    pub d_model: usize,
    pub head_dim: usize,
    pub heads: Vec<HeadParams>,
    pub output_proj: ParamId,
}

impl MultiHeadParams {
    /// `cfg.dim` is the per-head dimension; `cfg.heads × cfg.dim` must
    /// equal `d_model`.
    pub fn init<R: Rng, Q: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        cfg: &AttentionConfig,
        rng: &mut R,
        qvi_rng: &mut Q,
    ) -> Result<Self> {
        if cfg.heads * cfg.dim != d_model {
            return Err(Error::config(
                "model.heads",
                format!("{} heads of dim {} do not make d_model {d_model}", cfg.heads, cfg.dim),
            ));
        }
        let dh = cfg.dim;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            heads.push(HeadParams {
                query_proj: store.add(format!("{prefix}.h{h}.q"), glorot(rng, d_model, dh)),
                key_proj: store.add(format!("{prefix}.h{h}.k"), glorot(rng, d_model, dh)),
                value_proj: store.add(format!("{prefix}.h{h}.v"), glorot(rng, d_model, dh)),
                gate: DotGateParams::none(dh),
            });
        }
        let output_proj = store.add(format!("{prefix}.out"), glorot(rng, cfg.heads * dh, d_model));
        for (h, head) in heads.iter_mut().enumerate() {
            head.gate = DotGateParams::init(store, &format!("{prefix}.h{h}"), dh, cfg.value_fn, qvi_rng);
        }
        Ok(MultiHeadParams {
            d_model,
            head_dim: dh,
            heads,
            output_proj,
        })
    }
}

/// Multi-head self-attention with the configured value function applied
/// independently in every head.
///
/// `x` is `[N×d_model]` or `[B×N×d_model]`; `mask` marks real positions
/// (`[N]` or `[B×N]`) and applies both to keys and to queries entering `Q̂`.
pub fn multi_head_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    mask: Option<&Mask>,
    cfg: &AttentionConfig,
    params: &MultiHeadParams,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.last() != Some(&params.d_model) || !(2..=3).contains(&xs.len()) {
        return Err(Error::dim(
            "multi_head_self_attention",
            format!("expected [..×{}], got {xs:?}", params.d_model),
        ));
    }
    let mut merged: Option<Var> = None;
    for head in &params.heads {
        let pq = g.param(store, head.query_proj);
        let pk = g.param(store, head.key_proj);
        let pv = g.param(store, head.value_proj);
        let q = g.matmul(x, pq)?;
        let k = g.matmul(x, pk)?;
        let v = g.matmul(x, pv)?;
        let out = qvi_dot_attention(g, store, q, k, v, mask, mask, cfg, &head.gate)?.output;
        merged = Some(match merged {
            None => out,
            Some(prev) => g.concat_features(prev, out)?,
        });
    }
    let merged = merged.ok_or_else(|| Error::Contract("attention needs at least one head".into()))?;
    let po = g.param(store, params.output_proj);
    g.matmul(merged, po)
}
