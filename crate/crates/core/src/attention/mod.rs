//! Attention variants: additive and scaled dot-product attention, their
//! query-value interaction (QVI) forms, and the ablation value functions.
//!
//! Every attention here computes `O = f(Q, K) · g(Q, V)`. The weighting
//! `f` is the usual softmax over query-key scores. The value function `g`
//! is selected by [`ValueFn`]:
//!
//! | variant             | `g(Q, V)`                         |
//! |---------------------|-----------------------------------|
//! | `standard`          | `V`                               |
//! | `values_only`       | `V`                               |
//! | `interactions_only` | `Q ∗ WV`                          |
//! | `simple_sum`        | `Q ∗ WV + V`                      |
//! | `qvi`               | `(1 − β) Q ∗ WV + β V`, gated     |
//!
//! For additive attention `Q` is the single query vector broadcast over
//! the values. For dot-product attention it is the value-aligned
//! transformed query sequence `Q̂ = softmax(VQᵀ/√d) Q`.
//!
//! Inputs may be a single sequence (`V: [N×d]`) or a batch
//! (`V: [B×N×d]`); masks mark real positions with `true`.

mod additive;
mod dot;
mod multihead;

pub use additive::{
    additive_attention, additive_pool, additive_scores, additive_value_fn, qvi_gate_additive,
    AdditiveOutput, AdditiveParams, MlpScore,
};
pub use dot::{
    dot_attention, dot_value_fn, qvi_dot_attention, qvi_gate_dot, transformed_queries,
    DotGateParams, DotOutput,
};
pub use multihead::{multi_head_self_attention, HeadParams, MultiHeadParams};

use crate::config::{field, str_enum};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Form {
    Additive,
    DotProduct,
}

/// Choice of `g(Q, V)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueFn {
    Standard,
    Qvi,
    ValuesOnly,
    InteractionsOnly,
    SimpleSum,
}

impl ValueFn {
    pub const ALL: [ValueFn; 5] = [
        ValueFn::Standard,
        ValueFn::Qvi,
        ValueFn::ValuesOnly,
        ValueFn::InteractionsOnly,
        ValueFn::SimpleSum,
    ];

    /// Whether the variant owns an interaction matrix `W`.
    pub fn uses_interaction(self) -> bool {
        matches!(
            self,
            ValueFn::Qvi | ValueFn::InteractionsOnly | ValueFn::SimpleSum
        )
    }

    /// Whether the variant owns gate parameters.
    pub fn is_gated(self) -> bool {
        self == ValueFn::Qvi
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValueFn::Standard => "standard",
            ValueFn::Qvi => "qvi",
            ValueFn::ValuesOnly => "values_only",
            ValueFn::InteractionsOnly => "interactions_only",
            ValueFn::SimpleSum => "simple_sum",
        }
    }
}

/// How the dot-product QVI gate is shaped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateMode {
    /// One gate per value row.
    PerPosition,
    /// One gate per sequence from the masked mean of the per-row scores.
    Scalar,
}

/// Score function `h(q, v)` of additive attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreFn {
    /// `q · v`
    Dot,
    /// `q · tanh(S v + b)`
    Mlp,
}

str_enum!(Form, "form", { "additive" => Form::Additive, "dot_product" => Form::DotProduct });
str_enum!(ValueFn, "value_fn", {
    "standard" => ValueFn::Standard,
    "qvi" => ValueFn::Qvi,
    "values_only" => ValueFn::ValuesOnly,
    "interactions_only" => ValueFn::InteractionsOnly,
    "simple_sum" => ValueFn::SimpleSum,
});
str_enum!(GateMode, "gate_mode", { "per_position" => GateMode::PerPosition, "scalar" => GateMode::Scalar });
str_enum!(ScoreFn, "score_fn", { "dot" => ScoreFn::Dot, "mlp" => ScoreFn::Mlp });

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub form: Form,
    pub value_fn: ValueFn,
    /// Only read by dot-product QVI.
    pub gate_mode: GateMode,
    /// Only read by additive attention.
    pub score_fn: ScoreFn,
    /// Feature dimension `d` (per head for dot-product attention).
    pub dim: usize,
    /// Number of heads; dot-product attention only.
    pub heads: usize,
    /// Forces every gate to this value, bypassing the learned gate. A test
    /// hook; training configurations reject it.
    pub gate_override: Option<f64>,
}

impl AttentionConfig {
    pub fn additive(dim: usize, value_fn: ValueFn) -> Self {
        AttentionConfig {
            form: Form::Additive,
            value_fn,
            gate_mode: GateMode::PerPosition,
            score_fn: ScoreFn::Dot,
            dim,
            heads: 1,
            gate_override: None,
        }
    }

    pub fn dot_product(dim: usize, heads: usize, value_fn: ValueFn) -> Self {
        AttentionConfig {
            form: Form::DotProduct,
            value_fn,
            gate_mode: GateMode::PerPosition,
            score_fn: ScoreFn::Dot,
            dim,
            heads,
            gate_override: None,
        }
    }

    pub fn with_gate_override(mut self, beta: f64) -> Self {
        self.gate_override = Some(beta);
        self
    }

    pub fn with_gate_mode(mut self, mode: GateMode) -> Self {
        self.gate_mode = mode;
        self
    }

    pub fn with_score_fn(mut self, score_fn: ScoreFn) -> Self {
        self.score_fn = score_fn;
        self
    }

    /// Applies an `[attention]` configuration key. The form, dimension and
    /// head count are owned by the model configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = format!("attention.{key}");
        match key {
            "value_fn" => self.value_fn = field(&path, value)?,
            "score_fn" => self.score_fn = field(&path, value)?,
            "gate_mode" => self.gate_mode = field(&path, value)?,
            "gate_override" => {
                self.gate_override = match value {
                    "none" | "" => None,
                    v => Some(field(&path, v)?),
                }
            }
            _ => return Err(Error::config(path, "unknown key")),
        }
        Ok(())
    }

    /// The `[attention]` keys understood by [`AttentionConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut kv = vec![
            ("value_fn", self.value_fn.to_string()),
            ("score_fn", self.score_fn.to_string()),
            ("gate_mode", self.gate_mode.to_string()),
        ];
        if let Some(b) = self.gate_override {
            kv.push(("gate_override", format!("{b:?}")));
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("attention.dim", "must be positive"));
        }
        if self.heads == 0 {
            return Err(Error::config("attention.heads", "must be positive"));
        }
        if let Some(b) = self.gate_override {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::config("attention.gate_override", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// The gated combination `(1 − β) ∗ interaction + β ∗ values`, with `β`
/// broadcasting over the feature axis.
fn gate_mix(g: &mut Graph, interaction: Var, values: Var, beta: Var) -> Result<Var> {
    let keep = g.affine(beta, -1.0, 1.0);
    let a = g.mul(interaction, keep)?;
    let b = g.mul(values, beta)?;
    g.add(a, b)
}

/// A constant gate of the given shape.
fn fixed_gate(g: &mut Graph, shape: &[usize], beta: f64) -> Var {
    g.constant(Tensor::full(shape, beta))
}

/// `V · Wᵀ`, i.e. `W v` for every value row.
fn project_rows(g: &mut Graph, values: Var, w: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    g.matmul(values, wt)
}

fn check_feature_dim(g: &Graph, op: &'static str, v: Var, d: usize) -> Result<()> {
    let s = g.shape(v);
    if s.last() != Some(&d) {
        return Err(Error::dim(op, format!("expected feature dim {d}, got {s:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
