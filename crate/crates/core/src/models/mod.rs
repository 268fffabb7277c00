//! Classifiers built on the attention variants: an additive attention
//! pooling classifier and a transformer encoder classifier.

mod checkpoint;

pub use checkpoint::Checkpoint;

use crate::attention::{
    additive_attention, multi_head_self_attention, AdditiveParams, AttentionConfig, Form,
    MultiHeadParams, ValueFn,
};
use crate::config::{field, str_enum};
use crate::data::{Batch, BatchInput};
use crate::error::{Error, Result};
use crate::params::{glorot, normal, ParamId, ParamStore};
use crate::tensor::{gradcheck_with, Graph, GradcheckOptions, GradcheckReport, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeds the generator for interaction and gate parameters apart from the
/// main one, so value-function variants share every other parameter.
const QVI_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    AdditivePool,
    Transformer,
}

/// What the model consumes: token ids through an embedding table, or
/// per-sample query and value vectors fed to attention directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    Tokens,
    Vectors,
}

str_enum!(ModelKind, "model.kind", {
    "additive_pool" => ModelKind::AdditivePool,
    "transformer" => ModelKind::Transformer,
});
str_enum!(InputMode, "model.input", { "tokens" => InputMode::Tokens, "vectors" => InputMode::Vectors });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input: InputMode,
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub max_len: usize,
    /// Value function, score function and gate settings. Form, dimension
    /// and head count are derived from the fields above.
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::AdditivePool,
            input: InputMode::Tokens,
            vocab_size: 1000,
            d_model: 64,
            layers: 2,
            heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            dropout: 0.2,
            num_classes: 2,
            max_len: 128,
            attention: AttentionConfig::additive(64, ValueFn::Qvi),
        }
    }
}

impl ModelConfig {
    pub fn additive_pool(vocab_size: usize, d_model: usize, num_classes: usize, value_fn: ValueFn) -> Self {
        ModelConfig {
            kind: ModelKind::AdditivePool,
            vocab_size,
            d_model,
            num_classes,
            dropout: 0.0,
            attention: AttentionConfig::additive(d_model, value_fn),
            ..Default::default()
        }
    }

    pub fn transformer(
        vocab_size: usize,
        d_model: usize,
        layers: usize,
        heads: usize,
        num_classes: usize,
        value_fn: ValueFn,
    ) -> Self {
        ModelConfig {
            kind: ModelKind::Transformer,
            vocab_size,
            d_model,
            layers,
            heads,
            head_dim: d_model / heads.max(1),
            ffn_dim: 2 * d_model,
            num_classes,
            dropout: 0.0,
            attention: AttentionConfig::dot_product(d_model / heads.max(1), heads, value_fn),
            ..Default::default()
        }
    }

    /// Attention configuration with form, dimension and heads filled in.
    pub fn resolved_attention(&self) -> AttentionConfig {
        let mut a = self.attention.clone();
        match self.kind {
            ModelKind::AdditivePool => {
                a.form = Form::Additive;
                a.dim = self.d_model;
                a.heads = 1;
            }
            ModelKind::Transformer => {
                a.form = Form::DotProduct;
                a.dim = self.head_dim;
                a.heads = self.heads;
            }
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d_model", self.d_model),
            ("model.vocab_size", self.vocab_size),
            ("model.max_len", self.max_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.kind == ModelKind::Transformer {
            if self.input != InputMode::Tokens {
                return Err(Error::config("model.input", "the transformer reads tokens only"));
            }
            if self.heads == 0 || self.head_dim == 0 || self.heads * self.head_dim != self.d_model {
                return Err(Error::config(
                    "model.heads",
                    format!(
                        "heads ({}) × head_dim ({}) must equal d_model ({})",
                        self.heads, self.head_dim, self.d_model
                    ),
                ));
            }
            if self.layers > 0 && self.ffn_dim == 0 {
                return Err(Error::config("model.ffn_dim", "must be positive"));
            }
        }
        self.resolved_attention().validate()
    }

    /// Applies a `[model]` configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = format!("model.{key}");
        match key {
            "kind" => self.kind = field(&path, value)?,
            "input" => self.input = field(&path, value)?,
            "vocab_size" => self.vocab_size = field(&path, value)?,
            "d_model" => self.d_model = field(&path, value)?,
            "layers" => self.layers = field(&path, value)?,
            "heads" => self.heads = field(&path, value)?,
            "head_dim" => self.head_dim = field(&path, value)?,
            "ffn_dim" => self.ffn_dim = field(&path, value)?,
            "dropout" => self.dropout = field(&path, value)?,
            "num_classes" => self.num_classes = field(&path, value)?,
            "max_len" => self.max_len = field(&path, value)?,
            _ => return Err(Error::config(path, "unknown key")),
        }
        Ok(())
    }

    /// The `[model]` keys understood by [`ModelConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.to_string()),
            ("input", self.input.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("num_classes", self.num_classes.to_string()),
            ("max_len", self.max_len.to_string()),
        ]
    }
}

#[derive(Clone, Debug)]
struct Block {
    attention: MultiHeadParams,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// A classifier and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    embedding: Option<ParamId>,
    positions: Option<ParamId>,
    blocks: Vec<Block>,
    pool: Option<AdditiveParams>,
    classifier_w: ParamId,
    classifier_b: ParamId,
}

impl Model {
    /// Builds and initialises a model. Parameters are a pure function of
    /// `(config, seed)`.
    pub fn new(mut config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        config.attention = config.resolved_attention();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut qvi_rng = ChaCha8Rng::seed_from_u64(seed ^ QVI_SEED_SALT);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let attn = config.resolved_attention();

        let embedding = (config.input == InputMode::Tokens)
            .then(|| store.add("embedding", normal(&mut rng, &[config.vocab_size, d], 0.1)));
        let mut positions = None;
        let mut blocks = Vec::new();
        let mut pool = None;
        match config.kind {
            ModelKind::AdditivePool => {
                pool = Some(AdditiveParams::init(&mut store, "pool", &attn, &mut rng, &mut qvi_rng));
            }
            ModelKind::Transformer => {
                positions = Some(store.add("positions", normal(&mut rng, &[config.max_len, d], 0.1)));
                for l in 0..config.layers {
                    let p = format!("layer{l}");
                    let attention =
                        MultiHeadParams::init(&mut store, &format!("{p}.attn"), d, &attn, &mut rng, &mut qvi_rng)?;
                    let f = config.ffn_dim;
                    blocks.push(Block {
                        attention,
                        ln1_gain: store.add(format!("{p}.ln1.gain"), Tensor::ones(&[d])),
                        ln1_bias: store.add(format!("{p}.ln1.bias"), Tensor::zeros(&[d])),
                        ffn_w1: store.add(format!("{p}.ffn.w1"), glorot(&mut rng, d, f)),
                        ffn_b1: store.add(format!("{p}.ffn.b1"), Tensor::zeros(&[f])),
                        ffn_w2: store.add(format!("{p}.ffn.w2"), glorot(&mut rng, f, d)),
                        ffn_b2: store.add(format!("{p}.ffn.b2"), Tensor::zeros(&[d])),
                        ln2_gain: store.add(format!("{p}.ln2.gain"), Tensor::ones(&[d])),
                        ln2_bias: store.add(format!("{p}.ln2.bias"), Tensor::zeros(&[d])),
                    });
                }
            }
        }
        let classifier_w = store.add("classifier.w", glorot(&mut rng, d, config.num_classes));
        let classifier_b = store.add("classifier.b", Tensor::zeros(&[config.num_classes]));
        Ok(Model {
            config,
            store,
            embedding,
            positions,
            blocks,
            pool,
            classifier_w,
            classifier_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Logits `[B×C]` for `batch`. Dropout is active only when `dropout_rng`
    /// is given.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let b = batch.size;
        let n = batch.seq_len;
        let d = self.config.d_model;
        let (x, query) = match (&batch.input, self.config.input) {
            (BatchInput::Tokens(ids), InputMode::Tokens) => {
                let table = g.param(&self.store, self.embedding.expect("token model has an embedding"));
                (g.gather(table, ids, &[b, n])?, None)
            }
            (BatchInput::Vectors { query, values, dim }, InputMode::Vectors) => {
                if *dim != d {
                    return Err(Error::Data(format!("vectors have dim {dim}, model expects {d}")));
                }
                let v = g.constant(Tensor::new(vec![b, n, d], values.clone())?);
                let q = g.constant(Tensor::new(vec![b, d], query.clone())?);
                (v, Some(q))
            }
            _ => return Err(Error::Data("batch kind does not match the model input".into())),
        };
        let x = self.dropout(g, x, &mut dropout_rng)?;
        let pooled = match self.config.kind {
            ModelKind::AdditivePool => {
                let attn = self.config.resolved_attention();
                let pool = self.pool.as_ref().expect("pooling model has pool params");
                additive_attention(g, &self.store, query, x, Some(&batch.mask), &attn, pool)?.output
            }
            ModelKind::Transformer => self.encode(g, batch, x, &mut dropout_rng)?,
        };
        let w = g.param(&self.store, self.classifier_w);
        let bias = g.param(&self.store, self.classifier_b);
        let logits = g.matmul(pooled, w)?;
        g.add(logits, bias)
    }

    /// Positions, the block stack and masked mean pooling.
    fn encode(
        &self,
        g: &mut Graph,
        batch: &Batch,
        x: Var,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (b, n) = (batch.size, batch.seq_len);
        if n > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let table = g.param(&self.store, self.positions.expect("transformer has positions"));
        let idx: Vec<usize> = (0..n).collect();
        let pos = g.gather(table, &idx, &[n])?;
        let mut x = g.add(x, pos)?;
        let attn = self.config.resolved_attention();
        for block in &self.blocks {
            let a = multi_head_self_attention(g, &self.store, x, Some(&batch.mask), &attn, &block.attention)?;
            let a = self.dropout(g, a, dropout_rng)?;
            let r = g.add(x, a)?;
            let (gain, bias) = (g.param(&self.store, block.ln1_gain), g.param(&self.store, block.ln1_bias));
            x = g.layer_norm(r, gain, bias)?;

            let w1 = g.param(&self.store, block.ffn_w1);
            let b1 = g.param(&self.store, block.ffn_b1);
            let w2 = g.param(&self.store, block.ffn_w2);
            let b2 = g.param(&self.store, block.ffn_b2);
            let h = g.matmul(x, w1)?;
            let h = g.add(h, b1)?;
            let h = g.relu(h);
            let f = g.matmul(h, w2)?;
            let f = g.add(f, b2)?;
            let f = self.dropout(g, f, dropout_rng)?;
            let r = g.add(x, f)?;
            let (gain, bias) = (g.param(&self.store, block.ln2_gain), g.param(&self.store, block.ln2_bias));
            x = g.layer_norm(r, gain, bias)?;
        }

        let m = batch.mask.to_tensor().reshape(&[b, n, 1])?;
        let inv: Vec<f64> = batch
            .mask
            .data()
            .chunks(n)
            .map(|row| 1.0 / row.iter().filter(|&&k| k).count().max(1) as f64)
            .collect();
        let m = g.constant(m);
        let masked = g.mul(x, m)?;
        let summed = g.sum(masked, 1)?;
        let inv = g.constant(Tensor::new(vec![b, 1], inv)?);
        g.mul(summed, inv)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.config.dropout;
        match rng {
            Some(r) if rate > 0.0 => {
                let keep: Vec<bool> = (0..g.value(x).len()).map(|_| r.gen::<f64>() >= rate).collect();
                g.dropout_with(x, &keep, rate)
            }
            _ => Ok(x),
        }
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, None)?;
        Ok(g.value(out).clone())
    }

    /// Arg-max class per sample, lowest index on ties.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let c = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Finite-difference check of the evaluation-mode cross-entropy on
    /// `batch` with respect to every parameter.
    pub fn gradcheck(&self, batch: &Batch, opts: GradcheckOptions) -> Result<GradcheckReport> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        let inputs: Vec<Tensor> = ids.iter().map(|&id| self.store.get(id).clone()).collect();
        gradcheck_with(
            |g, vars| {
                for (&id, &v) in ids.iter().zip(vars) {
                    g.bind_param(&self.store, id, v);
                }
                let out = self.forward(g, batch, None)?;
                g.cross_entropy(out, &batch.labels)
            },
            &inputs,
            opts,
        )
    }

    /// Distance of the nearest ReLU input from zero in the evaluation-mode
    /// forward pass on `batch`; `None` when the model has no ReLU.
    pub fn kink_margin(&self, batch: &Batch) -> Result<Option<f64>> {
        let mut g = Graph::new();
        self.forward(&mut g, batch, None)?;
        Ok(g.kink_margin())
    }

    /// Mean cross-entropy of the evaluation-mode logits.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, None)?;
        let loss = g.cross_entropy(out, &batch.labels)?;
        Ok(g.value(loss).item())
    }
}
