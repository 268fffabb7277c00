//! Scalar-loop reference implementations of the attention equations and
//! helpers that run the library and the reference side by side.
#![allow(dead_code)]

use qvi::attention::{
    additive_attention, additive_value_fn, dot_value_fn, multi_head_self_attention, qvi_dot_attention,
    transformed_queries, AdditiveParams, AttentionConfig, DotGateParams, GateMode, MultiHeadParams, ScoreFn,
    ValueFn,
};
use qvi::{Graph, Mask, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

// ---------------------------------------------------------------------------
// Loop oracles
// ---------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `(W v)_r = Σ_c W[r][c] v[c]` for a row-major square `W`.
pub fn matvec(w: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for r in 0..d {
        for c in 0..d {
            out[r] += w[r * d + c] * v[c];
        }
    }
    out
}

/// Softmax over the kept entries; dropped entries get exactly zero.
pub fn softmax(scores: &[f64], keep: &[bool]) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for i in 0..scores.len() {
        if keep[i] && scores[i] > mx {
            mx = scores[i];
        }
    }
    let mut z = 0.0;
    let mut out = vec![0.0; scores.len()];
    for i in 0..scores.len() {
        if keep[i] {
            out[i] = (scores[i] - mx).exp();
            z += out[i];
        }
    }
    for o in &mut out {
        *o /= z;
    }
    out
}

/// Parameters of one additive attention site in plain arrays.
#[derive(Clone, Debug)]
pub struct AdditiveRef {
    pub score: Option<(Vec<f64>, Vec<f64>)>,
    pub w: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
}

/// `h(q, v)`: `q·v`, or `q·tanh(S v + b)`.
pub fn additive_score(q: &[f64], v: &[f64], p: &AdditiveRef) -> f64 {
    match &p.score {
        None => dot(q, v),
        Some((s, b)) => {
            let sv = matvec(s, v);
            let mut acc = 0.0;
            for r in 0..q.len() {
                acc += q[r] * (sv[r] + b[r]).tanh();
            }
            acc
        }
    }
}

pub fn additive_weights(q: &[f64], values: &Rows, keep: &[bool], p: &AdditiveRef) -> Vec<f64> {
    let scores: Vec<f64> = values.iter().map(|v| additive_score(q, v, p)).collect();
    softmax(&scores, keep)
}

/// `g(q, v_i)` for every value row, plus the gates when gated.
pub fn additive_values(vf: ValueFn, q: &[f64], values: &Rows, p: &AdditiveRef, beta: Option<f64>) -> (Rows, Vec<f64>) {
    let d = q.len();
    let mut out = Vec::new();
    let mut gates = Vec::new();
    for v in values {
        let m: Vec<f64> = match &p.w {
            Some(w) => {
                let wv = matvec(w, v);
                (0..d).map(|k| q[k] * wv[k]).collect()
            }
            None => vec![0.0; d],
        };
        let row = match vf {
            ValueFn::Standard | ValueFn::ValuesOnly => v.clone(),
            ValueFn::InteractionsOnly => m,
            ValueFn::SimpleSum => (0..d).map(|k| m[k] + v[k]).collect(),
            ValueFn::Qvi => {
                let b = beta.unwrap_or_else(|| {
                    let u = p.u.as_ref().unwrap();
                    let mut z = 0.0;
                    for k in 0..d {
                        z += u[k] * m[k] + u[d + k] * v[k];
                    }
                    sigmoid(z)
                });
                gates.push(b);
                (0..d).map(|k| (1.0 - b) * m[k] + b * v[k]).collect()
            }
        };
        out.push(row);
    }
    (out, gates)
}

/// `Σ_i α_i g(q, v_i)`.
pub fn additive_output(
    vf: ValueFn,
    q: &[f64],
    values: &Rows,
    keep: &[bool],
    p: &AdditiveRef,
    beta: Option<f64>,
) -> Vec<f64> {
    let alpha = additive_weights(q, values, keep, p);
    let (g, _) = additive_values(vf, q, values, p, beta);
    let mut o = vec![0.0; q.len()];
    for i in 0..values.len() {
        for k in 0..q.len() {
            o[k] += alpha[i] * g[i][k];
        }
    }
    o
}

/// `softmax(A Bᵀ/√d)` with a mask over the rows of `B`.
pub fn scaled_weights(a: &Rows, b: &Rows, keep_b: &[bool]) -> Rows {
    let d = a[0].len() as f64;
    a.iter()
        .map(|ai| {
            let s: Vec<f64> = b.iter().map(|bj| dot(ai, bj) / d.sqrt()).collect();
            softmax(&s, keep_b)
        })
        .collect()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let cols = b[0].len();
    a.iter()
        .map(|ai| {
            let mut row = vec![0.0; cols];
            for j in 0..b.len() {
                for k in 0..cols {
                    row[k] += ai[j] * b[j][k];
                }
            }
            row
        })
        .collect()
}

/// `Q̂ = softmax(VQᵀ/√d) Q`.
pub fn qhat(q: &Rows, v: &Rows, keep_q: &[bool]) -> Rows {
    matmul(&scaled_weights(v, q, keep_q), q)
}

#[derive(Clone, Debug)]
pub struct DotRef {
    pub w: Option<Vec<f64>>,
    pub h: Option<Vec<f64>>,
}

/// Dot-product value function rows and gates.
#[allow(clippy::too_many_arguments)]
pub fn dot_values(
    vf: ValueFn,
    mode: GateMode,
    q: &Rows,
    v: &Rows,
    keep_q: &[bool],
    keep_v: &[bool],
    p: &DotRef,
    beta: Option<f64>,
) -> (Rows, Vec<f64>) {
    let d = v[0].len();
    let qh = qhat(q, v, keep_q);
    let m: Rows = (0..v.len())
        .map(|i| match &p.w {
            Some(w) => {
                let wv = matvec(w, &v[i]);
                (0..d).map(|k| qh[i][k] * wv[k]).collect()
            }
            None => vec![0.0; d],
        })
        .collect();
    match vf {
        ValueFn::Standard | ValueFn::ValuesOnly => (v.clone(), vec![]),
        ValueFn::InteractionsOnly => (m, vec![]),
        ValueFn::SimpleSum => ((0..v.len()).map(|i| (0..d).map(|k| m[i][k] + v[i][k]).collect()).collect(), vec![]),
        ValueFn::Qvi => {
            let gates: Vec<f64> = match beta {
                Some(b) => vec![b; v.len()],
                None => {
                    let h = p.h.as_ref().unwrap();
                    let z: Vec<f64> = (0..v.len())
                        .map(|i| {
                            let mut s = 0.0;
                            for k in 0..d {
                                s += h[k] * m[i][k] + h[d + k] * v[i][k];
                            }
                            s
                        })
                        .collect();
                    match mode {
                        GateMode::PerPosition => z.iter().map(|&x| sigmoid(x)).collect(),
                        GateMode::Scalar => {
                            let (mut s, mut c) = (0.0, 0.0);
                            for i in 0..v.len() {
                                if keep_v[i] {
                                    s += z[i];
                                    c += 1.0;
                                }
                            }
                            vec![sigmoid(s / c); v.len()]
                        }
                    }
                }
            };
            let rows = (0..v.len())
                .map(|i| (0..d).map(|k| (1.0 - gates[i]) * m[i][k] + gates[i] * v[i][k]).collect())
                .collect();
            (rows, gates)
        }
    }
}

/// `softmax(QKᵀ/√d) g(Q, V)`.
#[allow(clippy::too_many_arguments)]
pub fn dot_output(
    vf: ValueFn,
    mode: GateMode,
    q: &Rows,
    k: &Rows,
    v: &Rows,
    keep_q: &[bool],
    keep_k: &[bool],
    p: &DotRef,
    beta: Option<f64>,
) -> Rows {
    let (g, _) = dot_values(vf, mode, q, v, keep_q, keep_k, p, beta);
    matmul(&scaled_weights(q, k, keep_k), &g)
}

// ---------------------------------------------------------------------------
// Random instances run through both implementations
// ---------------------------------------------------------------------------

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| uniform(rng, d)).collect()
}

pub fn flatten(r: &Rows) -> Vec<f64> {
    r.iter().flatten().copied().collect()
}

pub fn tensor(r: &Rows) -> Tensor {
    Tensor::new(vec![r.len(), r[0].len()], flatten(r)).unwrap()
}

/// A mask over `n` positions with at least one kept entry.
pub fn random_keep(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.75)).collect();
    let i = rng.gen_range(0..n);
    keep[i] = true;
    keep
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        store.set(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

fn data_of(store: &ParamStore, id: Option<ParamId>) -> Option<Vec<f64>> {
    id.map(|i| store.get(i).data().to_vec())
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One additive-attention instance with the library and oracle outputs.
pub struct AdditiveCase {
    pub cfg: AttentionConfig,
    pub store: ParamStore,
    pub params: AdditiveParams,
    pub q: Vec<f64>,
    pub values: Rows,
    pub keep: Vec<bool>,
}

impl AdditiveCase {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, d: usize, vf: ValueFn, score_fn: ScoreFn) -> Self {
        let cfg = AttentionConfig::additive(d, vf).with_score_fn(score_fn);
        let mut store = ParamStore::new();
        let mut qrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let params = AdditiveParams::init(&mut store, "a", &cfg, rng, &mut qrng);
        randomize(&mut store, rng, 1.0);
        let q = uniform(rng, d);
        let values = rows(rng, n, d);
        let keep = random_keep(rng, n);
        AdditiveCase {
            cfg,
            store,
            params,
            q,
            values,
            keep,
        }
    }

    pub fn reference(&self) -> AdditiveRef {
        AdditiveRef {
            score: self.params.score.map(|s| {
                (self.store.get(s.weight).data().to_vec(), self.store.get(s.bias).data().to_vec())
            }),
            w: data_of(&self.store, self.params.w),
            u: data_of(&self.store, self.params.u),
        }
    }

    fn mask(&self) -> Mask {
        Mask::new(vec![self.keep.len()], self.keep.clone()).unwrap()
    }

    /// Library output, weights and gates for `cfg`.
    pub fn run(&self, cfg: &AttentionConfig) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
        let mut g = Graph::new();
        let q = g.constant(Tensor::vector(self.q.clone()));
        let v = g.constant(tensor(&self.values));
        let out = additive_attention(&mut g, &self.store, Some(q), v, Some(&self.mask()), cfg, &self.params).unwrap();
        (
            g.value(out.output).data().to_vec(),
            g.value(out.weights).data().to_vec(),
            out.gate.map(|b| g.value(b).data().to_vec()),
        )
    }

    /// Library `g(q, V)` rows, flattened.
    pub fn value_fn(&self, vf: ValueFn) -> Vec<f64> {
        let mut cfg = self.cfg.clone();
        cfg.value_fn = vf;
        self.value_fn_with(&cfg)
    }

    pub fn value_fn_with(&self, cfg: &AttentionConfig) -> Vec<f64> {
        let mut g = Graph::new();
        let q = g.constant(Tensor::vector(self.q.clone()));
        let v = g.constant(tensor(&self.values));
        let (gv, _) = additive_value_fn(&mut g, &self.store, q, v, cfg, &self.params).unwrap();
        g.value(gv).data().to_vec()
    }
}

/// One dot-product attention instance.
pub struct DotCase {
    pub cfg: AttentionConfig,
    pub store: ParamStore,
    pub params: DotGateParams,
    pub q: Rows,
    pub k: Rows,
    pub v: Rows,
    pub keep_q: Vec<bool>,
    pub keep_k: Vec<bool>,
}

impl DotCase {
    pub fn random(rng: &mut ChaCha8Rng, nq: usize, n: usize, d: usize, vf: ValueFn, mode: GateMode) -> Self {
        let cfg = AttentionConfig::dot_product(d, 1, vf).with_gate_mode(mode);
        let mut store = ParamStore::new();
        let params = DotGateParams::init(&mut store, "h", d, vf, rng);
        randomize(&mut store, rng, 1.0);
        DotCase {
            cfg,
            store,
            params,
            q: rows(rng, nq, d),
            k: rows(rng, n, d),
            v: rows(rng, n, d),
            keep_q: random_keep(rng, nq),
            keep_k: random_keep(rng, n),
        }
    }

    pub fn reference(&self) -> DotRef {
        DotRef {
            w: data_of(&self.store, self.params.w),
            h: data_of(&self.store, self.params.h_gate),
        }
    }

    fn masks(&self) -> (Mask, Mask) {
        (
            Mask::new(vec![self.keep_q.len()], self.keep_q.clone()).unwrap(),
            Mask::new(vec![self.keep_k.len()], self.keep_k.clone()).unwrap(),
        )
    }

    /// Library output and weights for `cfg`.
    pub fn run(&self, cfg: &AttentionConfig) -> (Vec<f64>, Vec<f64>) {
        let (mq, mk) = self.masks();
        let mut g = Graph::new();
        let q = g.constant(tensor(&self.q));
        let k = g.constant(tensor(&self.k));
        let v = g.constant(tensor(&self.v));
        let out = qvi_dot_attention(&mut g, &self.store, q, k, v, Some(&mk), Some(&mq), cfg, &self.params).unwrap();
        (g.value(out.output).data().to_vec(), g.value(out.weights).data().to_vec())
    }

    pub fn value_fn(&self, vf: ValueFn) -> Vec<f64> {
        let (mq, mk) = self.masks();
        let mut cfg = self.cfg.clone();
        cfg.value_fn = vf;
        let mut g = Graph::new();
        let q = g.constant(tensor(&self.q));
        let v = g.constant(tensor(&self.v));
        let (gv, _) = dot_value_fn(&mut g, &self.store, q, v, &cfg, &self.params, Some(&mq), Some(&mk)).unwrap();
        g.value(gv).data().to_vec()
    }

    /// Library `Q̂`.
    pub fn qhat(&self) -> Vec<f64> {
        let (mq, _) = self.masks();
        let mut g = Graph::new();
        let q = g.constant(tensor(&self.q));
        let v = g.constant(tensor(&self.v));
        let r = transformed_queries(&mut g, q, v, Some(&mq)).unwrap();
        g.value(r).data().to_vec()
    }
}

/// Single-layer multi-head self-attention: library vs. loop oracle.
pub fn multi_head_pair(rng: &mut ChaCha8Rng, n: usize, heads: usize, dh: usize, vf: ValueFn) -> (Vec<f64>, Vec<f64>) {
    let dm = heads * dh;
    let cfg = AttentionConfig::dot_product(dh, heads, vf);
    let mut store = ParamStore::new();
    let mut qrng = ChaCha8Rng::seed_from_u64(rng.gen());
    let params = MultiHeadParams::init(&mut store, "mh", dm, &cfg, rng, &mut qrng).unwrap();
    randomize(&mut store, rng, 1.0);
    let x = rows(rng, n, dm);
    let keep = random_keep(rng, n);

    let mut g = Graph::new();
    let xv = g.constant(tensor(&x));
    let mask = Mask::new(vec![n], keep.clone()).unwrap();
    let out = multi_head_self_attention(&mut g, &store, xv, Some(&mask), &cfg, &params).unwrap();
    let lib = g.value(out).data().to_vec();

    // x P for a row-major [dm × dh] projection.
    let project = |p: &[f64], cols: usize| -> Rows {
        x.iter()
            .map(|row| (0..cols).map(|c| (0..row.len()).map(|r| row[r] * p[r * cols + c]).sum()).collect())
            .collect()
    };
    let mut merged: Rows = vec![Vec::new(); n];
    for head in &params.heads {
        let q = project(store.get(head.query_proj).data(), dh);
        let k = project(store.get(head.key_proj).data(), dh);
        let v = project(store.get(head.value_proj).data(), dh);
        let p = DotRef {
            w: data_of(&store, head.gate.w),
            h: data_of(&store, head.gate.h_gate),
        };
        let o = dot_output(vf, GateMode::PerPosition, &q, &k, &v, &keep, &keep, &p, None);
        for i in 0..n {
            merged[i].extend_from_slice(&o[i]);
        }
    }
    let po = store.get(params.output_proj).data();
    let oracle: Vec<f64> = merged
        .iter()
        .flat_map(|row| (0..dm).map(move |c| (0..row.len()).map(|r| row[r] * po[r * dm + c]).sum::<f64>()))
        .collect();
    (lib, oracle)
}

/// Largest oracle deviation over every attention variant for one random
/// instance with sequence lengths and width drawn from `1..=max`.
pub fn oracle_deviation(seed: u64, max: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max);
    let nq = rng.gen_range(1..=max);
    let d = rng.gen_range(1..=max);
    let mut worst: f64 = 0.0;
    for vf in ValueFn::ALL {
        for score_fn in [ScoreFn::Dot, ScoreFn::Mlp] {
            let c = AdditiveCase::random(&mut rng, n, d, vf, score_fn);
            let p = c.reference();
            let (out, weights, gates) = c.run(&c.cfg);
            worst = worst.max(max_abs(&out, &additive_output(vf, &c.q, &c.values, &c.keep, &p, None)));
            worst = worst.max(max_abs(&weights, &additive_weights(&c.q, &c.values, &c.keep, &p)));
            if let Some(gl) = gates {
                let (_, go) = additive_values(vf, &c.q, &c.values, &p, None);
                worst = worst.max(max_abs(&gl, &go));
            }
        }
        for mode in [GateMode::PerPosition, GateMode::Scalar] {
            let c = DotCase::random(&mut rng, nq, n, d, vf, mode);
            let p = c.reference();
            let (out, weights) = c.run(&c.cfg);
            let want = dot_output(vf, mode, &c.q, &c.k, &c.v, &c.keep_q, &c.keep_k, &p, None);
            worst = worst.max(max_abs(&out, &flatten(&want)));
            worst = worst.max(max_abs(&weights, &flatten(&scaled_weights(&c.q, &c.k, &c.keep_k))));
            worst = worst.max(max_abs(&c.qhat(), &flatten(&qhat(&c.q, &c.v, &c.keep_q))));
        }
        let heads = rng.gen_range(1..=2);
        let dh = rng.gen_range(1..=max.min(3));
        let (lib, oracle) = multi_head_pair(&mut rng, n, heads, dh, vf);
        worst = worst.max(max_abs(&lib, &oracle));
    }
    worst
}
