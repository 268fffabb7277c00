use super::{Dataset, InputKind, Sample};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// Gated retrieval: `q` and every `v_i` are i.i.d. uniform on `[-1, 1]^d`
/// and the label is `1` iff `⟨q, mean_i v_i⟩ > 0`.
///
/// A linear readout of `Σ α_i v_i` cannot express this bilinear label;
/// query-modulated values `Σ α_i (q ∗ v_i)` can, through an all-ones
/// readout under uniform weights.
pub fn gen_gated_retrieval(n: usize, seq_len: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || seq_len == 0 || dim == 0 {
        return Err(Error::config("data", "n, seq_len and dim must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..seq_len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let label = gated_label(&query, &values, seq_len);
            Sample::Vectors {
                query,
                values,
                len: seq_len,
                label,
            }
        })
        .collect();
    Ok(Dataset {
        input: InputKind::Vectors { dim },
        num_classes: 2,
        samples,
    })
}

/// The gated-retrieval labelling rule.
pub(crate) fn gated_label(query: &[f64], values: &[f64], len: usize) -> usize {
    let dim = query.len();
    let mut mean = vec![0.0; dim];
    for row in values.chunks(dim).take(len) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / len as f64;
        }
    }
    let dot: f64 = query.iter().zip(&mean).map(|(a, b)| a * b).sum();
    usize::from(dot > 0.0)
}

/// Token layout of the token-retrieval task.
///
/// Ids `0` and `1` are `PAD`/`UNK`. The next `2·C` ids are class-bearing
/// tokens (two per class, `class = (id − 2) mod C`); every id above is a
/// distractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenTaskLayout {
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl TokenTaskLayout {
    const PER_CLASS: usize = 2;

    pub fn first_distractor(&self) -> usize {
        2 + Self::PER_CLASS * self.num_classes
    }

    /// Class carried by `token`, if it is class-bearing.
    pub fn class_of(&self, token: usize) -> Option<usize> {
        (2..self.first_distractor())
            .contains(&token)
            .then(|| (token - 2) % self.num_classes)
    }
}

/// Token retrieval: each sequence holds exactly one class-bearing token at
/// a random position among random distractors; the label is that token's
/// class. Standard attention solves it by attending to the one position.
pub fn gen_token_retrieval(
    n: usize,
    seq_len: usize,
    vocab_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || seq_len == 0 || num_classes < 2 {
        return Err(Error::config("data", "need n ≥ 1, seq_len ≥ 1 and at least 2 classes"));
    }
    let layout = TokenTaskLayout {
        num_classes,
        vocab_size,
    };
    if vocab_size <= layout.first_distractor() {
        return Err(Error::config(
            "data.vocab_size",
            format!("must exceed {} for {num_classes} classes", layout.first_distractor()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let label = rng.gen_range(0..num_classes);
            let partner = 2 + label + num_classes * rng.gen_range(0..TokenTaskLayout::PER_CLASS);
            let pos = rng.gen_range(0..seq_len);
            let ids = (0..seq_len)
                .map(|i| {
                    if i == pos {
                        partner
                    } else {
                        rng.gen_range(layout.first_distractor()..vocab_size)
                    }
                })
                .collect();
            Sample::Tokens { ids, label }
        })
        .collect();
    Ok(Dataset {
        input: InputKind::Tokens { vocab_size },
        num_classes,
        samples,
    })
}

/// Generator parameters of a synthetic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    GatedRetrieval {
        n: usize,
        seq_len: usize,
        dim: usize,
    },
    TokenRetrieval {
        n: usize,
        seq_len: usize,
        vocab_size: usize,
        num_classes: usize,
    },
}

impl SynthTask {
    pub fn name(&self) -> &'static str {
        match self {
            SynthTask::GatedRetrieval { .. } => "gated_retrieval",
            SynthTask::TokenRetrieval { .. } => "token_retrieval",
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match *self {
            SynthTask::GatedRetrieval { n, seq_len, dim } => gen_gated_retrieval(n, seq_len, dim, seed),
            SynthTask::TokenRetrieval {
                n,
                seq_len,
                vocab_size,
                num_classes,
            } => gen_token_retrieval(n, seq_len, vocab_size, num_classes, seed),
        }
    }
}

const SYNTH_MAGIC: &str = "# qvi-synth v1";

/// Serializes a dataset in the synthetic dump format:
///
/// ```text
/// # qvi-synth v1 kind=vectors dim=16 classes=2
/// <label>\t<q_1 … q_d>\t<v_11 … v_Nd>
/// ```
///
/// or, for token datasets, `kind=tokens vocab_size=V classes=C` followed
/// by `<label>\t<id_1 … id_N>` lines. Floats use the shortest decimal form
/// that parses back to the identical value.
pub fn write_synthetic(ds: &Dataset) -> String {
    let mut out = String::new();
    match ds.input {
        InputKind::Vectors { dim } => {
            let _ = writeln!(out, "{SYNTH_MAGIC} kind=vectors dim={dim} classes={}", ds.num_classes);
        }
        InputKind::Tokens { vocab_size } => {
            let _ = writeln!(
                out,
                "{SYNTH_MAGIC} kind=tokens vocab_size={vocab_size} classes={}",
                ds.num_classes
            );
        }
    }
    let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(" ");
    for s in &ds.samples {
        match s {
            Sample::Vectors {
                query,
                values,
                label,
                ..
            } => {
                let q = join(&mut query.iter().map(|x| format!("{x:?}")));
                let v = join(&mut values.iter().map(|x| format!("{x:?}")));
                let _ = writeln!(out, "{label}\t{q}\t{v}");
            }
            Sample::Tokens { ids, label } => {
                let t = join(&mut ids.iter().map(|x| x.to_string()));
                let _ = writeln!(out, "{label}\t{t}");
            }
        }
    }
    out
}

fn header_field(header: &str, key: &str) -> Result<usize> {
    header
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("header lacks `{key}`"),
        })?
        .parse()
        .map_err(|_| Error::Parse {
            line: 1,
            msg: format!("header field `{key}` is not an integer"),
        })
}

/// Whether `text` starts with the synthetic dump header.
pub fn is_synthetic(text: &str) -> bool {
    text.starts_with(SYNTH_MAGIC)
}

/// Parses the format produced by [`write_synthetic`].
pub fn read_synthetic(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    if !is_synthetic(header) {
        return Err(Error::Parse {
            line: 1,
            msg: "missing `# qvi-synth v1` header".into(),
        });
    }
    let num_classes = header_field(header, "classes")?;
    let vectors = header.contains("kind=vectors");
    let input = if vectors {
        InputKind::Vectors {
            dim: header_field(header, "dim")?,
        }
    } else {
        InputKind::Tokens {
            vocab_size: header_field(header, "vocab_size")?,
        }
    };
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: &str| Error::Parse {
            line: line_no,
            msg: msg.to_string(),
        };
        let mut fields = line.split('\t');
        let label: usize = fields
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| perr("bad label"))?;
        match input {
            InputKind::Vectors { dim } => {
                let parse = |f: Option<&str>| -> Result<Vec<f64>> {
                    f.ok_or_else(|| perr("missing field"))?
                        .split_whitespace()
                        .map(|x| x.parse::<f64>().map_err(|_| perr("bad float")))
                        .collect()
                };
                let query = parse(fields.next())?;
                let values = parse(fields.next())?;
                if query.len() != dim || values.is_empty() || values.len() % dim != 0 {
                    return Err(perr("vector lengths do not match header dim"));
                }
                samples.push(Sample::Vectors {
                    len: values.len() / dim,
                    query,
                    values,
                    label,
                });
            }
            InputKind::Tokens { .. } => {
                let ids = fields
                    .next()
                    .ok_or_else(|| perr("missing field"))?
                    .split_whitespace()
                    .map(|x| x.parse::<usize>().map_err(|_| perr("bad token id")))
                    .collect::<Result<Vec<_>>>()?;
                samples.push(Sample::Tokens { ids, label });
            }
        }
    }
    let ds = Dataset {
        input,
        num_classes,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}
