use super::{Dataset, InputKind, Sample};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token vocabulary with `PAD = 0` and `UNK = 1` reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps every token seen at least `min_freq` times. Ids are assigned by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Vocab {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Vocabulary from an ordered token list (reserved entries excluded).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Vocab {
        let mut v = Vocab {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        for t in tokens {
            if !v.index.contains_key(&t) && t != PAD_TOKEN && t != UNK_TOKEN {
                v.tokens.push(t);
            }
        }
        v.index = v
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokenizes `text` the way corpus files are read and maps each token
    /// to its id, unknown words to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Kept tokens in id order, excluding `PAD` and `UNK`.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusOptions {
    pub min_freq: usize,
    pub max_len: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            min_freq: 2,
            max_len: 128,
        }
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Parses `<label>\t<text>` lines. Blank lines are skipped.
fn parse_lines(text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected `<label>\\t<text>`".into(),
        })?;
        let label: usize = label.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("label `{label}` is not a non-negative integer"),
        })?;
        let tokens = tokenize(body);
        if tokens.is_empty() {
            return Err(Error::Data(format!("line {line_no}: empty text")));
        }
        rows.push((label, tokens));
    }
    Ok(rows)
}

/// Parses an in-memory corpus. With `vocab = None` a vocabulary is built
/// from this text (use for the training split only); otherwise the given
/// vocabulary maps tokens and unknown words become `UNK`.
pub fn parse_tsv_corpus(
    text: &str,
    vocab: Option<&Vocab>,
    opts: CorpusOptions,
) -> Result<(Dataset, Vocab)> {
    let rows = parse_lines(text)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocab::build(
            rows.iter().flat_map(|(_, t)| t.iter().map(String::as_str)),
            opts.min_freq,
        ),
    };
    let num_classes = rows.iter().map(|(l, _)| l + 1).max().unwrap_or(0);
    let samples = rows
        .into_iter()
        .map(|(label, tokens)| Sample::Tokens {
            ids: tokens
                .iter()
                .take(opts.max_len.max(1))
                .map(|t| vocab.id(t))
                .collect(),
            label,
        })
        .collect();
    let ds = Dataset {
        input: InputKind::Tokens {
            vocab_size: vocab.len(),
        },
        num_classes,
        samples,
    };
    Ok((ds, vocab))
}

/// Reads a UTF-8 `<label>\t<text>` corpus from disk.
pub fn load_tsv_corpus(
    path: impl AsRef<Path>,
    vocab: Option<&Vocab>,
    opts: CorpusOptions,
) -> Result<(Dataset, Vocab)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv_corpus(&text, vocab, opts)
}
