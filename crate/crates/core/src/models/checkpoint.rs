use super::{Model, ModelConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "qvi-checkpoint v1";

/// A saved model plus the vocabulary it was trained with.
///
/// Text layout, one record per line:
///
/// ```text
/// qvi-checkpoint v1
/// [model]
/// kind = additive_pool
/// ...
/// [attention]
/// value_fn = qvi
/// ...
/// [vocab] K
/// <K tokens, one per line, ids 2.. in order>
/// [params] P
/// <name> <d1>x<d2>... <values separated by spaces>
/// ```
///
/// `[vocab]` is omitted for vector-input models. Floats are written in
/// the shortest form that parses back to the same bits, so a save/load
/// cycle reproduces logits exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Option<Vocab>,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let cfg = &self.model.config;
        let mut out = format!("{MAGIC}\n[model]\n");
        for (k, v) in cfg.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("[attention]\n");
        for (k, v) in cfg.attention.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(vocab) = &self.vocab {
            let _ = writeln!(out, "[vocab] {}", vocab.tokens().len());
            for t in vocab.tokens() {
                let _ = writeln!(out, "{t}");
            }
        }
        let store = self.model.store();
        let _ = writeln!(out, "[params] {}", store.len());
        for (_, name, t) in store.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let shape = if shape.is_empty() { "scalar".to_string() } else { shape.join("x") };
            let _ = write!(out, "{name} {shape}");
            for v in t.data() {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Checkpoint> {
        let lines: Vec<&str> = text.lines().collect();
        let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        if lines.first().map(|l| l.trim()) != Some(MAGIC) {
            return Err(perr(0, format!("missing `{MAGIC}` header")));
        }
        let mut cfg = ModelConfig::default();
        let mut vocab = None;
        let mut values: Vec<(usize, String, Tensor)> = Vec::new();
        let mut section = "";
        let mut i = 1;
        while i < lines.len() {
            let line = lines[i].trim_end();
            if let Some(rest) = line.strip_prefix("[vocab]") {
                let k: usize = rest.trim().parse().map_err(|_| perr(i, "bad vocab count".into()))?;
                let toks = lines
                    .get(i + 1..i + 1 + k)
                    .ok_or_else(|| perr(i, "truncated vocabulary".into()))?;
                vocab = Some(Vocab::from_tokens(toks.iter().map(|t| t.to_string())));
                i += k + 1;
                continue;
            }
            if let Some(rest) = line.strip_prefix("[params]") {
                let p: usize = rest.trim().parse().map_err(|_| perr(i, "bad parameter count".into()))?;
                for j in i + 1..i + 1 + p {
                    let l = lines.get(j).ok_or_else(|| perr(j, "truncated parameters".into()))?;
                    let (name, t) = parse_param(l).map_err(|m| perr(j, m))?;
                    values.push((j, name, t));
                }
                i += p + 1;
                continue;
            }
            match line {
                "[model]" => section = "model",
                "[attention]" => section = "attention",
                "" => {}
                _ => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| perr(i, format!("unexpected line `{line}`")))?;
                    match section {
                        "model" => cfg.set(k.trim(), v.trim())?,
                        "attention" => cfg.attention.set(k.trim(), v.trim())?,
                        _ => return Err(perr(i, "key outside of a section".into())),
                    }
                }
            }
            i += 1;
        }

        let mut model = Model::new(cfg, 0)?;
        if values.len() != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, configuration builds {}",
                values.len(),
                model.store.len()
            )));
        }
        for (line, name, t) in values {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| perr(line, format!("unknown parameter `{name}`")))?;
            model.store.set(id, t)?;
        }
        Ok(Checkpoint { model, vocab })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_param(line: &str) -> std::result::Result<(String, Tensor), String> {
    let mut parts = line.split_whitespace();
    let name = parts.next().ok_or("empty parameter line")?.to_string();
    let shape_s = parts.next().ok_or("missing shape")?;
    let shape: Vec<usize> = if shape_s == "scalar" {
        Vec::new()
    } else {
        shape_s
            .split('x')
            .map(|d| d.parse().map_err(|_| format!("bad shape `{shape_s}`")))
            .collect::<std::result::Result<_, _>>()?
    };
    let data: Vec<f64> = parts
        .map(|v| v.parse().map_err(|_| format!("bad value `{v}`")))
        .collect::<std::result::Result<_, _>>()?;
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((name, t))
}
