use crate::attention::ValueFn;
use crate::config::{field, parse_entries, render, str_enum, Entry};
use crate::data::{
    gen_gated_retrieval, gen_token_retrieval, is_synthetic, load_tsv_corpus, parse_tsv_corpus,
    read_synthetic, CorpusOptions, Dataset, InputKind, Vocab,
};
use crate::error::{Error, Result};
use crate::models::{InputMode, ModelConfig};
use crate::train::TrainConfig;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    GatedRetrieval,
    TokenRetrieval,
    Corpus,
}

str_enum!(DataSource, "data.source", {
    "gated_retrieval" => DataSource::GatedRetrieval,
    "token_retrieval" => DataSource::TokenRetrieval,
    "corpus" => DataSource::Corpus,
});

/// `[data]` section.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_train: usize,
    pub n_val: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Generator seed, kept apart from the training seed so every run of
    /// an experiment sees the same data.
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub min_freq: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::GatedRetrieval,
            n_train: 8000,
            n_val: 1000,
            seq_len: 8,
            dim: 16,
            vocab_size: 50,
            num_classes: 4,
            seed: 0,
            train_path: None,
            val_path: None,
            min_freq: 2,
            max_len: 128,
        }
    }
}

impl DataConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = format!("data.{key}");
        match key {
            "source" => self.source = field(&path, value)?,
            "n_train" => self.n_train = field(&path, value)?,
            "n_val" => self.n_val = field(&path, value)?,
            "seq_len" => self.seq_len = field(&path, value)?,
            "dim" => self.dim = field(&path, value)?,
            "vocab_size" => self.vocab_size = field(&path, value)?,
            "num_classes" => self.num_classes = field(&path, value)?,
            "seed" => self.seed = field(&path, value)?,
            "train_path" => self.train_path = Some(PathBuf::from(value)),
            "val_path" => self.val_path = Some(PathBuf::from(value)),
            "min_freq" => self.min_freq = field(&path, value)?,
            "max_len" => self.max_len = field(&path, value)?,
            _ => return Err(Error::config(path, "unknown key")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut kv = vec![("source", self.source.to_string()), ("seed", self.seed.to_string())];
        match self.source {
            DataSource::GatedRetrieval => kv.extend([
                ("n_train", self.n_train.to_string()),
                ("n_val", self.n_val.to_string()),
                ("seq_len", self.seq_len.to_string()),
                ("dim", self.dim.to_string()),
            ]),
            DataSource::TokenRetrieval => kv.extend([
                ("n_train", self.n_train.to_string()),
                ("n_val", self.n_val.to_string()),
                ("seq_len", self.seq_len.to_string()),
                ("vocab_size", self.vocab_size.to_string()),
                ("num_classes", self.num_classes.to_string()),
            ]),
            DataSource::Corpus => {
                for (k, p) in [("train_path", &self.train_path), ("val_path", &self.val_path)] {
                    if let Some(p) = p {
                        kv.push((k, p.display().to_string()));
                    }
                }
                kv.extend([
                    ("min_freq", self.min_freq.to_string()),
                    ("max_len", self.max_len.to_string()),
                ]);
            }
        }
        kv
    }

    fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            min_freq: self.min_freq,
            max_len: self.max_len,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.source != DataSource::Corpus {
            for (key, v) in [("data.n_train", self.n_train), ("data.n_val", self.n_val), ("data.seq_len", self.seq_len)] {
                if v == 0 {
                    return Err(Error::config(key, "must be positive"));
                }
            }
        }
        match self.source {
            DataSource::GatedRetrieval if self.dim == 0 => Err(Error::config("data.dim", "must be positive")),
            DataSource::Corpus if self.train_path.is_none() => {
                Err(Error::config("data.train_path", "required for a corpus source"))
            }
            DataSource::Corpus if self.val_path.is_none() => {
                Err(Error::config("data.val_path", "required for a corpus source"))
            }
            _ => Ok(()),
        }
    }
}

/// `[ablate]` section.
#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub variants: Vec<ValueFn>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: ValueFn::ALL.to_vec(),
            seeds: (0..5).collect(),
            threads: 0,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| field(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(key, "list is empty"));
    }
    Ok(items)
}

impl AblateConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = format!("ablate.{key}");
        match key {
            "variants" => self.variants = list(&path, value)?,
            "seeds" => self.seeds = list(&path, value)?,
            "threads" => self.threads = field(&path, value)?,
            _ => return Err(Error::config(path, "unknown key")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let join = |xs: Vec<String>| xs.join(",");
        vec![
            ("variants", join(self.variants.iter().map(ToString::to_string).collect())),
            ("seeds", join(self.seeds.iter().map(ToString::to_string).collect())),
            ("threads", self.threads.to_string()),
        ]
    }
}

/// Everything one command needs, from a configuration file plus overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    /// Root under which run directories are created.
    pub output_root: PathBuf,
    /// `section.key` of every value given explicitly.
    explicit: HashSet<String>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
            output_root: PathBuf::from("runs"),
            explicit: HashSet::new(),
        }
    }
}

/// Data loaded for a run.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub val: Dataset,
    pub vocab: Option<Vocab>,
}

impl RunSpec {
    /// Builds a spec from configuration text and `section.key=value`
    /// overrides, applied in order after the file.
    pub fn from_sources(text: &str, overrides: &[Entry]) -> Result<RunSpec> {
        let mut spec = RunSpec::default();
        for e in parse_entries(text)?.iter().chain(overrides) {
            spec.apply(e)?;
        }
        Ok(spec)
    }

    pub fn load(path: Option<&Path>, overrides: &[Entry]) -> Result<RunSpec> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_sources(&text, overrides)
    }

    pub fn apply(&mut self, e: &Entry) -> Result<()> {
        match e.section.as_str() {
            "data" => self.data.set(&e.key, &e.value)?,
            "model" => self.model.set(&e.key, &e.value)?,
            "attention" => self.model.attention.set(&e.key, &e.value)?,
            "train" => self.train.set(&e.key, &e.value)?,
            "ablate" => self.ablate.set(&e.key, &e.value)?,
            "output" if e.key == "root" => self.output_root = PathBuf::from(&e.value),
            "output" => return Err(Error::config(e.path(), "unknown key")),
            _ => return Err(Error::config(e.path(), format!("unknown section `{}`", e.section))),
        }
        self.explicit.insert(e.path());
        Ok(())
    }

    /// Fills a model field derived from the data, rejecting an explicit
    /// value that disagrees.
    fn derive(&mut self, key: &str, have: usize, want: usize) -> Result<usize> {
        if self.explicit.contains(key) && have != want {
            return Err(Error::config(key, format!("is {have} but the data requires {want}")));
        }
        Ok(want)
    }

    /// Loads or generates the data and aligns the model configuration with
    /// it (input mode, vocabulary size, classes, vector dimension).
    pub fn load_data(&mut self) -> Result<LoadedData> {
        self.data.validate()?;
        let d = &self.data;
        let (train, val, vocab) = match d.source {
            DataSource::GatedRetrieval => {
                let all = gen_gated_retrieval(d.n_train + d.n_val, d.seq_len, d.dim, d.seed)?;
                let (t, v) = all.split_at(d.n_train);
                (t, v, None)
            }
            DataSource::TokenRetrieval => {
                let all = gen_token_retrieval(d.n_train + d.n_val, d.seq_len, d.vocab_size, d.num_classes, d.seed)?;
                let (t, v) = all.split_at(d.n_train);
                (t, v, None)
            }
            DataSource::Corpus => {
                let opts = d.corpus_options();
                let (train, vocab) = load_tsv_corpus(d.train_path.as_ref().expect("validated"), None, opts)?;
                let (mut val, _) = load_tsv_corpus(d.val_path.as_ref().expect("validated"), Some(&vocab), opts)?;
                let classes = train.num_classes.max(val.num_classes);
                let mut train = train;
                train.num_classes = classes;
                val.num_classes = classes;
                (train, val, Some(vocab))
            }
        };
        self.align_model(&train, &val)?;
        Ok(LoadedData { train, val, vocab })
    }

    fn align_model(&mut self, train: &Dataset, val: &Dataset) -> Result<()> {
        let classes = train.num_classes.max(val.num_classes);
        self.model.num_classes = self.derive("model.num_classes", self.model.num_classes, classes)?;
        match train.input {
            InputKind::Tokens { vocab_size } => {
                self.model.input = InputMode::Tokens;
                self.model.vocab_size = self.derive("model.vocab_size", self.model.vocab_size, vocab_size)?;
                let longest = train.samples.iter().chain(&val.samples).map(|s| s.len()).max().unwrap_or(1);
                if !self.explicit.contains("model.max_len") {
                    self.model.max_len = self.model.max_len.max(longest);
                }
            }
            InputKind::Vectors { dim } => {
                self.model.input = InputMode::Vectors;
                self.model.vocab_size = 1;
                self.model.d_model = self.derive("model.d_model", self.model.d_model, dim)?;
            }
        }
        self.model.validate()
    }

    /// Validates everything that does not depend on loaded data.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()
    }

    /// Canonical rendering of the resolved spec; also the config snapshot
    /// written next to every run and the input of the config hash.
    pub fn render(&self) -> String {
        render(&[
            ("data", self.data.entries()),
            ("model", self.model.entries()),
            ("attention", self.model.attention.entries()),
            ("train", self.train.entries()),
            ("ablate", self.ablate.entries()),
            ("output", vec![("root", self.output_root.display().to_string())]),
        ])
    }
}

/// Reads evaluation data from a file: a synthetic dump, or a corpus mapped
/// through `vocab`.
pub fn load_eval_file(path: &Path, vocab: Option<&Vocab>, opts: CorpusOptions) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if is_synthetic(&text) {
        return read_synthetic(&text);
    }
    let vocab = vocab.ok_or_else(|| Error::Data("a corpus needs the checkpoint's vocabulary".into()))?;
    Ok(parse_tsv_corpus(&text, Some(vocab), opts)?.0)
}
