//! The `qvi` command-line interface.
//!
//! ```text
//! qvi <train|eval|gradcheck|ablate|synth> [--config PATH] [--seed N] [--set section.key=value]...
//! ```
//!
//! Exit codes: 0 success, 1 failure (including a failed gradient check),
//! 2 invalid configuration, 3 training aborted on a non-finite value.
//! `QVI_OUT_DIR` overrides the output root for `train` and `ablate`.

mod spec;

pub use spec::{load_eval_file, AblateConfig, DataConfig, DataSource, LoadedData, RunSpec};

use crate::config::parse_override;
use crate::data::{gen_gated_retrieval, gen_token_retrieval, write_synthetic, CorpusOptions};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, Model};
use crate::tensor::GradcheckOptions;
use crate::train::{evaluate, fit, run_ablation, AblationTask, METRICS_HEADER};
use crate::verify::{format_report, run_gradcheck_suite, Scope};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable overriding the output root.
pub const OUT_DIR_ENV: &str = "QVI_OUT_DIR";

/// Analytic-gradient offset used by `gradcheck --inject-fault`.
const INJECTED_FAULT: f64 = 1e-2;

#[derive(Debug, Parser)]
#[command(name = "qvi", version, about = "Attention with query-value interactions: training, evaluation and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Configuration file (sectioned key = value).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, shuffling and dropout.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Override a configuration value; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and a reproducibility record.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print accuracy and macro-F1 of a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Evaluation file (synthetic dump or corpus); defaults to the
        /// validation split described by the configuration.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// ops, attention, models or all.
        #[arg(long, default_value = "all")]
        scope: String,
        /// Corrupt every analytic gradient (negative control).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Train every value-function variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a synthetic dataset in the text dump format.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// gated_retrieval or token_retrieval; defaults to data.source.
        #[arg(long)]
        task: Option<String>,
        /// Output file.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Parse { .. } => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train { common } => cmd_train(&common),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(&common, &checkpoint, data.as_deref()),
        Command::Gradcheck {
            common,
            scope,
            inject_fault,
        } => cmd_gradcheck(&common, &scope, inject_fault),
        Command::Ablate { common } => cmd_ablate(&common),
        Command::Synth { common, task, out } => cmd_synth(&common, task.as_deref(), &out),
    }
}

fn load_spec(common: &CommonArgs) -> Result<RunSpec> {
    let overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let mut spec = RunSpec::load(common.config.as_deref(), &overrides)?;
    if let Some(seed) = common.seed {
        spec.train.seed = seed;
    }
    if let Ok(root) = std::env::var(OUT_DIR_ENV) {
        spec.output_root = PathBuf::from(root);
    }
    spec.validate()?;
    Ok(spec)
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("qvi {} ({profile})", env!("CARGO_PKG_VERSION"))
}

/// Creates `<root>/<command>-<hash prefix>-seed<seed>` and writes the
/// config snapshot and reproducibility record into it.
fn prepare_run_dir(spec: &RunSpec, command: &str, seed: u64) -> Result<PathBuf> {
    let snapshot = spec.render();
    let hash = sha256_hex(&snapshot);
    let dir = spec.output_root.join(format!("{command}-{}-seed{seed}", &hash[..12]));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("config.ini"), &snapshot)?;
    let repro = format!(
        "command = {command}\nconfig_sha256 = {hash}\nseed = {seed}\nbuild = {}\n",
        build_id()
    );
    write(&dir.join("repro.txt"), &repro)?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(common: &CommonArgs) -> Result<u8> {
    let mut spec = load_spec(common)?;
    let data = spec.load_data()?;
    let seed = spec.train.seed;
    let dir = prepare_run_dir(&spec, "train", seed)?;
    let mut model = Model::new(spec.model.clone(), seed)?;
    let result = match fit(&mut model, &data.train, &data.val, &spec.train) {
        Ok(r) => r,
        Err(e) => {
            write(&dir.join("train.log"), &format!("aborted: {e}\n"))?;
            return Err(e);
        }
    };
    let variant = spec.model.attention.value_fn.to_string();
    write(
        &dir.join("metrics.tsv"),
        &format!("{METRICS_HEADER}{}", result.tsv_rows(&variant)),
    )?;
    write(&dir.join("train.log"), &result.summary())?;
    Checkpoint {
        model,
        vocab: data.vocab,
    }
    .save(dir.join("model.ckpt"))?;
    print!("{}", result.summary());
    println!("output: {}", dir.display());
    Ok(0)
}

fn cmd_eval(common: &CommonArgs, checkpoint: &Path, data: Option<&Path>) -> Result<u8> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.model.config();
    let ds = match data {
        Some(path) => load_eval_file(
            path,
            ck.vocab.as_ref(),
            CorpusOptions {
                min_freq: 1,
                max_len: cfg.max_len,
            },
        )?,
        None => {
            let spec = load_spec(common)?;
            if spec.data.source == DataSource::Corpus {
                let path = spec.data.val_path.clone().expect("validated");
                load_eval_file(
                    &path,
                    ck.vocab.as_ref(),
                    CorpusOptions {
                        min_freq: 1,
                        max_len: spec.data.max_len,
                    },
                )?
            } else {
                let mut spec = spec;
                spec.load_data()?.val
            }
        }
    };
    let m = evaluate(&ck.model, &ds, 256)?;
    println!("accuracy\t{:.6}", m.accuracy);
    println!("macro_f1\t{:.6}", m.macro_f1);
    Ok(0)
}

fn cmd_gradcheck(common: &CommonArgs, scope: &str, inject_fault: bool) -> Result<u8> {
    let scope: Scope = scope.parse()?;
    let opts = GradcheckOptions {
        analytic_bias: if inject_fault { INJECTED_FAULT } else { 0.0 },
        ..Default::default()
    };
    let cases = run_gradcheck_suite(scope, common.seed.unwrap_or(0), opts)?;
    print!("{}", format_report(&cases));
    Ok(if cases.iter().all(|c| c.passes()) { 0 } else { 1 })
}

fn cmd_ablate(common: &CommonArgs) -> Result<u8> {
    let mut spec = load_spec(common)?;
    if let Some(seed) = common.seed {
        spec.ablate.seeds = vec![seed];
    }
    let data = spec.load_data()?;
    let dir = prepare_run_dir(&spec, "ablate", spec.ablate.seeds[0])?;
    let task = AblationTask {
        train: data.train,
        val: data.val,
        model: spec.model.clone(),
        train_cfg: spec.train.clone(),
        threads: spec.ablate.threads,
    };
    let table = run_ablation(&task, &spec.ablate.variants, &spec.ablate.seeds)?;
    write(&dir.join("summary.tsv"), &table.summary_tsv())?;
    write(&dir.join("metrics.tsv"), &table.metrics_tsv())?;
    print!("{}", table.summary_tsv());
    println!("output: {}", dir.display());
    Ok(0)
}

fn cmd_synth(common: &CommonArgs, task: Option<&str>, out: &Path) -> Result<u8> {
    let mut spec = load_spec(common)?;
    if let Some(t) = task {
        spec.data.source = t.parse()?;
    }
    let d = &spec.data;
    let seed = common.seed.unwrap_or(d.seed);
    let ds = match d.source {
        DataSource::GatedRetrieval => gen_gated_retrieval(d.n_train, d.seq_len, d.dim, seed)?,
        DataSource::TokenRetrieval => gen_token_retrieval(d.n_train, d.seq_len, d.vocab_size, d.num_classes, seed)?,
        DataSource::Corpus => {
            return Err(Error::config("data.source", "synth needs a generator, not a corpus"));
        }
    };
    write(out, &write_synthetic(&ds))?;
    println!("wrote {} samples to {}", ds.len(), out.display());
    Ok(0)
}
