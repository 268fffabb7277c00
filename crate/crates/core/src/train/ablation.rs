use super::{fit, RunResult, TrainConfig, METRICS_HEADER};
use crate::attention::ValueFn;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Data and configuration shared by every run of an ablation.
#[derive(Clone, Debug)]
pub struct AblationTask {
    pub train: Dataset,
    pub val: Dataset,
    /// Base model; its value function is replaced per variant.
    pub model: ModelConfig,
    /// Base training setup; its seed is replaced per run.
    pub train_cfg: TrainConfig,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: ValueFn,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    /// One run per seed, in seed order.
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for a
/// single value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn row(&self, variant: ValueFn) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Columns: `variant, runs, acc_mean, acc_std, macro_f1_mean,
    /// macro_f1_std`, computed from each run's best validation epoch.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("variant\truns\tacc_mean\tacc_std\tmacro_f1_mean\tmacro_f1_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.variant,
                r.runs.len(),
                r.acc_mean,
                r.acc_std,
                r.f1_mean,
                r.f1_std
            );
        }
        out
    }

    /// Per-epoch metrics of every run, with the standard metrics header.
    pub fn metrics_tsv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        for r in &self.rows {
            for run in &r.runs {
                out.push_str(&run.tsv_rows(r.variant.as_str()));
            }
        }
        out
    }
}

/// Trains every `variant × seed` combination. Runs are independent and
/// spread over worker threads; the table is ordered as the inputs.
///
/// Each run builds its model from `seed`, so variants start from the same
/// non-interaction parameters for a given seed.
pub fn run_ablation(task: &AblationTask, variants: &[ValueFn], seeds: &[u64]) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablate.variants", "need at least one variant and one seed"));
    }
    let jobs: Vec<(ValueFn, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let threads = match task.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len());

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(variant, seed)) = jobs.get(i) else { break };
                let out = run_one(task, variant, seed);
                results.lock().expect("results lock")[i] = Some(out);
            });
        }
    });

    let mut results = results.into_inner().expect("results lock").into_iter();
    let mut rows = Vec::new();
    for &variant in variants {
        let runs: Vec<RunResult> = (0..seeds.len())
            .map(|_| results.next().flatten().expect("every job ran"))
            .collect::<Result<_>>()?;
        let accs: Vec<f64> = runs.iter().map(|r| r.best.accuracy).collect();
        let f1s: Vec<f64> = runs.iter().map(|r| r.best.macro_f1).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        let (f1_mean, f1_std) = mean_std(&f1s);
        rows.push(AblationRow {
            variant,
            acc_mean,
            acc_std,
            f1_mean,
            f1_std,
            runs,
        });
    }
    Ok(AblationTable { rows })
}

fn run_one(task: &AblationTask, variant: ValueFn, seed: u64) -> Result<RunResult> {
    let mut cfg = task.model.clone();
    cfg.attention.value_fn = variant;
    let mut model = Model::new(cfg, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..task.train_cfg.clone()
    };
    log::info!("ablation run: variant {variant}, seed {seed}");
    fit(&mut model, &task.train, &task.val, &train_cfg)
}
