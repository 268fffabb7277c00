//! C ABI over the `qvi` crate.
//!
//! Every fallible function returns a [`QviStatus`]. On failure a message is
//! kept per thread and can be read with [`qvi_last_error_message`]. Models
//! are opaque [`QviModel`] handles released with [`qvi_model_free`]. Panics
//! never cross the boundary; they are reported as `QVI_STATUS_INTERNAL`.

use qvi::attention::transformed_queries;
use qvi::data::{gen_gated_retrieval, gen_token_retrieval, write_synthetic, Batch, Sample};
use qvi::models::Checkpoint;
use qvi::tensor::GradcheckOptions;
use qvi::verify::{run_gradcheck_suite, Scope};
use qvi::{Error, Graph, Tensor};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QviStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument is out of range or does not fit the model.
    InvalidArgument = 2,
    /// A configuration, checkpoint or data file could not be parsed.
    Parse = 3,
    Io = 4,
    /// A computation produced NaN or infinity.
    NonFinite = 5,
    /// At least one gradient check case exceeded the tolerance.
    GradcheckFailed = 6,
    /// A bug: an internal invariant broke or a panic was caught.
    Internal = 7,
}

/// A loaded model checkpoint.
pub struct QviModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(QviStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } | Error::Parse { .. } | Error::Data(_) => QviStatus::Parse,
            Error::Io { .. } => QviStatus::Io,
            Error::NonFinite(_) => QviStatus::NonFinite,
            Error::Dimension { .. } | Error::DegenerateMask { .. } | Error::Contract(_) => QviStatus::InvalidArgument,
            Error::State(_) => QviStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(QviStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QviStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QviStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside qvi");
            QviStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(QviStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn model_ref<'a>(model: *const QviModel) -> Result<&'a QviModel, Failure> {
    non_null(model, "model")?;
    Ok(&*model)
}

/// Message of the last failure on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qvi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qvi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `qvi train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qvi_model_load(path: *const c_char, out: *mut *mut QviModel) -> QviStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let path = c_str(path, "path")?;
        let inner = Checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(QviModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`qvi_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qvi_model_free(model: *mut QviModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qvi_model_num_classes(model: *const QviModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.model.config().num_classes)
}

/// Vector dimension the model expects, or 0 for token models and null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qvi_model_input_dim(model: *const QviModel) -> usize {
    use qvi::models::InputMode;
    model.as_ref().map_or(0, |m| {
        let c = m.inner.model.config();
        match c.input {
            InputMode::Vectors => c.d_model,
            InputMode::Tokens => 0,
        }
    })
}

fn predict_into(model: &QviModel, samples: Vec<Sample>, out: *mut usize) -> Result<(), Failure> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs)?;
    let preds = model.inner.model.predict(&batch)?;
    // SAFETY: the caller provides room for one label per sample.
    unsafe { std::slice::from_raw_parts_mut(out, preds.len()) }.copy_from_slice(&preds);
    Ok(())
}

/// Classifies `batch` token sequences. `ids` holds them back to back,
/// `lengths[b]` ids each; `out_labels` receives `batch` predictions.
///
/// # Safety
/// `lengths` and `out_labels` must hold `batch` elements and `ids` the sum
/// of `lengths`.
#[no_mangle]
pub unsafe extern "C" fn qvi_model_predict_tokens(
    model: *const QviModel,
    ids: *const u32,
    lengths: *const usize,
    batch: usize,
    out_labels: *mut usize,
) -> QviStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(ids, "ids")?;
        non_null(lengths, "lengths")?;
        non_null(out_labels, "out_labels")?;
        if batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        let cfg = m.inner.model.config();
        if cfg.input != qvi::models::InputMode::Tokens {
            return Err(invalid("model expects vector input"));
        }
        let lengths = std::slice::from_raw_parts(lengths, batch);
        let total: usize = lengths.iter().sum();
        let ids = std::slice::from_raw_parts(ids, total);
        let mut samples = Vec::with_capacity(batch);
        let mut off = 0;
        for &len in lengths {
            if len == 0 || len > cfg.max_len {
                return Err(invalid(format!("sequence length {len} outside 1..={}", cfg.max_len)));
            }
            let seq: Vec<usize> = ids[off..off + len].iter().map(|&i| i as usize).collect();
            if let Some(&bad) = seq.iter().find(|&&i| i >= cfg.vocab_size) {
                return Err(invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
            samples.push(Sample::Tokens { ids: seq, label: 0 });
            off += len;
        }
        predict_into(m, samples, out_labels)
    })
}

/// Classifies one whitespace-separated text with the checkpoint vocabulary.
///
/// # Safety
/// `text` must be NUL-terminated and `out_label` valid.
#[no_mangle]
pub unsafe extern "C" fn qvi_model_predict_text(
    model: *const QviModel,
    text: *const c_char,
    out_label: *mut usize,
) -> QviStatus {
    guard(|| {
        let m = model_ref(model)?;
        let text = c_str(text, "text")?;
        non_null(out_label, "out_label")?;
        let vocab = m
            .inner
            .vocab
            .as_ref()
            .ok_or_else(|| invalid("checkpoint has no vocabulary"))?;
        let mut ids = vocab.encode(text);
        ids.truncate(m.inner.model.config().max_len);
        if ids.is_empty() {
            return Err(invalid("text has no tokens"));
        }
        predict_into(m, vec![Sample::Tokens { ids, label: 0 }], out_label)
    })
}

/// Classifies `batch` (query, values) pairs for a vector-input model.
/// `queries` is `[batch × dim]`, `values` is `[batch × seq_len × dim]`.
///
/// # Safety
/// The arrays must have the stated sizes and `out_labels` room for `batch`.
#[no_mangle]
pub unsafe extern "C" fn qvi_model_predict_vectors(
    model: *const QviModel,
    queries: *const f64,
    values: *const f64,
    batch: usize,
    seq_len: usize,
    dim: usize,
    out_labels: *mut usize,
) -> QviStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(queries, "queries")?;
        non_null(values, "values")?;
        non_null(out_labels, "out_labels")?;
        if batch == 0 || seq_len == 0 {
            return Err(invalid("batch and seq_len must be positive"));
        }
        let want = qvi_model_input_dim(model);
        if want == 0 {
            return Err(invalid("model expects token input"));
        }
        if dim != want {
            return Err(invalid(format!("dim {dim} does not match model dim {want}")));
        }
        let q = std::slice::from_raw_parts(queries, batch * dim);
        let v = std::slice::from_raw_parts(values, batch * seq_len * dim);
        let samples = (0..batch)
            .map(|b| Sample::Vectors {
                query: q[b * dim..(b + 1) * dim].to_vec(),
                values: v[b * seq_len * dim..(b + 1) * seq_len * dim].to_vec(),
                len: seq_len,
                label: 0,
            })
            .collect();
        predict_into(m, samples, out_labels)
    })
}

/// Value-aligned transformed queries: `out[i] = Σ_j softmax_j(v_i·q_j/√d) q_j`.
/// `q` is `[m × dim]`, `v` and `out` are `[n × dim]`.
///
/// # Safety
/// The arrays must have the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn qvi_transformed_queries(
    q: *const f64,
    m: usize,
    v: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> QviStatus {
    guard(|| {
        non_null(q, "q")?;
        non_null(v, "v")?;
        non_null(out, "out")?;
        if m == 0 || n == 0 || dim == 0 {
            return Err(invalid("m, n and dim must be positive"));
        }
        let qt = Tensor::new(vec![m, dim], std::slice::from_raw_parts(q, m * dim).to_vec())?;
        let vt = Tensor::new(vec![n, dim], std::slice::from_raw_parts(v, n * dim).to_vec())?;
        let mut g = Graph::new();
        let (qv, vv) = (g.constant(qt), g.constant(vt));
        let r = transformed_queries(&mut g, qv, vv, None)?;
        std::slice::from_raw_parts_mut(out, n * dim).copy_from_slice(g.value(r).data());
        Ok(())
    })
}

/// Runs the gradient-check suite. `scope` is "ops", "attention", "models"
/// or "all". Writes the case count, failures and worst relative error to
/// any non-null output; returns `QVI_STATUS_GRADCHECK_FAILED` if a case
/// failed.
///
/// # Safety
/// `scope` must be NUL-terminated; outputs must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn qvi_gradcheck(
    scope: *const c_char,
    seed: u64,
    out_cases: *mut usize,
    out_failed: *mut usize,
    out_worst_rel: *mut f64,
) -> QviStatus {
    guard(|| {
        let scope: Scope = c_str(scope, "scope")?.parse()?;
        let cases = run_gradcheck_suite(scope, seed, GradcheckOptions::default())?;
        let failed = cases.iter().filter(|c| !c.passes()).count();
        let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
        if let Some(p) = out_cases.as_mut() {
            *p = cases.len();
        }
        if let Some(p) = out_failed.as_mut() {
            *p = failed;
        }
        if let Some(p) = out_worst_rel.as_mut() {
            *p = worst;
        }
        if failed > 0 {
            return Err(Failure(QviStatus::GradcheckFailed, format!("{failed} gradient check cases failed")));
        }
        Ok(())
    })
}

/// Writes a gated-retrieval dataset of `n` samples to `path`.
///
/// # Safety
/// `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qvi_synth_gated(
    path: *const c_char,
    n: usize,
    seq_len: usize,
    dim: usize,
    seed: u64,
) -> QviStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let ds = gen_gated_retrieval(n, seq_len, dim, seed)?;
        std::fs::write(path, write_synthetic(&ds)).map_err(|e| Failure(QviStatus::Io, format!("{path}: {e}")))
    })
}

/// Writes a token-retrieval dataset of `n` samples to `path`.
///
/// # Safety
/// `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qvi_synth_tokens(
    path: *const c_char,
    n: usize,
    seq_len: usize,
    vocab_size: usize,
    num_classes: usize,
    seed: u64,
) -> QviStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let ds = gen_token_retrieval(n, seq_len, vocab_size, num_classes, seed)?;
        std::fs::write(path, write_synthetic(&ds)).map_err(|e| Failure(QviStatus::Io, format!("{path}: {e}")))
    })
}
