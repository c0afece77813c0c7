//! C ABI over the lab: opaque model handles, teacher-forced log-probs,
//! sampling, loss values with gradients, answer verification and the
//! learning-rate schedule.
//!
//! Every function returns a [`DftStatus`]. On failure the message is
//! available from [`dft_last_error`] on the same thread. Panics are caught
//! at the boundary and reported as `DFT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dftlab::autodiff::Graph;
use dftlab::losses::{self, LossKind, LossSpec, Reduction};
use dftlab::model::{checkpoint, sample, Decoding, Model, ModelConfig};
use dftlab::tasks::{verify_text, TaskKind};
use dftlab::training::{LrSchedule, Schedule};
use dftlab::{LabError, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DftStatus {
    Ok = 0,
    /// Null pointer, bad enum value or undersized buffer.
    InvalidArgument = 1,
    /// Rejected input or configuration.
    Invalid = 2,
    /// Failure while computing.
    Runtime = 3,
    Panic = 4,
}

pub const DFT_LOSS_SFT: i32 = 0;
pub const DFT_LOSS_DFT_TOKEN: i32 = 1;
pub const DFT_LOSS_DFT_SEQUENCE: i32 = 2;
pub const DFT_LOSS_FOCAL: i32 = 3;
pub const DFT_LOSS_IW_SFT: i32 = 4;

pub const DFT_TASK_ADDITION: i32 = 0;
pub const DFT_TASK_REVERSAL: i32 = 1;
pub const DFT_TASK_MODULAR: i32 = 2;

/// Opaque model handle.
pub struct DftModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(DftStatus, String);

impl From<LabError> for Fail {
    fn from(e: LabError) -> Self {
        let status = if e.is_validation() { DftStatus::Invalid } else { DftStatus::Runtime };
        Fail(status, e.to_string())
    }
}

fn arg(msg: &str) -> Fail {
    Fail(DftStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DftStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside dftlab".into());
            DftStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(arg(&format!("{what} is null")));
    }
    // SAFETY: caller guarantees `p` points to `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(arg(&format!("{what} is null")));
    }
    // SAFETY: caller guarantees `p` points to `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: non-null pointers are required to be valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| arg(&format!("{what} is null")))
}

unsafe fn model_ref<'a>(m: *const DftModel) -> Result<&'a Model, Fail> {
    // SAFETY: handles come from `dft_model_new` / `dft_model_load`.
    unsafe { m.as_ref() }.map(|h| &h.0).ok_or_else(|| arg("model is null"))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(arg(&format!("{what} is null")));
    }
    // SAFETY: caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| arg(&format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn dft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Freshly initialized model.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dft_model_new(
    vocab_size: usize,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    context_length: usize,
    seed: u64,
    out: *mut *mut DftModel,
) -> DftStatus {
    guard(|| {
        let out = unsafe { out_ref(out, "out")? };
        let m = Model::new(ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            context_length,
            seed,
        })?;
        *out = Box::into_raw(Box::new(DftModel(m)));
        Ok(())
    })
}

/// Loads a checkpoint written by the lab.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dft_model_load(path: *const c_char, out: *mut *mut DftModel) -> DftStatus {
    guard(|| {
        let path = unsafe { string(path, "path")? };
        let out = unsafe { out_ref(out, "out")? };
        let m = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(DftModel(m)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `model` a live handle.
#[no_mangle]
pub unsafe extern "C" fn dft_model_save(model: *const DftModel, path: *const c_char) -> DftStatus {
    guard(|| {
        let m = unsafe { model_ref(model)? };
        let path = unsafe { string(path, "path")? };
        checkpoint::save(m, Path::new(path))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dft_model_free(model: *mut DftModel) {
    if !model.is_null() {
        // SAFETY: the handle was created by Box::into_raw.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dft_model_vocab_size(model: *const DftModel, out: *mut usize) -> DftStatus {
    guard(|| {
        let m = unsafe { model_ref(model)? };
        *unsafe { out_ref(out, "out")? } = m.config().vocab_size;
        Ok(())
    })
}

/// Teacher-forced `log p(response_t | prompt, response_<t)`; writes
/// `response_len` values to `out`.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn dft_token_log_probs(
    model: *const DftModel,
    prompt: *const usize,
    prompt_len: usize,
    response: *const usize,
    response_len: usize,
    out: *mut f64,
) -> DftStatus {
    guard(|| {
        let m = unsafe { model_ref(model)? };
        let prompt = unsafe { slice(prompt, prompt_len, "prompt")? };
        let response = unsafe { slice(response, response_len, "response")? };
        let out = unsafe { slice_mut(out, response_len, "out")? };
        out.copy_from_slice(&m.token_log_prob_values(prompt, response)?);
        Ok(())
    })
}

/// Samples up to `max_new` tokens (temperature 0 is greedy), stopping after
/// EOS. Writes at most `out_capacity` ids and the count to `out_len`.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn dft_sample(
    model: *const DftModel,
    prompt: *const usize,
    prompt_len: usize,
    max_new: usize,
    temperature: f64,
    seed: u64,
    out: *mut usize,
    out_capacity: usize,
    out_len: *mut usize,
) -> DftStatus {
    guard(|| {
        let m = unsafe { model_ref(model)? };
        let prompt = unsafe { slice(prompt, prompt_len, "prompt")? };
        let out_len = unsafe { out_ref(out_len, "out_len")? };
        let tokens = sample(m, prompt, max_new, Decoding::from_temperature(temperature)?, seed)?;
        if tokens.len() > out_capacity {
            return Err(arg(&format!("output buffer holds {out_capacity}, need {}", tokens.len())));
        }
        unsafe { slice_mut(out, tokens.len(), "out")? }.copy_from_slice(&tokens);
        *out_len = tokens.len();
        Ok(())
    })
}

/// Loss (`DFT_LOSS_*`) over one sequence of token log-probabilities and its gradient with
/// respect to them. `mask[t] != 0` marks tokens that count; `reference` is
/// read only for IW_SFT and may be null otherwise. `gamma` applies to FOCAL,
/// `iw_clip` to IW_SFT. `sum_reduction != 0` sums over tokens instead of
/// averaging.
///
/// # Safety
/// Array pointers must be valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn dft_loss(
    kind: i32,
    gamma: f64,
    iw_clip: f64,
    sum_reduction: i32,
    log_probs: *const f64,
    mask: *const u8,
    reference: *const f64,
    len: usize,
    value: *mut f64,
    grad: *mut f64,
) -> DftStatus {
    guard(|| {
        let lp = unsafe { slice(log_probs, len, "log_probs")? };
        let mask: Vec<bool> = unsafe { slice(mask, len, "mask")? }.iter().map(|&m| m != 0).collect();
        let value = unsafe { out_ref(value, "value")? };
        let grad = unsafe { slice_mut(grad, len, "grad")? };
        let reduction = if sum_reduction != 0 { Reduction::Sum } else { Reduction::Mean };
        let mut spec = match kind {
            DFT_LOSS_SFT => LossSpec::new(LossKind::Sft),
            DFT_LOSS_DFT_TOKEN => LossSpec::new(LossKind::DftToken),
            DFT_LOSS_DFT_SEQUENCE => LossSpec::new(LossKind::DftSequence),
            DFT_LOSS_FOCAL => LossSpec::focal(gamma),
            DFT_LOSS_IW_SFT => LossSpec::iw_sft(iw_clip),
            _ => return Err(arg(&format!("unknown loss kind {kind}"))),
        };
        spec.reduction = reduction;
        spec.validate()?;
        let reference = if kind == DFT_LOSS_IW_SFT {
            Some(unsafe { slice(reference, len, "reference")? })
        } else {
            None
        };
        let mut g = Graph::new();
        let leaf = g.leaf(&Tensor::param(vec![len], lp.to_vec())?);
        let loss = losses::loss(&mut g, leaf, &mask, &spec, reference)?;
        g.backward(loss)?;
        *value = g.scalar(loss);
        match g.grad(leaf) {
            Some(gr) => grad.copy_from_slice(gr),
            None => grad.fill(0.0),
        }
        Ok(())
    })
}

/// Checks a completion for task `DFT_TASK_*` against the task's recomputed answer; writes 1 or 0.
///
/// # Safety
/// Strings must be NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dft_verify(
    task: i32,
    prompt: *const c_char,
    completion: *const c_char,
    out: *mut i32,
) -> DftStatus {
    guard(|| {
        let prompt = unsafe { string(prompt, "prompt")? };
        let completion = unsafe { string(completion, "completion")? };
        let task = match task {
            DFT_TASK_ADDITION => TaskKind::Addition,
            DFT_TASK_REVERSAL => TaskKind::Reversal,
            DFT_TASK_MODULAR => TaskKind::Modular,
            _ => return Err(arg(&format!("unknown task {task}"))),
        };
        *unsafe { out_ref(out, "out")? } = i32::from(verify_text(task, prompt, completion));
        Ok(())
    })
}

/// Learning rate of update `step` (1-based) under linear warm-up followed by
/// cosine decay (`cosine != 0`) or a constant rate.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dft_lr_at(
    peak: f64,
    warmup_ratio: f64,
    total_steps: usize,
    step: usize,
    cosine: i32,
    out: *mut f64,
) -> DftStatus {
    guard(|| {
        if !(peak.is_finite() && peak > 0.0) || !(0.0..1.0).contains(&warmup_ratio) {
            return Err(Fail(DftStatus::Invalid, "peak must be > 0 and warmup_ratio in [0, 1)".into()));
        }
        let kind = if cosine != 0 { Schedule::Cosine } else { Schedule::Constant };
        *unsafe { out_ref(out, "out")? } = LrSchedule::new(peak, warmup_ratio, total_steps, kind).lr_at(step);
        Ok(())
    })
}
