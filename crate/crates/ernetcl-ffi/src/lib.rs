//! C ABI over the core crate: opaque handles, status codes, and a
//! thread-local last-error message. The header is generated into
//! `include/ernetcl.h` at build time.
//!
//! Ownership rules: every `*_load` hands out a pointer that must be
//! released with the matching `*_free`; strings returned through buffers
//! are NUL-terminated copies.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, size_t};

use ernetcl::checkpoint::Checkpoint;
use ernetcl::curriculum::{difficulty, weight, CurriculumSchedule};
use ernetcl::data::{load_dataset, Batch, Conversation, Dataset, Utterance};
use ernetcl::error::Error;
use ernetcl::model::{forward_pass, predict};
use ernetcl::nn::Mode;
use ernetcl::train::evaluate;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IoError = 3,
    FormatError = 4,
    InternalError = 5,
}

/// Evaluation aggregates. `micro_f1_excl_neutral` is meaningful only when
/// `has_excl_neutral` is true.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EcMetrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub micro_f1_excl_neutral: f64,
    pub has_excl_neutral: bool,
}

/// Opaque dataset handle.
pub struct EcDataset {
    inner: Dataset,
}

/// Opaque model handle (checkpoint: config plus parameters).
pub struct EcModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> EcStatus {
    match err {
        Error::Io { .. } => EcStatus::IoError,
        Error::Parse { .. } | Error::Format(_) | Error::Checkpoint(_) | Error::Label(_) => {
            EcStatus::FormatError
        }
        _ => EcStatus::InvalidArgument,
    }
}

fn fail(err: &Error) -> EcStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Run a fallible body, converting panics into `InternalError`.
fn guarded(body: impl FnOnce() -> EcStatus) -> EcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            EcStatus::InternalError
        }
    }
}

unsafe fn path_from<'a>(ptr: *const c_char) -> Result<&'a Path, EcStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(EcStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid utf-8");
            Err(EcStatus::InvalidArgument)
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ernetcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ernetcl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a dataset file. On success `*out` owns the handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_dataset_load(
    path: *const c_char,
    out: *mut *mut EcDataset,
) -> EcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return EcStatus::NullPointer;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_dataset(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(EcDataset { inner }));
                EcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `ds` must come from `ernetcl_dataset_load` and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_dataset_free(ds: *mut EcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_dataset_len(ds: *const EcDataset, out: *mut size_t) -> EcStatus {
    guarded(|| {
        if ds.is_null() || out.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        *out = (*ds).inner.len();
        EcStatus::Ok
    })
}

/// # Safety
/// `ds` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_dataset_feature_dim(
    ds: *const EcDataset,
    out: *mut size_t,
) -> EcStatus {
    guarded(|| {
        if ds.is_null() || out.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        *out = (*ds).inner.feature_dim();
        EcStatus::Ok
    })
}

/// Cached difficulty score of one conversation.
///
/// # Safety
/// `ds` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_dataset_difficulty(
    ds: *const EcDataset,
    index: size_t,
    out: *mut f64,
) -> EcStatus {
    guarded(|| {
        if ds.is_null() || out.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        let dataset = &(*ds).inner;
        if index >= dataset.len() {
            set_error("conversation index out of range");
            return EcStatus::InvalidArgument;
        }
        *out = dataset.difficulty(index);
        EcStatus::Ok
    })
}

/// Copy a conversation id into `buf` (NUL-terminated). `*written` receives
/// the id length excluding the terminator; if `cap` is too small the call
/// fails and `*written` holds the required length.
///
/// # Safety
/// `ds`, `buf`, and `written` must be valid; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_dataset_conversation_id(
    ds: *const EcDataset,
    index: size_t,
    buf: *mut c_char,
    cap: size_t,
    written: *mut size_t,
) -> EcStatus {
    guarded(|| {
        if ds.is_null() || buf.is_null() || written.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        let dataset = &(*ds).inner;
        if index >= dataset.len() {
            set_error("conversation index out of range");
            return EcStatus::InvalidArgument;
        }
        let id = dataset.conversations[index].id.as_bytes();
        *written = id.len();
        if cap < id.len() + 1 {
            set_error("buffer too small for conversation id");
            return EcStatus::InvalidArgument;
        }
        std::ptr::copy_nonoverlapping(id.as_ptr(), buf as *mut u8, id.len());
        *buf.add(id.len()) = 0;
        EcStatus::Ok
    })
}

/// Load a checkpoint. On success `*out` owns the handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_model_load(
    path: *const c_char,
    out: *mut *mut EcModel,
) -> EcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return EcStatus::NullPointer;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match Checkpoint::load(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(EcModel { inner }));
                EcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `model` must come from `ernetcl_model_load` and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_model_free(model: *mut EcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_model_feature_dim(
    model: *const EcModel,
    out: *mut size_t,
) -> EcStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        *out = (*model).inner.config.feature_dim;
        EcStatus::Ok
    })
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_model_num_classes(
    model: *const EcModel,
    out: *mut size_t,
) -> EcStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        *out = (*model).inner.config.num_classes;
        EcStatus::Ok
    })
}

/// Classify one conversation given row-major `[num_utterances, feature_dim]`
/// features; writes one label per utterance into `out_labels`.
///
/// # Safety
/// `features` must hold `num_utterances * feature_dim` doubles and
/// `out_labels` must hold `num_utterances` entries.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_model_predict(
    model: *const EcModel,
    features: *const f64,
    num_utterances: size_t,
    feature_dim: size_t,
    out_labels: *mut u32,
) -> EcStatus {
    guarded(|| {
        if model.is_null() || features.is_null() || out_labels.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        let ckpt = &(*model).inner;
        if num_utterances == 0 {
            set_error("conversation must have at least one utterance");
            return EcStatus::InvalidArgument;
        }
        if feature_dim != ckpt.config.feature_dim {
            set_error("feature_dim does not match the model");
            return EcStatus::InvalidArgument;
        }
        let feats = std::slice::from_raw_parts(features, num_utterances * feature_dim);
        let batch = Batch {
            size: 1,
            max_len: num_utterances,
            feature_dim,
            num_classes: ckpt.config.num_classes,
            features: feats.to_vec(),
            labels: vec![0; num_utterances],
            valid_mask: vec![true; num_utterances],
            lengths: vec![num_utterances],
            conv_ids: vec![String::from("ffi")],
            conv_difficulties: vec![0.0],
        };
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        match forward_pass(&ckpt.params, &batch, Mode::Eval, &mut unused) {
            Ok(fp) => {
                let k = ckpt.config.num_classes;
                for j in 0..num_utterances {
                    let row = &fp.probs[j * k..(j + 1) * k];
                    *out_labels.add(j) = predict(row) as u32;
                }
                EcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Evaluate a model over a dataset.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_model_evaluate(
    model: *const EcModel,
    ds: *const EcDataset,
    out: *mut EcMetrics,
) -> EcStatus {
    guarded(|| {
        if model.is_null() || ds.is_null() || out.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        match evaluate(&(*model).inner, &(*ds).inner) {
            Ok(report) => {
                *out = EcMetrics {
                    accuracy: report.accuracy,
                    weighted_f1: report.weighted_f1,
                    micro_f1: report.micro_f1,
                    macro_f1: report.macro_f1,
                    micro_f1_excl_neutral: report.micro_f1_excl_neutral.unwrap_or(0.0),
                    has_excl_neutral: report.micro_f1_excl_neutral.is_some(),
                };
                EcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Difficulty of one conversation given parallel speaker/label arrays in
/// chronological order.
///
/// # Safety
/// `speakers` and `labels` must hold `len` entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_difficulty(
    speakers: *const u32,
    labels: *const u32,
    len: size_t,
    out: *mut f64,
) -> EcStatus {
    guarded(|| {
        if speakers.is_null() || labels.is_null() || out.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        let speakers = std::slice::from_raw_parts(speakers, len);
        let labels = std::slice::from_raw_parts(labels, len);
        let conv = Conversation {
            id: String::from("ffi"),
            utterances: speakers
                .iter()
                .zip(labels)
                .map(|(&s, &l)| Utterance {
                    speaker: s.to_string(),
                    label: l as usize,
                    features: vec![0.0],
                })
                .collect(),
        };
        match difficulty(&conv) {
            Ok(d) => {
                *out = d;
                EcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Curriculum weight for epoch `epoch` of `max_epochs` under the given
/// schedule.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ernetcl_curriculum_weight(
    epoch: u32,
    max_epochs: u32,
    delta: f64,
    sigma: f64,
    difficulty: f64,
    out: *mut f64,
) -> EcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null pointer");
            return EcStatus::NullPointer;
        }
        let sched = match CurriculumSchedule::new(sigma, delta, max_epochs as usize) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        match weight(epoch as usize, difficulty, &sched) {
            Ok(w) => {
                *out = w;
                EcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
