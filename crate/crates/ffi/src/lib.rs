//! C ABI over `owl-core`.
//!
//! Every function returns an [`OwlStatus`]. On failure the message is kept
//! per thread and read back with [`owl_last_error`]. Handles are opaque and
//! must be released with the matching `_free` function; passing NULL to a
//! `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use owl_core::alloc::{allocate_sparsity, layer_shapes, Scheme, SparsityPlan};
use owl_core::calib::{CalibrationStats, TokenCorpus};
use owl_core::eval::perplexity;
use owl_core::outlier::{build_profile, layer_outlier_ratio, Granularity, OutlierProfile, ProfileUnit};
use owl_core::pipeline::calibrate;
use owl_core::prune::{apply_masks, build_mask, score_layers, Grouping, Metric};
use owl_core::{Checkpoint, Matrix, OwlError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OwlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    PlanMismatch = 6,
    Panic = 7,
}

pub struct OwlCheckpoint(Checkpoint);
pub struct OwlCorpus(TokenCorpus);
pub struct OwlStats(CalibrationStats);
pub struct OwlProfile(OutlierProfile);
pub struct OwlPlan(SparsityPlan);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(OwlStatus, String);

impl From<OwlError> for Failure {
    fn from(e: OwlError) -> Self {
        let status = match &e {
            OwlError::Io(_) => OwlStatus::Io,
            OwlError::Format(_) | OwlError::Truncated(_) | OwlError::Json(_) | OwlError::InvalidCheckpoint(_) => {
                OwlStatus::Format
            }
            OwlError::NonFinite(_) => OwlStatus::Numeric,
            OwlError::PlanMismatch(_) | OwlError::MissingStats(_) => OwlStatus::PlanMismatch,
            _ => OwlStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(OwlStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OwlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OwlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            OwlStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(OwlStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(OwlStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(OwlStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(OwlStatus::NullPointer, format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn parsed<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| invalid(format!("{what}: {e}")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message for the last failed call on this thread, or NULL after a
/// success. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn owl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn owl_checkpoint_load(path: *const c_char, out: *mut *mut OwlCheckpoint) -> OwlStatus {
    guard(|| {
        let path = text(path, "path")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(OwlCheckpoint(Checkpoint::load(path)?));
        Ok(())
    })
}

/// # Safety
/// `ckpt` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn owl_checkpoint_save(ckpt: *const OwlCheckpoint, path: *const c_char) -> OwlStatus {
    guard(|| {
        let ckpt = borrow(ckpt, "checkpoint")?;
        ckpt.0.save(text(path, "path")?)?;
        Ok(())
    })
}

/// Number of weights in the prunable projections.
///
/// # Safety
/// `ckpt` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_checkpoint_prunable_params(ckpt: *const OwlCheckpoint, out: *mut usize) -> OwlStatus {
    guard(|| {
        *out_ptr(out, "out")? = borrow(ckpt, "checkpoint")?.0.num_prunable_params();
        Ok(())
    })
}

/// # Safety
/// `ckpt` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn owl_checkpoint_free(ckpt: *mut OwlCheckpoint) {
    free(ckpt);
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn owl_corpus_load(path: *const c_char, out: *mut *mut OwlCorpus) -> OwlStatus {
    guard(|| {
        let path = text(path, "path")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(OwlCorpus(TokenCorpus::load(path)?));
        Ok(())
    })
}

/// # Safety
/// `tokens` must hold `len` ids and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_corpus_from_tokens(
    vocab_size: usize,
    tokens: *const u32,
    len: usize,
    out: *mut *mut OwlCorpus,
) -> OwlStatus {
    guard(|| {
        let tokens = slice(tokens, len, "tokens")?.to_vec();
        let out = out_ptr(out, "out")?;
        *out = boxed(OwlCorpus(TokenCorpus::new(vocab_size, tokens)?));
        Ok(())
    })
}

/// # Safety
/// `corpus` must be NULL or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn owl_corpus_free(corpus: *mut OwlCorpus) {
    free(corpus);
}

/// Samples `nsamples` windows of `seqlen` tokens with `seed` and collects
/// per-layer input feature norms.
///
/// # Safety
/// Handles must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_calibrate(
    ckpt: *const OwlCheckpoint,
    corpus: *const OwlCorpus,
    nsamples: usize,
    seqlen: usize,
    seed: u64,
    out: *mut *mut OwlStats,
) -> OwlStatus {
    guard(|| {
        let ckpt = borrow(ckpt, "checkpoint")?;
        let corpus = borrow(corpus, "corpus")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(OwlStats(calibrate(&ckpt.0, &corpus.0, nsamples, seqlen, seed)?));
        Ok(())
    })
}

/// # Safety
/// `stats` must be NULL or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn owl_stats_free(stats: *mut OwlStats) {
    free(stats);
}

/// `granularity` is `"per_layer"` or `"per_block"`.
///
/// # Safety
/// Handles must come from this library, `granularity` must be
/// NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn owl_profile_build(
    ckpt: *const OwlCheckpoint,
    stats: *const OwlStats,
    m: f64,
    granularity: *const c_char,
    out: *mut *mut OwlProfile,
) -> OwlStatus {
    guard(|| {
        let ckpt = borrow(ckpt, "checkpoint")?;
        let stats = borrow(stats, "stats")?;
        let g: Granularity = parsed(text(granularity, "granularity")?, "granularity")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(OwlProfile(build_profile(&ckpt.0, &stats.0, m, g)?));
        Ok(())
    })
}

/// # Safety
/// `profile` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_profile_len(profile: *const OwlProfile, out: *mut usize) -> OwlStatus {
    guard(|| {
        *out_ptr(out, "out")? = borrow(profile, "profile")?.0.len();
        Ok(())
    })
}

/// Outlier ratio of unit `index`, in model order.
///
/// # Safety
/// `profile` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_profile_ratio(profile: *const OwlProfile, index: usize, out: *mut f64) -> OwlStatus {
    guard(|| {
        let profile = borrow(profile, "profile")?;
        let unit = profile
            .0
            .units
            .get(index)
            .ok_or_else(|| invalid(format!("unit {index} of {}", profile.0.len())))?;
        *out_ptr(out, "out")? = unit.d;
        Ok(())
    })
}

/// # Safety
/// `profile` must be NULL or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn owl_profile_free(profile: *mut OwlProfile) {
    free(profile);
}

/// `scheme` is one of `uniform`, `owl`, `owl-inverse`, `er`, `er-plus`.
/// `ckpt` supplies layer shapes for the ER schemes.
///
/// # Safety
/// Handles must come from this library, `scheme` must be NUL-terminated
/// and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn owl_plan_allocate(
    profile: *const OwlProfile,
    ckpt: *const OwlCheckpoint,
    scheme: *const c_char,
    sparsity: f64,
    lambda: f64,
    out: *mut *mut OwlPlan,
) -> OwlStatus {
    guard(|| {
        let profile = borrow(profile, "profile")?;
        let ckpt = borrow(ckpt, "checkpoint")?;
        let scheme: Scheme = parsed(text(scheme, "scheme")?, "scheme")?;
        let out = out_ptr(out, "out")?;
        let plan = allocate_sparsity(&profile.0, scheme, sparsity, lambda, &layer_shapes(&ckpt.0))?;
        *out = boxed(OwlPlan(plan));
        Ok(())
    })
}

/// # Safety
/// `plan` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_plan_len(plan: *const OwlPlan, out: *mut usize) -> OwlStatus {
    guard(|| {
        *out_ptr(out, "out")? = borrow(plan, "plan")?.0.entries.len();
        Ok(())
    })
}

/// # Safety
/// `plan` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_plan_sparsity(plan: *const OwlPlan, index: usize, out: *mut f64) -> OwlStatus {
    guard(|| {
        let plan = borrow(plan, "plan")?;
        let entry = plan
            .0
            .entries
            .get(index)
            .ok_or_else(|| invalid(format!("entry {index} of {}", plan.0.entries.len())))?;
        *out_ptr(out, "out")? = entry.s;
        Ok(())
    })
}

/// # Safety
/// `plan` must be NULL or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn owl_plan_free(plan: *mut OwlPlan) {
    free(plan);
}

/// Prunes a copy of `ckpt` following `plan`. `metric` is `magnitude` or
/// `wanda`; `grouping` is `per_output`, `per_layer`, `per_block` or
/// `global`.
///
/// # Safety
/// Handles must come from this library, strings must be NUL-terminated
/// and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn owl_prune(
    ckpt: *const OwlCheckpoint,
    stats: *const OwlStats,
    plan: *const OwlPlan,
    metric: *const c_char,
    grouping: *const c_char,
    out: *mut *mut OwlCheckpoint,
) -> OwlStatus {
    guard(|| {
        let ckpt = borrow(ckpt, "checkpoint")?;
        let stats = borrow(stats, "stats")?;
        let plan = borrow(plan, "plan")?;
        let metric: Metric = parsed(text(metric, "metric")?, "metric")?;
        let grouping: Grouping = parsed(text(grouping, "grouping")?, "grouping")?;
        let out = out_ptr(out, "out")?;
        let scores = score_layers(&ckpt.0, &stats.0, metric)?;
        let masks = build_mask(&scores, &plan.0, grouping)?;
        *out = boxed(OwlCheckpoint(apply_masks(&ckpt.0, &masks)?));
        Ok(())
    })
}

/// Perplexity over non-overlapping windows of `seqlen` tokens.
///
/// # Safety
/// Handles must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_perplexity(
    ckpt: *const OwlCheckpoint,
    corpus: *const OwlCorpus,
    seqlen: usize,
    out: *mut f64,
) -> OwlStatus {
    guard(|| {
        let ckpt = borrow(ckpt, "checkpoint")?;
        let corpus = borrow(corpus, "corpus")?;
        *out_ptr(out, "out")? = perplexity(&ckpt.0, &corpus.0.tokens, seqlen)?;
        Ok(())
    })
}

/// Fraction of `rows * cols` row-major scores strictly above `m` times
/// their mean.
///
/// # Safety
/// `scores` must hold `rows * cols` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owl_outlier_ratio(
    scores: *const f32,
    rows: usize,
    cols: usize,
    m: f64,
    out: *mut f64,
) -> OwlStatus {
    guard(|| {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid("rows * cols overflows"))?;
        let data = slice(scores, len, "scores")?.to_vec();
        let out = out_ptr(out, "out")?;
        *out = layer_outlier_ratio(&Matrix::new(rows, cols, data)?, m)?;
        Ok(())
    })
}

/// Outlier-weighted sparsities for `n` units with ratios `ratios` and
/// parameter counts `params`, written to `out` (length `n`). The
/// parameter-weighted mean equals `sparsity` and every value stays within
/// `lambda` of it.
///
/// # Safety
/// `ratios`, `params` and `out` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn owl_allocate_raw(
    ratios: *const f64,
    params: *const usize,
    n: usize,
    sparsity: f64,
    lambda: f64,
    out: *mut f64,
) -> OwlStatus {
    guard(|| {
        let ratios = slice(ratios, n, "ratios")?;
        let params = slice(params, n, "params")?;
        if n > 0 && out.is_null() {
            return Err(Failure(OwlStatus::NullPointer, "out is NULL".into()));
        }
        if let Some(d) = ratios.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Failure(OwlStatus::Numeric, format!("outlier ratio {d} outside [0, 1]")));
        }
        if params.contains(&0) {
            return Err(invalid("every unit needs at least one parameter"));
        }
        let profile = OutlierProfile {
            granularity: Granularity::PerLayer,
            m: 1.0,
            units: ratios
                .iter()
                .zip(params)
                .enumerate()
                .map(|(i, (&d, &p))| ProfileUnit {
                    id: format!("unit.{i}"),
                    d,
                    params: p,
                })
                .collect(),
        };
        let plan = allocate_sparsity(&profile, Scheme::Owl, sparsity, lambda, &[])?;
        let out = std::slice::from_raw_parts_mut(out, n);
        for (o, e) in out.iter_mut().zip(&plan.entries) {
            *o = e.s;
        }
        Ok(())
    })
}
