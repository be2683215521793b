//! C ABI over `eagle-core`.
//!
//! Every function returns an [`EagleStatus`]; on failure the message is
//! available from [`eagle_last_error`] on the same thread. Objects are
//! opaque handles released with their `_free` function. Panics never cross
//! the boundary; they surface as [`EagleStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::OnceLock;

use eagle_core::coreset::{build_coreset, unsampled_of, CoresetError, PatchFeature, ProjectionMatrix, StartRule, UnsampledIndex};
use eagle_core::dbt::{classify, fit_threshold, Decision, DbtError, ThresholdModel, TrainingScoreSet};
use eagle_core::feature_store::{load_feature_grid, FeatureError};
use eagle_core::prompting::{parse_answer, ParsedAnswer, SYSTEM_INSTRUCTION};
use eagle_core::scoring::{MemoryBank, ScoringError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EagleStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    InsufficientData = 6,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EagleAnswer {
    No = 0,
    Yes = 1,
    Unparseable = -1,
}

/// Fitted threshold model, passed by value.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EagleThreshold {
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub tau: f64,
    pub s_max: f64,
    pub n: usize,
}

/// Memory bank with optional coreset provenance.
pub struct EagleBank {
    bank: MemoryBank,
    unsampled: Option<UnsampledIndex>,
}

struct FfiError(EagleStatus, String);

impl From<CoresetError> for FfiError {
    fn from(e: CoresetError) -> Self {
        let code = match e {
            CoresetError::DimensionMismatch { .. } | CoresetError::ProjectionMismatch { .. } => EagleStatus::Dimension,
            CoresetError::Empty => EagleStatus::InsufficientData,
            _ => EagleStatus::InvalidArgument,
        };
        FfiError(code, e.to_string())
    }
}

impl From<ScoringError> for FfiError {
    fn from(e: ScoringError) -> Self {
        let code = match e {
            ScoringError::DimensionMismatch { .. } => EagleStatus::Dimension,
            ScoringError::EmptyBank | ScoringError::EmptyGrid => EagleStatus::InsufficientData,
            ScoringError::TargetTooSmall { .. } => EagleStatus::InvalidArgument,
        };
        FfiError(code, e.to_string())
    }
}

impl From<DbtError> for FfiError {
    fn from(e: DbtError) -> Self {
        let code = match e {
            DbtError::InsufficientData { .. } | DbtError::DegenerateFit => EagleStatus::InsufficientData,
            _ => EagleStatus::InvalidArgument,
        };
        FfiError(code, e.to_string())
    }
}

impl From<FeatureError> for FfiError {
    fn from(e: FeatureError) -> Self {
        let code = match e {
            FeatureError::Io { .. } => EagleStatus::Io,
            FeatureError::InvalidArgument(_) => EagleStatus::InvalidArgument,
            _ => EagleStatus::Format,
        };
        FfiError(code, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> EagleStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EagleStatus::Ok,
        Ok(Err(FfiError(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            EagleStatus::Panic
        }
    }
}

fn null(what: &str) -> FfiError {
    FfiError(EagleStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> FfiError {
    FfiError(EagleStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], FfiError> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], FfiError> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be null or a valid handle.
unsafe fn bank_ref<'a>(p: *const EagleBank) -> Result<&'a EagleBank, FfiError> {
    p.as_ref().ok_or_else(|| null("bank"))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn eagle_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eagle_version() -> *const c_char {
    static V: OnceLock<CString> = OnceLock::new();
    V.get_or_init(|| CString::new(env!("CARGO_PKG_VERSION")).unwrap()).as_ptr()
}

/// System instruction sent with every model request, as a static string.
#[no_mangle]
pub extern "C" fn eagle_system_instruction() -> *const c_char {
    static S: OnceLock<CString> = OnceLock::new();
    S.get_or_init(|| CString::new(SYSTEM_INSTRUCTION).unwrap()).as_ptr()
}

/// Selects a memory bank from `n` row-major features of width `dim` by
/// greedy k-center. Rows are grouped into images of `patches_per_image`
/// consecutive rows. `projection_dim` 0 selects in the original space;
/// otherwise a seeded Gaussian projection to that width is used.
///
/// # Safety
/// `features` must hold `n * dim` floats and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_bank_build(
    features: *const f32,
    n: usize,
    dim: usize,
    patches_per_image: usize,
    target_fraction: f64,
    projection_dim: usize,
    seed: u64,
    out: *mut *mut EagleBank,
) -> EagleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 || patches_per_image == 0 {
            return Err(invalid("dim and patches_per_image must be positive"));
        }
        if !n.is_multiple_of(patches_per_image) {
            return Err(invalid("n is not a multiple of patches_per_image"));
        }
        let len = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let data = slice(features, len, "features")?;
        let feats: Vec<PatchFeature> = data
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, v)| PatchFeature {
                vector: v.to_vec(),
                source_image: i / patches_per_image,
                source_patch: i % patches_per_image,
            })
            .collect();
        let proj = (projection_dim > 0).then(|| ProjectionMatrix::gaussian(seed, projection_dim, dim));
        let trace = build_coreset(&feats, target_fraction, proj.as_ref(), StartRule::MaxNorm)?;
        let bank = MemoryBank::from_trace(&trace)?;
        let handle = Box::new(EagleBank {
            bank,
            unsampled: Some(unsampled_of(&trace)),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Wraps `n` row-major bank rows of width `dim` without selection.
///
/// # Safety
/// `rows` must hold `n * dim` floats and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_bank_from_rows(
    rows: *const f32,
    n: usize,
    dim: usize,
    out: *mut *mut EagleBank,
) -> EagleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let data = slice(rows, len, "rows")?.to_vec();
        let bank = MemoryBank::new(dim, data)?;
        *out = Box::into_raw(Box::new(EagleBank { bank, unsampled: None }));
        Ok(())
    })
}

/// Loads a bank written by the `build` stage (`bank.eaglfeat`).
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_bank_load(path: *const c_char, out: *mut *mut EagleBank) -> EagleStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|e| invalid(e.to_string()))?;
        let grid = load_feature_grid(path)?;
        let bank = MemoryBank::new(grid.channels(), grid.patch_matrix())?;
        *out = Box::into_raw(Box::new(EagleBank { bank, unsampled: None }));
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle from this library; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eagle_bank_free(bank: *mut EagleBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// # Safety
/// `bank` must be a valid handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_bank_len(bank: *const EagleBank, out: *mut usize) -> EagleStatus {
    guard(|| {
        let b = bank_ref(bank)?;
        *out.as_mut().ok_or_else(|| null("out"))? = b.bank.len();
        Ok(())
    })
}

/// # Safety
/// `bank` must be a valid handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_bank_dim(bank: *const EagleBank, out: *mut usize) -> EagleStatus {
    guard(|| {
        let b = bank_ref(bank)?;
        *out.as_mut().ok_or_else(|| null("out"))? = b.bank.dim();
        Ok(())
    })
}

/// Number of unsampled patches of `image`. Only banks made by
/// [`eagle_bank_build`] carry provenance.
///
/// # Safety
/// `bank` must be a valid handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_bank_unsampled_count(
    bank: *const EagleBank,
    image: usize,
    out: *mut usize,
) -> EagleStatus {
    guard(|| {
        let b = bank_ref(bank)?;
        let idx = b
            .unsampled
            .as_ref()
            .ok_or_else(|| invalid("bank has no coreset provenance"))?;
        if image >= idx.by_image.len() {
            return Err(invalid(format!("image {image} out of range")));
        }
        *out.as_mut().ok_or_else(|| null("out"))? = idx.of_image(image).len();
        Ok(())
    })
}

/// Exact nearest-neighbour distance of each of `n` queries to the bank.
/// `out_index` may be null.
///
/// # Safety
/// `queries` must hold `n * dim` floats; `out_dist` (and `out_index` when
/// non-null) must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn eagle_bank_score(
    bank: *const EagleBank,
    queries: *const f32,
    n: usize,
    dim: usize,
    out_dist: *mut f64,
    out_index: *mut usize,
) -> EagleStatus {
    guard(|| {
        let b = bank_ref(bank)?;
        if dim != b.bank.dim() {
            return Err(FfiError(
                EagleStatus::Dimension,
                format!("query dimension {dim} does not match bank dimension {}", b.bank.dim()),
            ));
        }
        let len = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let q = slice(queries, len, "queries")?;
        let dist = slice_mut(out_dist, n, "out_dist")?;
        let hits = if n == 0 { Vec::new() } else { b.bank.nearest_batch(q)? };
        for (d, (_, v)) in dist.iter_mut().zip(&hits) {
            *d = *v;
        }
        if !out_index.is_null() {
            let idx = slice_mut(out_index, n, "out_index")?;
            for (d, (i, _)) in idx.iter_mut().zip(&hits) {
                *d = *i;
            }
        }
        Ok(())
    })
}

impl From<ThresholdModel> for EagleThreshold {
    fn from(m: ThresholdModel) -> Self {
        Self {
            mu: m.mu,
            sigma: m.sigma,
            kappa: m.kappa,
            tau: m.tau,
            s_max: m.s_max,
            n: m.n,
        }
    }
}

/// Fits `τ = μ + κσ` (population σ) over `n` training image scores.
///
/// # Safety
/// `scores` must hold `n` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_threshold_fit(
    scores: *const f64,
    n: usize,
    kappa: f64,
    out: *mut EagleThreshold,
) -> EagleStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !kappa.is_finite() {
            return Err(invalid("kappa must be finite"));
        }
        let xs = slice(scores, n, "scores")?;
        if let Some(i) = xs.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("score {i} is not finite")));
        }
        *out = fit_threshold(&TrainingScoreSet::from_scores(xs.to_vec()), kappa)?.into();
        Ok(())
    })
}

/// Writes 1 to `abnormal` when `score ≥ τ`, and 1 to `low_confidence` when
/// `τ ≤ score ≤ s_max`; 0 otherwise. Either output may be null.
///
/// # Safety
/// `threshold` must be valid; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_classify(
    threshold: *const EagleThreshold,
    score: f64,
    abnormal: *mut i32,
    low_confidence: *mut i32,
) -> EagleStatus {
    guard(|| {
        let t = threshold.as_ref().ok_or_else(|| null("threshold"))?;
        let model = ThresholdModel {
            mu: t.mu,
            sigma: t.sigma,
            kappa: t.kappa,
            tau: t.tau,
            s_max: t.s_max,
            n: t.n,
            evt: None,
        };
        let v = classify(score, &model);
        if let Some(a) = abnormal.as_mut() {
            *a = i32::from(v.decision == Decision::Abnormal);
        }
        if let Some(l) = low_confidence.as_mut() {
            *l = i32::from(v.low_confidence);
        }
        Ok(())
    })
}

/// Maps a model reply to yes/no/unparseable.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eagle_parse_answer(text: *const c_char, out: *mut EagleAnswer) -> EagleStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = CStr::from_ptr(text).to_string_lossy();
        *out = match parse_answer(&s) {
            ParsedAnswer::DefectYes => EagleAnswer::Yes,
            ParsedAnswer::DefectNo => EagleAnswer::No,
            ParsedAnswer::Unparseable => EagleAnswer::Unparseable,
        };
        Ok(())
    })
}

/// Multiplies the entries of an attention row whose `mask` byte is nonzero
/// by `factor`, then optionally rescales the row to sum to 1.
///
/// # Safety
/// `row` and `mask` must each hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn eagle_caas_scale_row(
    row: *mut f64,
    mask: *const u8,
    len: usize,
    factor: f64,
    renormalize: bool,
) -> EagleStatus {
    guard(|| {
        let m = slice(mask, len, "mask")?;
        let r = slice_mut(row, len, "row")?;
        eagle_core::caas::scale_attention_row(r, |j| m[j] != 0, factor, renormalize);
        Ok(())
    })
}
