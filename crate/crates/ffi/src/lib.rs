//! C ABI over the search toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_from_json` or
//! `bn_alphas_derive` and released with the matching `*_free`. Every fallible
//! call returns a [`BnStatus`]; on failure the message is available from
//! [`bn_last_error_message`] on the same thread until the next failing call.
//! Strings returned to the caller are freed with [`bn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use budgetnas::cost::{expected_cost, expected_cost_grad, softmax_f64};
use budgetnas::gradcheck::{run_gradcheck, GradCheckConfig};
use budgetnas::primitives::{primitive_param_count, PrimitiveKind, PrimitiveSpec};
use budgetnas::supernet::{derive_genotype, genotype_param_count, AlphaStore, Genotype};
use budgetnas::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Config = 4,
    Validation = 5,
    Parse = 6,
    Coverage = 7,
    Io = 8,
    Numeric = 9,
    Diverged = 10,
    Internal = 11,
    Panic = 12,
}

/// A derived or loaded genotype.
pub struct BnGenotype(Genotype);

/// An architecture-parameter snapshot.
pub struct BnAlphas(AlphaStore);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> BnStatus {
    match e {
        Error::Input(_) | Error::Dimension { .. } => BnStatus::InvalidInput,
        Error::Config(_) => BnStatus::Config,
        Error::Validation(_) => BnStatus::Validation,
        Error::Parse { .. } | Error::DuplicateKey { .. } | Error::Json(_) | Error::Csv(_) | Error::Format { .. } => {
            BnStatus::Parse
        }
        Error::Coverage { .. } => BnStatus::Coverage,
        Error::Io { .. } => BnStatus::Io,
        Error::Numeric { .. } | Error::DegenerateBatch { .. } => BnStatus::Numeric,
        Error::Divergence { .. } => BnStatus::Diverged,
        Error::Contract(_) => BnStatus::Internal,
    }
}

struct Fail(BnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BnStatus::Panic
        }
    }
}

fn null() -> Fail {
    Fail(BnStatus::NullPointer, "null pointer argument".into())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BnStatus::InvalidUtf8, "argument is not UTF-8".into()))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(null)
}

unsafe fn ref_arg<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(null)
}

fn give_string(s: String, out: &mut *mut c_char) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(BnStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failing call on this thread, or NULL. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn bn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a genotype JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_genotype_from_json(json: *const c_char, out: *mut *mut BnGenotype) -> BnStatus {
    guard(|| {
        let out = out_arg(out)?;
        let g = Genotype::from_json(str_arg(json)?)?;
        *out = Box::into_raw(Box::new(BnGenotype(g)));
        Ok(())
    })
}

/// Serializes a genotype; free the result with `bn_string_free`.
///
/// # Safety
/// `g` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_genotype_to_json(g: *const BnGenotype, out: *mut *mut c_char) -> BnStatus {
    guard(|| {
        let out = out_arg(out)?;
        give_string(ref_arg(g)?.0.to_json()?, out)
    })
}

/// Releases a genotype. NULL is ignored.
///
/// # Safety
/// `g` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bn_genotype_free(g: *mut BnGenotype) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Whether the normal cell holds at most two skip-connects, and how many it holds.
///
/// # Safety
/// `g` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_genotype_validity(g: *const BnGenotype, valid: *mut bool, skip_count: *mut usize) -> BnStatus {
    guard(|| {
        let g = &ref_arg(g)?.0;
        let (valid, skip_count) = (out_arg(valid)?, out_arg(skip_count)?);
        *valid = g.validity().is_valid();
        *skip_count = g.normal_skip_count();
        Ok(())
    })
}

/// Parameter count of the evaluation network for `g` at the given size.
///
/// # Safety
/// `g` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_genotype_param_count(
    g: *const BnGenotype,
    depth: usize,
    init_channels: usize,
    num_classes: usize,
    out: *mut u64,
) -> BnStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = genotype_param_count(&ref_arg(g)?.0, depth, init_channels, num_classes)?;
        Ok(())
    })
}

/// Parses an α snapshot.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_alphas_from_json(json: *const c_char, out: *mut *mut BnAlphas) -> BnStatus {
    guard(|| {
        let out = out_arg(out)?;
        let a = AlphaStore::from_json(str_arg(json)?)?;
        *out = Box::into_raw(Box::new(BnAlphas(a)));
        Ok(())
    })
}

/// Releases an α snapshot. NULL is ignored.
///
/// # Safety
/// `a` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bn_alphas_free(a: *mut BnAlphas) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Derives the discrete genotype of an α snapshot, recorded at the given
/// evaluation width and depth.
///
/// # Safety
/// `a` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_alphas_derive(
    a: *const BnAlphas,
    init_channels: usize,
    depth: usize,
    out: *mut *mut BnGenotype,
) -> BnStatus {
    guard(|| {
        let out = out_arg(out)?;
        let a = &ref_arg(a)?.0;
        if init_channels == 0 || depth < 2 {
            return Err(Fail(BnStatus::Config, "init_channels must be positive and depth at least 2".into()));
        }
        *out = Box::into_raw(Box::new(BnGenotype(derive_genotype(a, init_channels, depth))));
        Ok(())
    })
}

/// Expected cost `Σ softmax(α)_i c_i` of one edge with `k` candidates and,
/// when `grad` is not NULL, its gradient with respect to α (length `k`).
///
/// # Safety
/// `alpha` and `costs` must point to `k` doubles; `grad`, if not NULL, to `k`
/// writable doubles; `cost` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_expected_cost(
    alpha: *const f64,
    costs: *const f64,
    k: usize,
    cost: *mut f64,
    grad: *mut f64,
) -> BnStatus {
    guard(|| {
        if alpha.is_null() || costs.is_null() {
            return Err(null());
        }
        if k == 0 {
            return Err(Fail(BnStatus::InvalidInput, "an edge needs at least one candidate".into()));
        }
        let cost = out_arg(cost)?;
        let a = std::slice::from_raw_parts(alpha, k);
        let c = std::slice::from_raw_parts(costs, k);
        if a.iter().chain(c).any(|v| !v.is_finite()) {
            return Err(Fail(BnStatus::InvalidInput, "logits and costs must be finite".into()));
        }
        let p = softmax_f64(a);
        *cost = expected_cost(&p, c);
        if !grad.is_null() {
            std::slice::from_raw_parts_mut(grad, k).copy_from_slice(&expected_cost_grad(&p, c));
        }
        Ok(())
    })
}

/// Parameters of one primitive op, named as in genotype files
/// (e.g. `"sep_conv_3x3"`), at `channels` and `stride` (1 or 2).
///
/// # Safety
/// `op` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_primitive_param_count(
    op: *const c_char,
    channels: usize,
    stride: usize,
    out: *mut u64,
) -> BnStatus {
    guard(|| {
        let out = out_arg(out)?;
        let kind: PrimitiveKind = str_arg(op)?.parse()?;
        let spec = PrimitiveSpec::new(kind, channels, stride, 32, 32);
        spec.validate()?;
        *out = primitive_param_count(&spec);
        Ok(())
    })
}

/// Runs the three-way expected-cost gradient check over `cases` random
/// cases and reports the number that failed.
///
/// # Safety
/// `failures` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bn_gradcheck(seed: u64, cases: usize, failures: *mut usize) -> BnStatus {
    guard(|| {
        let failures = out_arg(failures)?;
        let cfg = GradCheckConfig {
            seed,
            cases,
            ..GradCheckConfig::default()
        };
        *failures = run_gradcheck(&cfg)?.failures;
        Ok(())
    })
}
