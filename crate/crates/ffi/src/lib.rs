//! C ABI over `dgbs`.
//!
//! Every fallible call returns a [`DgbsStatus`]; on failure the message is
//! available from [`dgbs_last_error`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_from_*` calls and released with the
//! matching `*_free`. Strings returned to the caller are released with
//! [`dgbs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dgbs::config::parse_model;
use dgbs::hafnian::DetectionPattern;
use dgbs::probability::{ModelKind, Setup};
use dgbs::reconstruction::{self, ReconstructionOptions, ReconstructionResult};
use dgbs::state::GaussianState;
use dgbs::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgbsStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Dimension = 3,
    Unphysical = 4,
    IllConditioned = 5,
    InvalidArgument = 6,
    Budget = 7,
    Truncation = 8,
    Io = 9,
    Parse = 10,
    Panic = 11,
}

impl From<&Error> for DgbsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Schema { .. } => DgbsStatus::Config,
            Error::Dimension(_) => DgbsStatus::Dimension,
            Error::Unphysical(_) => DgbsStatus::Unphysical,
            Error::IllConditioned { .. } => DgbsStatus::IllConditioned,
            Error::InvalidArgument(_) => DgbsStatus::InvalidArgument,
            Error::Budget { .. } => DgbsStatus::Budget,
            Error::Truncation { .. } => DgbsStatus::Truncation,
            Error::Io(_) => DgbsStatus::Io,
            Error::Json(_) | Error::Csv(_) => DgbsStatus::Parse,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DgbsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DgbsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            DgbsStatus::Panic
        }
    }
}

struct Failure(DgbsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(DgbsStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DgbsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DgbsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn dgbs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn dgbs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned by the library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dgbs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Output state of a source and circuit.
pub struct DgbsState {
    setup: Setup,
    quantum: GaussianState,
    classical: Option<GaussianState>,
}

/// Builds a state from `{"source": {...}, "transfer": {"t": matrix}}`.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dgbs_state_from_json(json: *const c_char, out: *mut *mut DgbsState) -> DgbsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(json, "json")?;
        let setup: Setup = serde_json::from_str(text).map_err(Error::from)?;
        let quantum = setup.state_for(ModelKind::Full)?;
        let classical = setup.state_for(ModelKind::Classical).ok();
        *out = Box::into_raw(Box::new(DgbsState {
            setup,
            quantum,
            classical,
        }));
        Ok(())
    })
}

/// # Safety
/// `state` must come from [`dgbs_state_from_json`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dgbs_state_free(state: *mut DgbsState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Number of output modes; 0 for a null handle.
///
/// # Safety
/// `state` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dgbs_state_modes(state: *const DgbsState) -> usize {
    state.as_ref().map_or(0, |s| s.setup.modes())
}

/// Probability of the photon-number pattern `counts[0..len]` under `model`
/// (`"full"`, `"korder:K"`, `"squeezer_only"`, `"classical"`).
///
/// # Safety
/// `counts` must point to `len` values; `model` must be nul-terminated;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dgbs_pattern_probability(
    state: *const DgbsState,
    counts: *const u32,
    len: usize,
    model: *const c_char,
    out: *mut f64,
) -> DgbsStatus {
    guard(|| {
        let s = state.as_ref().ok_or_else(|| null("state"))?;
        if counts.is_null() {
            return Err(null("counts"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = parse_model(str_arg(model, "model")?)?;
        let pattern = DetectionPattern::new(std::slice::from_raw_parts(counts, len).to_vec());
        let st = match spec.kind {
            ModelKind::Classical => s.classical.as_ref().ok_or_else(|| {
                Failure(DgbsStatus::Unphysical, "no classical surrogate for this setup".into())
            })?,
            _ => &s.quantum,
        };
        *out = dgbs::probability::pattern_probability(st, &pattern, spec)?;
        Ok(())
    })
}

/// Total variation distance of two distributions of length `n`.
///
/// # Safety
/// `p` and `q` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dgbs_tvd(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> DgbsStatus {
    guard(|| {
        if p.is_null() || q.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        *out = dgbs::metrics::tvd_slices(std::slice::from_raw_parts(p, n), std::slice::from_raw_parts(q, n))?;
        Ok(())
    })
}

/// Reconstructed kernel.
pub struct DgbsReconstruction {
    result: ReconstructionResult,
}

/// Reconstructs from a records CSV. `options_json` may be null for defaults.
///
/// # Safety
/// String arguments must be null or nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dgbs_reconstruct_csv(
    path: *const c_char,
    options_json: *const c_char,
    out: *mut *mut DgbsReconstruction,
) -> DgbsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let opts: ReconstructionOptions = if options_json.is_null() {
            ReconstructionOptions::default()
        } else {
            serde_json::from_str(str_arg(options_json, "options_json")?).map_err(Error::from)?
        };
        let records = reconstruction::load_records_csv(Path::new(path))?;
        let result = reconstruction::reconstruct(&records, &opts)?;
        *out = Box::into_raw(Box::new(DgbsReconstruction { result }));
        Ok(())
    })
}

/// # Safety
/// `r` must come from [`dgbs_reconstruct_csv`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dgbs_reconstruction_free(r: *mut DgbsReconstruction) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of modes of a reconstruction; 0 for a null handle.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dgbs_reconstruction_modes(r: *const DgbsReconstruction) -> usize {
    r.as_ref().map_or(0, |r| r.result.d)
}

/// 1 when the reconstructed kernel is a valid state, 0 otherwise.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dgbs_reconstruction_is_physical(r: *const DgbsReconstruction) -> i32 {
    r.as_ref().map_or(0, |r| r.result.physical as i32)
}

/// Copies the real first-input response `γ` into `out[0..len]`; `len` must
/// equal the mode count.
///
/// # Safety
/// `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn dgbs_reconstruction_gamma(r: *const DgbsReconstruction, out: *mut f64, len: usize) -> DgbsStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("reconstruction"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != r.result.d {
            return Err(Error::Dimension(format!("buffer holds {len} values, need {}", r.result.d)).into());
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&r.result.gamma);
        Ok(())
    })
}

/// Full result as JSON; release with [`dgbs_string_free`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dgbs_reconstruction_to_json(r: *const DgbsReconstruction, out: *mut *mut c_char) -> DgbsStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("reconstruction"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = serde_json::to_string(&r.result).map_err(Error::from)?;
        *out = CString::new(text).expect("JSON has no nul").into_raw();
        Ok(())
    })
}
