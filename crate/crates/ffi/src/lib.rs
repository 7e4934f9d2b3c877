//! C ABI over the calibration, sensitivity and marking pipeline.
//!
//! Conventions:
//! - Objects are created behind opaque handles and released with the matching
//!   `*_free` function; handles must not be used after freeing.
//! - Every fallible call returns an [`RtStatus`]; on failure a message is
//!   stored in thread-local state and can be fetched with
//!   [`rt_last_error_message`].
//! - Matrix buffers are row-major `double` arrays owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use randthin::calibrate::{calibrate_all, CalibrationSettings, PriorSpec};
use randthin::error::Error;
use randthin::io;
use randthin::marking;
use randthin::portfolio::{DiscountSpec, PortfolioSnapshot, TrancheSpec};
use randthin::sensitivity::{single_name_deltas, DeltaMethod};
use randthin::tail::TailCurve;
use randthin::tdmatrix::TdMatrixSet;
use randthin::top::{enforce_consistency, BirthProcessTop};
use randthin::MaturityGrid;

/// Result codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtStatus {
    RtOk = 0,
    /// Invalid or contradictory input.
    RtValidationError = 1,
    /// A numerical routine failed (non-convergence, degenerate column, ...).
    RtNumericalError = 2,
    RtNullPointer = 3,
    RtInvalidUtf8 = 4,
    RtIoError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized: Vec<u8> = message.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_from(err: &Error) -> RtStatus {
    set_error(&err.to_string());
    match err {
        Error::Invalid(_) | Error::Infeasible(_) => RtStatus::RtValidationError,
        Error::NonConvergence { .. } | Error::Numerical(_) => RtStatus::RtNumericalError,
        Error::Io(_) | Error::Parse { .. } => RtStatus::RtIoError,
    }
}

fn null_pointer(what: &str) -> RtStatus {
    set_error(&format!("null pointer: {what}"));
    RtStatus::RtNullPointer
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length in
/// bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be NULL or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, RtStatus> {
    if ptr.is_null() {
        return Err(null_pointer("path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(RtStatus::RtInvalidUtf8)
        }
    }
}

/// Portfolio snapshot: names, cumulative default probabilities, spreads.
pub struct RtSnapshot {
    _private: [u8; 0],
}

/// Portfolio tail probabilities per maturity.
pub struct RtTailCurve {
    _private: [u8; 0],
}

/// Calibrated conditional and joint default-time matrices.
pub struct RtTdMatrixSet {
    _private: [u8; 0],
}

// The handle structs above are what the header declares; behind the pointer
// lives the boxed core type. cbindgen parses source text, so the impls and
// free functions are written out per type rather than macro-generated.

#[allow(dead_code)]
impl RtSnapshot {
    fn from_inner(inner: PortfolioSnapshot) -> *mut RtSnapshot {
        Box::into_raw(Box::new(inner)) as *mut RtSnapshot
    }

    unsafe fn inner<'a>(ptr: *const RtSnapshot) -> Option<&'a PortfolioSnapshot> {
        (ptr as *const PortfolioSnapshot).as_ref()
    }

    unsafe fn inner_mut<'a>(ptr: *mut RtSnapshot) -> Option<&'a mut PortfolioSnapshot> {
        (ptr as *mut PortfolioSnapshot).as_mut()
    }
}

#[allow(dead_code)]
impl RtTailCurve {
    fn from_inner(inner: TailCurve) -> *mut RtTailCurve {
        Box::into_raw(Box::new(inner)) as *mut RtTailCurve
    }

    unsafe fn inner<'a>(ptr: *const RtTailCurve) -> Option<&'a TailCurve> {
        (ptr as *const TailCurve).as_ref()
    }
}

#[allow(dead_code)]
impl RtTdMatrixSet {
    fn from_inner(inner: TdMatrixSet) -> *mut RtTdMatrixSet {
        Box::into_raw(Box::new(inner)) as *mut RtTdMatrixSet
    }

    unsafe fn inner<'a>(ptr: *const RtTdMatrixSet) -> Option<&'a TdMatrixSet> {
        (ptr as *const TdMatrixSet).as_ref()
    }
}

/// Releases a snapshot handle. Passing NULL is a no-op.
///
/// # Safety
/// `ptr` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rt_snapshot_free(ptr: *mut RtSnapshot) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr as *mut PortfolioSnapshot));
    }
}

/// Releases a tail-curve handle. Passing NULL is a no-op.
///
/// # Safety
/// `ptr` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rt_tailcurve_free(ptr: *mut RtTailCurve) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr as *mut TailCurve));
    }
}

/// Releases a matrix-set handle. Passing NULL is a no-op.
///
/// # Safety
/// `ptr` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rt_tdmatrixset_free(ptr: *mut RtTdMatrixSet) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr as *mut TdMatrixSet));
    }
}

/// Loads a snapshot file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_snapshot_load(
    path: *const c_char,
    out: *mut *mut RtSnapshot,
) -> RtStatus {
    if out.is_null() {
        return null_pointer("out");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match io::read_snapshot(path) {
        Ok(s) => {
            *out = RtSnapshot::from_inner(s);
            RtStatus::RtOk
        }
        Err(e) => status_from(&e),
    }
}

/// Number of names, or -1 on a NULL handle.
///
/// # Safety
/// `ptr` must be a live snapshot handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rt_snapshot_names(ptr: *const RtSnapshot) -> i32 {
    match RtSnapshot::inner(ptr) {
        Some(s) => s.n_names() as i32,
        None => -1,
    }
}

/// Number of maturity intervals, or -1 on a NULL handle.
///
/// # Safety
/// `ptr` must be a live snapshot handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rt_snapshot_intervals(ptr: *const RtSnapshot) -> i32 {
    match RtSnapshot::inner(ptr) {
        Some(s) => s.grid().interval_count() as i32,
        None => -1,
    }
}

/// Loads a tail-curve file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_tailcurve_load(
    path: *const c_char,
    out: *mut *mut RtTailCurve,
) -> RtStatus {
    if out.is_null() {
        return null_pointer("out");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match io::read_tail_curve(path) {
        Ok(t) => {
            *out = RtTailCurve::from_inner(t);
            RtStatus::RtOk
        }
        Err(e) => status_from(&e),
    }
}

/// Tail curve of the synthetic birth-process top model with intensity
/// `a + b n` on a grid of `n_maturities` year fractions (strictly increasing,
/// zero excluded).
///
/// # Safety
/// `maturities` must point to `n_maturities` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rt_tailcurve_from_birth_model(
    a: f64,
    b: f64,
    n_names: usize,
    maturities: *const f64,
    n_maturities: usize,
    out: *mut *mut RtTailCurve,
) -> RtStatus {
    if out.is_null() || maturities.is_null() {
        return null_pointer("maturities/out");
    }
    let mats = std::slice::from_raw_parts(maturities, n_maturities);
    let result = (|| {
        let grid = MaturityGrid::from_maturities(mats)?;
        let top = BirthProcessTop::new(a, b, n_names)?;
        top.tail_curve(&grid)
    })();
    match result {
        Ok(t) => {
            *out = RtTailCurve::from_inner(t);
            RtStatus::RtOk
        }
        Err(e) => status_from(&e),
    }
}

/// Writes a tail curve to a file.
///
/// # Safety
/// `ptr` must be a live handle, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rt_tailcurve_save(
    ptr: *const RtTailCurve,
    path: *const c_char,
) -> RtStatus {
    let tails = match RtTailCurve::inner(ptr) {
        Some(t) => t,
        None => return null_pointer("tail curve"),
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match io::write_tail_curve(path, tails) {
        Ok(()) => RtStatus::RtOk,
        Err(e) => status_from(&e),
    }
}

/// Rescales the snapshot's forward default probabilities in place so the
/// expected default count matches the tail curve interval by interval.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn rt_enforce_consistency(
    snapshot: *mut RtSnapshot,
    tails: *const RtTailCurve,
) -> RtStatus {
    let snap = match RtSnapshot::inner_mut(snapshot) {
        Some(s) => s,
        None => return null_pointer("snapshot"),
    };
    let tails = match RtTailCurve::inner(tails) {
        Some(t) => t,
        None => return null_pointer("tail curve"),
    };
    match enforce_consistency(snap, tails) {
        Ok((adjusted, _)) => {
            *snap = adjusted;
            RtStatus::RtOk
        }
        Err(e) => status_from(&e),
    }
}

/// Calibrates TD-matrices with the linear-taper prior. `nbar = 0` selects
/// the default uniformization bound.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rt_calibrate_linear(
    snapshot: *const RtSnapshot,
    tails: *const RtTailCurve,
    nbar: usize,
    max_sweeps: usize,
    tolerance: f64,
    out: *mut *mut RtTdMatrixSet,
) -> RtStatus {
    if out.is_null() {
        return null_pointer("out");
    }
    let snap = match RtSnapshot::inner(snapshot) {
        Some(s) => s,
        None => return null_pointer("snapshot"),
    };
    let tails = match RtTailCurve::inner(tails) {
        Some(t) => t,
        None => return null_pointer("tail curve"),
    };
    let spec = PriorSpec::Linear {
        nbar: if nbar == 0 { None } else { Some(nbar) },
        first_column: None,
    };
    let settings = CalibrationSettings {
        max_sweeps,
        row_tolerance: tolerance,
        report_kl: false,
    };
    match calibrate_all(snap, tails, &spec, &settings) {
        Ok((set, _)) => {
            *out = RtTdMatrixSet::from_inner(set);
            RtStatus::RtOk
        }
        Err(e) => status_from(&e),
    }
}

/// Loads a TD-matrix set written by the CLI or `rt_tdmatrixset_save`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_tdmatrixset_load(
    path: *const c_char,
    out: *mut *mut RtTdMatrixSet,
) -> RtStatus {
    if out.is_null() {
        return null_pointer("out");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match io::read_tdmatrix_set(path) {
        Ok(s) => {
            *out = RtTdMatrixSet::from_inner(s);
            RtStatus::RtOk
        }
        Err(e) => status_from(&e),
    }
}

/// Writes a TD-matrix set to a file.
///
/// # Safety
/// `ptr` must be a live handle, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rt_tdmatrixset_save(
    ptr: *const RtTdMatrixSet,
    path: *const c_char,
) -> RtStatus {
    let set = match RtTdMatrixSet::inner(ptr) {
        Some(s) => s,
        None => return null_pointer("matrix set"),
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match io::write_tdmatrix_set(path, set) {
        Ok(()) => RtStatus::RtOk,
        Err(e) => status_from(&e),
    }
}

/// Number of names, or -1 on a NULL handle.
///
/// # Safety
/// `ptr` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rt_tdmatrixset_names(ptr: *const RtTdMatrixSet) -> i32 {
    match RtTdMatrixSet::inner(ptr) {
        Some(s) => s.n_names() as i32,
        None => -1,
    }
}

/// Number of maturity intervals, or -1 on a NULL handle.
///
/// # Safety
/// `ptr` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rt_tdmatrixset_intervals(ptr: *const RtTdMatrixSet) -> i32 {
    match RtTdMatrixSet::inner(ptr) {
        Some(s) => s.n_intervals() as i32,
        None => -1,
    }
}

/// Copies the conditional matrix of `interval` (1-based) into `buf`
/// (row-major, `len >= N*N`).
///
/// # Safety
/// `ptr` must be a live handle; `buf` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rt_tdmatrixset_conditional(
    ptr: *const RtTdMatrixSet,
    interval: usize,
    buf: *mut f64,
    len: usize,
) -> RtStatus {
    let set = match RtTdMatrixSet::inner(ptr) {
        Some(s) => s,
        None => return null_pointer("matrix set"),
    };
    if buf.is_null() {
        return null_pointer("buf");
    }
    let n = set.n_names();
    if interval == 0 || interval > set.n_intervals() {
        set_error(&format!("interval {interval} out of range"));
        return RtStatus::RtValidationError;
    }
    if len < n * n {
        set_error(&format!("buffer holds {len} entries, need {}", n * n));
        return RtStatus::RtValidationError;
    }
    let p = set.conditional(interval);
    let out = std::slice::from_raw_parts_mut(buf, n * n);
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = p[(i, j)];
        }
    }
    RtStatus::RtOk
}

/// Single-name tranche deltas on the first maturity interval. `strikes`
/// holds the full ladder `0 = K0 < ... < K(n_strikes-1) = 1` and
/// `tranche_spreads` one running spread per tranche. The output buffer is
/// N x (n_strikes - 1) row-major; undefined (riskless-name) deltas are NaN.
/// `refined != 0` applies the premium-leg correction.
///
/// # Safety
/// All pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn rt_single_name_deltas(
    set: *const RtTdMatrixSet,
    snapshot: *const RtSnapshot,
    strikes: *const f64,
    n_strikes: usize,
    tranche_spreads: *const f64,
    rate: f64,
    refined: i32,
    buf: *mut f64,
    len: usize,
) -> RtStatus {
    let set = match RtTdMatrixSet::inner(set) {
        Some(s) => s,
        None => return null_pointer("matrix set"),
    };
    let snap = match RtSnapshot::inner(snapshot) {
        Some(s) => s,
        None => return null_pointer("snapshot"),
    };
    if strikes.is_null() || tranche_spreads.is_null() || buf.is_null() {
        return null_pointer("strikes/tranche_spreads/buf");
    }
    if n_strikes < 2 {
        set_error("need at least two strikes");
        return RtStatus::RtValidationError;
    }
    let strikes = std::slice::from_raw_parts(strikes, n_strikes).to_vec();
    let spreads = std::slice::from_raw_parts(tranche_spreads, n_strikes - 1).to_vec();
    let n = set.n_names();
    let ntr = n_strikes - 1;
    if len < n * ntr {
        set_error(&format!("buffer holds {len} entries, need {}", n * ntr));
        return RtStatus::RtValidationError;
    }
    let result = (|| {
        let tranches = TrancheSpec::new(strikes, spreads)?;
        let discount = DiscountSpec::new(rate)?;
        let method = if refined != 0 {
            DeltaMethod::Refined
        } else {
            DeltaMethod::Plain
        };
        single_name_deltas(set, snap, &tranches, &discount, method, 1)
    })();
    match result {
        Ok(report) => {
            let out = std::slice::from_raw_parts_mut(buf, n * ntr);
            for i in 0..n {
                for k in 0..ntr {
                    out[i * ntr + k] = report.single_name[i][k].unwrap_or(f64::NAN);
                }
            }
            RtStatus::RtOk
        }
        Err(e) => status_from(&e),
    }
}

/// Marks an `n x n` spread-return covariance (row-major) against the
/// next-to-default probabilities `pi`: subtracts the squared portfolio
/// volatility, then alternates orthogonal and positive-semidefinite
/// projections. Writes the marked matrix into `out_r` (row-major, `n*n`)
/// and, when the pointers are non-NULL, the membership residuals and
/// iteration count.
///
/// # Safety
/// Buffers must match the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn rt_mark_covariance(
    cov: *const f64,
    pi: *const f64,
    n: usize,
    sigma_y: f64,
    max_iter: usize,
    tol: f64,
    out_r: *mut f64,
    out_orth_residual: *mut f64,
    out_min_eigenvalue: *mut f64,
    out_iterations: *mut i32,
) -> RtStatus {
    if cov.is_null() || pi.is_null() || out_r.is_null() {
        return null_pointer("cov/pi/out_r");
    }
    if n == 0 {
        set_error("dimension must be positive");
        return RtStatus::RtValidationError;
    }
    let cov_slice = std::slice::from_raw_parts(cov, n * n);
    let pi_slice = std::slice::from_raw_parts(pi, n);
    let cov = DMatrix::from_fn(n, n, |i, j| cov_slice[i * n + j]);
    let pi = DVector::from_column_slice(pi_slice);
    let result = (|| {
        let problem = marking::MarkingProblem::new(cov, sigma_y, pi.clone())?;
        let target = marking::build_target(&problem);
        marking::alternating_projections(&target, &pi, max_iter, tol)
    })();
    match result {
        Ok(res) => {
            let out = std::slice::from_raw_parts_mut(out_r, n * n);
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = res.r_matrix[(i, j)];
                }
            }
            if !out_orth_residual.is_null() {
                *out_orth_residual = res.orth_residual;
            }
            if !out_min_eigenvalue.is_null() {
                *out_min_eigenvalue = res.min_eigenvalue;
            }
            if !out_iterations.is_null() {
                *out_iterations = res.iterations as i32;
            }
            RtStatus::RtOk
        }
        Err(e) => status_from(&e),
    }
}
