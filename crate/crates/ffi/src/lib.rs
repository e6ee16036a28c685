//! C ABI for the fedate toolkit: opaque dataset handles, per-site
//! report generation, aggregation, and sensitivity queries.
//!
//! Every function returns a `FEDATE_OK`/error code; string outputs are
//! heap-allocated and must be released with `fedate_string_free`, and
//! dataset handles with `fedate_dataset_free`. The most recent error
//! message is available per thread via `fedate_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fedate_core::aggregation::{agg_all, agg_largest, mvagg};
use fedate_core::dp::NoiseSource;
use fedate_core::estimators::EstimatorKind;
use fedate_core::matching::{
    local_sensitivity_bound, smooth_sensitivity_tau, smooth_sensitivity_variance,
};
use fedate_core::model::{
    load_csv, load_csv_with_sidecar, stratify, PrivacyBudget, PrivateSiteReport, Record,
    SiteDataset,
};

pub const FEDATE_OK: c_int = 0;
pub const FEDATE_ERR_IO: c_int = 1;
pub const FEDATE_ERR_PRECONDITION: c_int = 2;
pub const FEDATE_ERR_INTERNAL: c_int = 3;
pub const FEDATE_ERR_ARGUMENT: c_int = 4;

/// Opaque handle over a validated dataset.
pub struct FedateDataset {
    inner: SiteDataset,
}

/// Per-site estimator selector.
#[repr(C)]
#[derive(Clone, Copy)]
pub enum FedateEstimator {
    DiffInMeans = 0,
    SmoothDpMatching = 1,
    GlobalDpMatching = 2,
}

/// Server aggregation rule selector.
#[repr(C)]
#[derive(Clone, Copy)]
pub enum FedateAggregator {
    MvAgg = 0,
    All = 1,
    Largest = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&ch| ch != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn code_of(err: &fedate_core::Error) -> c_int {
    set_error(&err.to_string());
    err.exit_code() as c_int
}

/// Message of the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fedate_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn read_path<'a>(ptr: *const c_char) -> Result<&'a Path, c_int> {
    if ptr.is_null() {
        set_error("null path");
        return Err(FEDATE_ERR_ARGUMENT);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(FEDATE_ERR_ARGUMENT)
        }
    }
}

fn guard<F: FnOnce() -> c_int>(body: F) -> c_int {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            FEDATE_ERR_INTERNAL
        }
    }
}

fn emit_dataset(dataset: SiteDataset, out: *mut *mut FedateDataset) -> c_int {
    if out.is_null() {
        set_error("null output handle");
        return FEDATE_ERR_ARGUMENT;
    }
    unsafe {
        *out = Box::into_raw(Box::new(FedateDataset { inner: dataset }));
    }
    FEDATE_OK
}

/// Loads a `w,y,x` CSV with an explicit outcome bound and domain size.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedate_dataset_load(
    path: *const c_char,
    outcome_bound: f64,
    domain_size: u32,
    out: *mut *mut FedateDataset,
) -> c_int {
    guard(|| {
        let path = match read_path(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match load_csv(path, outcome_bound, domain_size) {
            Ok(d) => emit_dataset(d, out),
            Err(e) => code_of(&e),
        }
    })
}

/// Loads a CSV together with its `<path>.meta.json` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedate_dataset_load_with_sidecar(
    path: *const c_char,
    out: *mut *mut FedateDataset,
) -> c_int {
    guard(|| {
        let path = match read_path(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match load_csv_with_sidecar(path) {
            Ok(d) => emit_dataset(d, out),
            Err(e) => code_of(&e),
        }
    })
}

/// Builds a dataset from parallel arrays (treatment flags, outcomes,
/// covariate codes).
///
/// # Safety
/// The three arrays must hold `len` readable elements; `site_id` must be
/// NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fedate_dataset_from_arrays(
    treated: *const u8,
    outcomes: *const f64,
    covariates: *const u32,
    len: usize,
    outcome_bound: f64,
    domain_size: u32,
    site_id: *const c_char,
    out: *mut *mut FedateDataset,
) -> c_int {
    guard(|| {
        if treated.is_null() || outcomes.is_null() || covariates.is_null() {
            set_error("null input array");
            return FEDATE_ERR_ARGUMENT;
        }
        let site_id = if site_id.is_null() {
            "site".to_string()
        } else {
            match CStr::from_ptr(site_id).to_str() {
                Ok(s) => s.to_string(),
                Err(_) => {
                    set_error("site id is not valid UTF-8");
                    return FEDATE_ERR_ARGUMENT;
                }
            }
        };
        let treated = std::slice::from_raw_parts(treated, len);
        let outcomes = std::slice::from_raw_parts(outcomes, len);
        let covariates = std::slice::from_raw_parts(covariates, len);
        let records: Vec<Record> = (0..len)
            .map(|i| Record {
                treated: treated[i] != 0,
                outcome: outcomes[i],
                covariate: covariates[i],
            })
            .collect();
        match SiteDataset::new(records, outcome_bound, domain_size, site_id) {
            Ok(d) => emit_dataset(d, out),
            Err(e) => code_of(&e),
        }
    })
}

/// Number of records behind the handle; zero for a null handle.
///
/// # Safety
/// `dataset` must be a live handle from a `fedate_dataset_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn fedate_dataset_len(dataset: *const FedateDataset) -> usize {
    if dataset.is_null() {
        return 0;
    }
    (*dataset).inner.len()
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must come from a `fedate_dataset_*` constructor and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedate_dataset_free(dataset: *mut FedateDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn emit_string(s: String, out: *mut *mut c_char) -> c_int {
    if out.is_null() {
        set_error("null output pointer");
        return FEDATE_ERR_ARGUMENT;
    }
    match CString::new(s) {
        Ok(cs) => {
            unsafe { *out = cs.into_raw() };
            FEDATE_OK
        }
        Err(_) => {
            set_error("output contained an interior NUL");
            FEDATE_ERR_INTERNAL
        }
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from a fedate function returning an allocated string.
#[no_mangle]
pub unsafe extern "C" fn fedate_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs a per-site estimator under an (epsilon, delta) budget with the
/// deterministic stream key `(seed, site, repetition)` and returns the
/// report as a JSON string in `out_json`.
///
/// # Safety
/// `dataset` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedate_site_report_json(
    dataset: *const FedateDataset,
    estimator: FedateEstimator,
    epsilon: f64,
    delta: f64,
    seed: u64,
    site: u32,
    repetition: u32,
    out_json: *mut *mut c_char,
) -> c_int {
    guard(|| {
        if dataset.is_null() {
            set_error("null dataset handle");
            return FEDATE_ERR_ARGUMENT;
        }
        let kind = match estimator {
            FedateEstimator::DiffInMeans => EstimatorKind::DiffInMeans,
            FedateEstimator::SmoothDpMatching => EstimatorKind::SmoothDpMatching,
            FedateEstimator::GlobalDpMatching => EstimatorKind::GlobalDpMatching,
        };
        let budget = match PrivacyBudget::new(epsilon, delta) {
            Ok(b) => b,
            Err(e) => return code_of(&e),
        };
        let noise = NoiseSource::keyed(seed, site, repetition);
        match kind.run(&(*dataset).inner, budget, &noise).and_then(|r| r.to_json()) {
            Ok(json) => emit_string(json, out_json),
            Err(e) => code_of(&e),
        }
    })
}

/// Aggregates site report JSON strings into a final estimate, returned
/// as a JSON string in `out_json`.
///
/// # Safety
/// `reports` must point to `n_reports` NUL-terminated strings and
/// `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fedate_aggregate_json(
    method: FedateAggregator,
    reports: *const *const c_char,
    n_reports: usize,
    out_json: *mut *mut c_char,
) -> c_int {
    guard(|| {
        if reports.is_null() {
            set_error("null report array");
            return FEDATE_ERR_ARGUMENT;
        }
        let mut parsed = Vec::with_capacity(n_reports);
        for i in 0..n_reports {
            let ptr = *reports.add(i);
            if ptr.is_null() {
                set_error("null report string");
                return FEDATE_ERR_ARGUMENT;
            }
            let text = match CStr::from_ptr(ptr).to_str() {
                Ok(s) => s,
                Err(_) => {
                    set_error("report is not valid UTF-8");
                    return FEDATE_ERR_ARGUMENT;
                }
            };
            let wire = match serde_json::from_str(text) {
                Ok(w) => w,
                Err(e) => return code_of(&fedate_core::Error::Json(e)),
            };
            match PrivateSiteReport::from_wire(wire) {
                Ok(r) => parsed.push(r),
                Err(e) => return code_of(&e),
            }
        }
        let result = match method {
            FedateAggregator::MvAgg => mvagg(&parsed),
            FedateAggregator::All => agg_all(&parsed),
            FedateAggregator::Largest => agg_largest(&parsed),
        };
        match result {
            Ok(r) => match serde_json::to_string(&r) {
                Ok(json) => emit_string(json, out_json),
                Err(e) => code_of(&fedate_core::Error::Json(e)),
            },
            Err(e) => code_of(&e),
        }
    })
}

/// Local-sensitivity bound of the matching estimate.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedate_local_sensitivity_bound(
    dataset: *const FedateDataset,
    out: *mut f64,
) -> c_int {
    guard(|| {
        if dataset.is_null() || out.is_null() {
            set_error("null argument");
            return FEDATE_ERR_ARGUMENT;
        }
        let d = &(*dataset).inner;
        *out = local_sensitivity_bound(&stratify(d), d.outcome_bound());
        FEDATE_OK
    })
}

/// Smooth sensitivity of the matching ATE estimate at the given beta.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedate_smooth_sensitivity_ate(
    dataset: *const FedateDataset,
    beta: f64,
    out: *mut f64,
) -> c_int {
    guard(|| {
        if dataset.is_null() || out.is_null() {
            set_error("null argument");
            return FEDATE_ERR_ARGUMENT;
        }
        if !(beta > 0.0) {
            set_error("beta must be positive");
            return FEDATE_ERR_PRECONDITION;
        }
        let d = &(*dataset).inner;
        *out = smooth_sensitivity_tau(&stratify(d), d.outcome_bound(), beta).value();
        FEDATE_OK
    })
}

/// Smooth sensitivity of the matching variance estimate at the given
/// beta.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedate_smooth_sensitivity_variance(
    dataset: *const FedateDataset,
    beta: f64,
    out: *mut f64,
) -> c_int {
    guard(|| {
        if dataset.is_null() || out.is_null() {
            set_error("null argument");
            return FEDATE_ERR_ARGUMENT;
        }
        if !(beta > 0.0) {
            set_error("beta must be positive");
            return FEDATE_ERR_PRECONDITION;
        }
        let d = &(*dataset).inner;
        *out = smooth_sensitivity_variance(&stratify(d), d.outcome_bound(), beta).value();
        FEDATE_OK
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn arrays_dataset() -> *mut FedateDataset {
        let treated: [u8; 4] = [1, 1, 0, 0];
        let outcomes = [0.9, 0.6, 0.2, 0.3];
        let covariates = [0u32, 1, 0, 1];
        let site = CString::new("ffi-site").unwrap();
        let mut handle: *mut FedateDataset = ptr::null_mut();
        let code = unsafe {
            fedate_dataset_from_arrays(
                treated.as_ptr(),
                outcomes.as_ptr(),
                covariates.as_ptr(),
                4,
                1.0,
                2,
                site.as_ptr(),
                &mut handle,
            )
        };
        assert_eq!(code, FEDATE_OK);
        handle
    }

    #[test]
    fn dataset_round_trip_and_len() {
        let handle = arrays_dataset();
        assert_eq!(unsafe { fedate_dataset_len(handle) }, 4);
        unsafe { fedate_dataset_free(handle) };
    }

    #[test]
    fn invalid_records_surface_error_message() {
        let treated: [u8; 1] = [1];
        let outcomes = [2.5]; // above the bound
        let covariates = [0u32; 1];
        let mut handle: *mut FedateDataset = ptr::null_mut();
        let code = unsafe {
            fedate_dataset_from_arrays(
                treated.as_ptr(),
                outcomes.as_ptr(),
                covariates.as_ptr(),
                1,
                1.0,
                1,
                ptr::null(),
                &mut handle,
            )
        };
        assert_eq!(code, FEDATE_ERR_PRECONDITION);
        let msg = unsafe { CStr::from_ptr(fedate_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("outside"));
    }

    #[test]
    fn site_report_and_aggregate_through_the_abi() {
        let handle = arrays_dataset();
        let mut json: *mut c_char = ptr::null_mut();
        let code = unsafe {
            fedate_site_report_json(
                handle,
                FedateEstimator::SmoothDpMatching,
                1.0,
                1e-5,
                42,
                1,
                0,
                &mut json,
            )
        };
        assert_eq!(code, FEDATE_OK);
        let report = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
        assert!(report.contains("\"estimator\":\"smooth-dp-matching\""));

        // identical keys replay identical reports
        let mut json2: *mut c_char = ptr::null_mut();
        unsafe {
            fedate_site_report_json(
                handle,
                FedateEstimator::SmoothDpMatching,
                1.0,
                1e-5,
                42,
                1,
                0,
                &mut json2,
            )
        };
        assert_eq!(report, unsafe { CStr::from_ptr(json2) }.to_str().unwrap());

        let reports = [json as *const c_char, json2 as *const c_char];
        let mut agg: *mut c_char = ptr::null_mut();
        let code = unsafe {
            fedate_aggregate_json(FedateAggregator::MvAgg, reports.as_ptr(), 2, &mut agg)
        };
        assert_eq!(code, FEDATE_OK);
        let result = unsafe { CStr::from_ptr(agg) }.to_str().unwrap();
        assert!(result.contains("\"method\":\"mvagg\""));

        unsafe {
            fedate_string_free(json);
            fedate_string_free(json2);
            fedate_string_free(agg);
            fedate_dataset_free(handle);
        }
    }

    #[test]
    fn delta_zero_is_a_precondition_failure() {
        let handle = arrays_dataset();
        let mut json: *mut c_char = ptr::null_mut();
        let code = unsafe {
            fedate_site_report_json(
                handle,
                FedateEstimator::SmoothDpMatching,
                1.0,
                0.0,
                42,
                1,
                0,
                &mut json,
            )
        };
        assert_eq!(code, FEDATE_ERR_PRECONDITION);
        unsafe { fedate_dataset_free(handle) };
    }

    #[test]
    fn sensitivity_queries() {
        let handle = arrays_dataset();
        let mut local = 0.0;
        let mut smooth = 0.0;
        let mut smooth_var = 0.0;
        unsafe {
            assert_eq!(fedate_local_sensitivity_bound(handle, &mut local), FEDATE_OK);
            assert_eq!(fedate_smooth_sensitivity_ate(handle, 0.04096, &mut smooth), FEDATE_OK);
            assert_eq!(
                fedate_smooth_sensitivity_variance(handle, 0.04096, &mut smooth_var),
                FEDATE_OK
            );
            assert_eq!(
                fedate_smooth_sensitivity_ate(handle, -1.0, &mut smooth),
                FEDATE_ERR_PRECONDITION
            );
            fedate_dataset_free(handle);
        }
        assert!(local > 0.0 && smooth >= local && smooth_var > 0.0);
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut handle: *mut FedateDataset = ptr::null_mut();
        let code = unsafe { fedate_dataset_load(ptr::null(), 1.0, 1, &mut handle) };
        assert_eq!(code, FEDATE_ERR_ARGUMENT);
        assert_eq!(unsafe { fedate_dataset_len(ptr::null()) }, 0);
        unsafe { fedate_dataset_free(ptr::null_mut()) };
        unsafe { fedate_string_free(ptr::null_mut()) };
    }
}
