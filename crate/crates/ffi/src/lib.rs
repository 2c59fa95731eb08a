//! C interface to the tiltfed estimators.
//!
//! Networks and reports are opaque handles owned by the caller and
//! released with their `_free` function. Every fallible call returns a
//! [`TfStatus`]; on failure the message is available from
//! [`tf_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::DVector;
use tiltfed::cli::report_json;
use tiltfed::estimators::{self, EstimateReport, EstimatorConfig, Method, WeightScheme};
use tiltfed::fednet::manifest::{load_sites, ColumnLayout};
use tiltfed::fednet::Network;
use tiltfed::{Error, ModelFamily, SiteDataset};

/// Status codes. Values 2 to 8 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Singular = 5,
    Solver = 6,
    Protocol = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfFamily {
    Logistic = 0,
    Gaussian = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfWeights {
    Uniform = 0,
    SampleSize = 1,
    InverseVariance = 2,
}

/// Estimation options; start from [`tf_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TfOptions {
    /// Rounds `T` for the iterative methods.
    pub iterations: usize,
    /// Zero-based local site.
    pub local_site: usize,
    pub weights: TfWeights,
    /// Confidence level used in the JSON report.
    pub level: f64,
}

/// Opaque simulated network of sites.
pub struct TfNetwork {
    net: Network,
    datasets: Vec<SiteDataset>,
    layout: Option<ColumnLayout>,
}

/// Opaque estimation result.
pub struct TfReport {
    report: EstimateReport,
    model: ModelFamily,
    layout: Option<ColumnLayout>,
    level: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TfStatus {
    match e.category() {
        "config" => TfStatus::Config,
        "data" => TfStatus::Data,
        "numeric" => TfStatus::Numeric,
        "singular" => TfStatus::Singular,
        "solver" => TfStatus::Solver,
        "protocol" => TfStatus::Protocol,
        _ => TfStatus::Io,
    }
}

fn fail(status: TfStatus, msg: &str) -> TfStatus {
    set_error(msg);
    status
}

/// Runs `f`, mapping errors and panics onto status codes.
fn guard<F>(f: F) -> TfStatus
where
    F: FnOnce() -> Result<(), (TfStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TfStatus::Ok,
        Ok(Err((s, msg))) => fail(s, &msg),
        Err(_) => fail(TfStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: tiltfed::Result<T>) -> Result<T, (TfStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (TfStatus, String) {
    (TfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (TfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (TfStatus::Config, format!("{what} is not valid UTF-8")))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn tf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn tf_options_default() -> TfOptions {
    TfOptions {
        iterations: 1,
        local_site: 0,
        weights: TfWeights::Uniform,
        level: 0.95,
    }
}

/// Loads the sites listed in a JSON manifest.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tf_network_from_manifest(path: *const c_char, out: *mut *mut TfNetwork) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let loaded = lift(load_sites(Path::new(path)))?;
        let net = lift(Network::new(loaded.model, loaded.datasets.clone()))?;
        *out = Box::into_raw(Box::new(TfNetwork {
            net,
            datasets: loaded.datasets,
            layout: Some(loaded.layout),
        }));
        Ok(())
    })
}

/// Builds a network from site-major arrays. Site `j` owns `sizes[j]`
/// consecutive rows; `x` holds `p` values per row and `z` holds `q`
/// (include a column of ones for an intercept).
///
/// # Safety
/// `sizes` must point to `k` values; `y`, `x` and `z` to `N`, `N * p` and
/// `N * q` values where `N` is the sum of `sizes`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tf_network_new(
    family: TfFamily,
    p: usize,
    q: usize,
    k: usize,
    sizes: *const usize,
    y: *const f64,
    x: *const f64,
    z: *const f64,
    out: *mut *mut TfNetwork,
) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if k == 0 {
            return Err((TfStatus::Config, "at least one site is required".into()));
        }
        if sizes.is_null() || y.is_null() || x.is_null() || z.is_null() {
            return Err(null("data array"));
        }
        let sizes = std::slice::from_raw_parts(sizes, k);
        let n: usize = sizes.iter().sum();
        let (y, x, z) = (
            std::slice::from_raw_parts(y, n),
            std::slice::from_raw_parts(x, n * p),
            std::slice::from_raw_parts(z, n * q),
        );
        let model = lift(match family {
            TfFamily::Logistic => ModelFamily::logistic(p, q),
            TfFamily::Gaussian => ModelFamily::gaussian_linear(p, q),
        })?;
        let mut datasets = Vec::with_capacity(k);
        let mut start = 0;
        for (j, &nj) in sizes.iter().enumerate() {
            let rows = start..start + nj;
            datasets.push(lift(SiteDataset::new(
                j,
                &model,
                y[rows.clone()].to_vec(),
                x[rows.start * p..rows.end * p].to_vec(),
                z[rows.start * q..rows.end * q].to_vec(),
            ))?);
            start += nj;
        }
        let net = lift(Network::new(model, datasets.clone()))?;
        *out = Box::into_raw(Box::new(TfNetwork {
            net,
            datasets,
            layout: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `net` must come from a `tf_network_*` constructor, or be null.
#[no_mangle]
pub unsafe extern "C" fn tf_network_free(net: *mut TfNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of sites, 0 for a null handle.
///
/// # Safety
/// `net` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tf_network_sites(net: *const TfNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.net.k())
}

/// Runs `method` (`m1`, `m2`, `m3`, `modified`, `onestep`, `average`,
/// `homo` or `pooled`). `opts` may be null for the defaults.
///
/// # Safety
/// `net` must be a live handle, `method` a nul-terminated string, `opts`
/// valid or null, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tf_estimate(
    net: *const TfNetwork,
    method: *const c_char,
    opts: *const TfOptions,
    out: *mut *mut TfReport,
) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = net.as_ref().ok_or_else(|| null("network"))?;
        let method: Method = lift(c_str(method, "method")?.parse())?;
        let opts = opts.as_ref().copied().unwrap_or_else(|| tf_options_default());
        if !(opts.level > 0.0 && opts.level < 1.0) {
            return Err((
                TfStatus::Config,
                format!("level {} must lie strictly between 0 and 1", opts.level),
            ));
        }
        if opts.iterations == 0 {
            return Err((TfStatus::Config, "iterations must be at least 1".into()));
        }
        let cfg = EstimatorConfig {
            local_site: opts.local_site,
            iterations: opts.iterations,
            weights: match opts.weights {
                TfWeights::Uniform => WeightScheme::Uniform,
                TfWeights::SampleSize => WeightScheme::SampleSize,
                TfWeights::InverseVariance => WeightScheme::InverseVariance,
            },
            ..EstimatorConfig::default()
        };
        let report = lift(estimators::estimate(method, &net.net, Some(&net.datasets), &cfg))?;
        *out = Box::into_raw(Box::new(TfReport {
            report,
            model: *net.net.model(),
            layout: net.layout.clone(),
            level: opts.level,
        }));
        Ok(())
    })
}

/// # Safety
/// `report` must come from [`tf_estimate`], or be null.
#[no_mangle]
pub unsafe extern "C" fn tf_report_free(report: *mut TfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Length `p` of the estimate, 0 for a null handle.
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tf_report_dim(report: *const TfReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.beta_hat.len())
}

/// Copies the estimate into `buf`, which must hold `tf_report_dim` values.
///
/// # Safety
/// `report` must be a live handle and `buf` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn tf_report_estimate(report: *const TfReport, buf: *mut f64, len: usize) -> TfStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        copy_out(r.report.beta_hat.as_slice(), buf, len)
    })
}

/// Copies the row-major `p x p` covariance into `buf`.
///
/// # Safety
/// `report` must be a live handle and `buf` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn tf_report_covariance(report: *const TfReport, buf: *mut f64, len: usize) -> TfStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let cov = r.report.covariance.as_ref().ok_or_else(|| {
            (
                TfStatus::Singular,
                format!("no covariance: {}", r.report.warnings.join("; ")),
            )
        })?;
        // symmetric, so column-major storage reads the same row-major
        copy_out(cov.as_slice(), buf, len)
    })
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), (TfStatus, String)> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len < src.len() {
        return Err((
            TfStatus::Config,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Real numbers moved between nodes, 0 for a null handle.
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tf_report_communication(report: *const TfReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.ledger.total())
}

/// The report as JSON, the same document `tiltfed estimate` writes.
/// Release the string with [`tf_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tf_report_json(report: *const TfReport, out: *mut *mut c_char) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let null_beta = DVector::zeros(r.model.p());
        let value = lift(report_json(&r.report, &r.model, r.layout.as_ref(), &null_beta, r.level))?;
        let text = serde_json::to_string_pretty(&value).map_err(|e| (TfStatus::Io, e.to_string()))?;
        *out = CString::new(text)
            .map_err(|e| (TfStatus::Io, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`tf_report_json`], or be null.
#[no_mangle]
pub unsafe extern "C" fn tf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
