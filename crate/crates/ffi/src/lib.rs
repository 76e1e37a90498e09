//! C ABI over the estimation pipeline.
//!
//! Objects are opaque handles created by `gte_*_new`/`gte_*_load`/`gte_fit_*`
//! and released with the matching `gte_*_free`. Every fallible function
//! returns a [`GteStatus`]; on failure the message is available from
//! [`gte_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use grplasso_te::data::{default_design, expand_features, load_csv, Dataset, DesignMatrix, ExpansionSpec};
use grplasso_te::effects::{ci_mu, ci_tau, dose_response, effects_on_treated, Contrast, EffectEstimate};
use grplasso_te::penalty::LambdaMode;
use grplasso_te::pipeline::{fit_nuisances, NuisanceFit, PipelineConfig};
use grplasso_te::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GteStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericalError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Penalty level rule for [`GteFitOptions::lambda_mode`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GteLambdaMode {
    Formula = 0,
    Iterative = 1,
    CrossValidation = 2,
}

/// Options for [`gte_fit_nuisances`]; start from [`gte_fit_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GteFitOptions {
    pub lambda_mode: GteLambdaMode,
    pub delta_d: f64,
    pub delta_y: f64,
    /// Noise scale for formula mode; nonpositive means estimate it.
    pub u_max: f64,
    pub cv_folds: u32,
    pub seed: u64,
    pub floor: f64,
    pub use_union: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GteInterval {
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Observational data: outcome, dense treatment levels and covariates.
pub struct GteDataset(Dataset);

/// Standardized design built from a dataset.
pub struct GteDesign(DesignMatrix);

/// Fitted nuisance models.
pub struct GteNuisance(NuisanceFit);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> GteStatus {
    if e.is_data_error() {
        GteStatus::DataError
    } else {
        GteStatus::NumericalError
    }
}

/// Run `f`, converting errors and panics into a status and a stored message.
fn guard<F>(f: F) -> GteStatus
where
    F: FnOnce() -> Result<(), (GteStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GteStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            GteStatus::Panic
        }
    }
}

fn lib<T>(r: grplasso_te::Result<T>) -> Result<T, (GteStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (GteStatus, String) {
    (GteStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (GteStatus, String) {
    (GteStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GteStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, (GteStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (GteStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gte_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the last error message of this thread into `buf` (NUL-terminated).
///
/// Returns the message length excluding the terminator, 0 when there is no
/// error. When `buf` is null or `len` is too small nothing is copied, so the
/// return value can size a buffer.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gte_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len >= bytes.len() {
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        }
        bytes.len() - 1
    })
}

/// Build a dataset from outcomes `y`, treatment levels `d` dense in `0..=T`
/// and row-major covariates `x` of shape `n × k`.
/// Covariates are named `x1..xk`.
///
/// # Safety
/// `y` and `d` must point to `n` readable values, `x` to `n*k` values (may be
/// null when `k == 0`), and `out` to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gte_dataset_new(
    y: *const f64,
    d: *const u32,
    x: *const f64,
    n: usize,
    k: usize,
    out: *mut *mut GteDataset,
) -> GteStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        if y.is_null() || d.is_null() || (x.is_null() && k > 0) {
            return Err(null("y, d or x"));
        }
        let n_k = n.checked_mul(k).ok_or_else(|| invalid("n*k overflows"))?;
        let y = std::slice::from_raw_parts(y, n).to_vec();
        let d = std::slice::from_raw_parts(d, n).iter().map(|&v| v as usize).collect();
        let xs = if k == 0 { Vec::new() } else { std::slice::from_raw_parts(x, n_k).to_vec() };
        let x = ndarray::Array2::from_shape_vec((n, k), xs).map_err(|e| invalid(e.to_string()))?;
        let names = (1..=k).map(|j| format!("x{j}")).collect();
        let ds = lib(Dataset::new(y, d, x, names))?;
        *out = Box::into_raw(Box::new(GteDataset(ds)));
        Ok(())
    })
}

/// Load a CSV with a header row.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gte_dataset_load_csv(
    path: *const c_char,
    outcome: *const c_char,
    treatment: *const c_char,
    out: *mut *mut GteDataset,
) -> GteStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ds = lib(load_csv(
            str_arg(path, "path")?,
            str_arg(outcome, "outcome")?,
            str_arg(treatment, "treatment")?,
        ))?;
        *out = Box::into_raw(Box::new(GteDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gte_dataset_free(ds: *mut GteDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of units, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gte_dataset_n(ds: *const GteDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n())
}

/// Number of treatment levels `T + 1`, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gte_dataset_n_levels(ds: *const GteDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_levels())
}

/// Standardized design: intercept plus every covariate when `spec` is null,
/// otherwise the expansion rules in `spec` (lines of `key = value`).
///
/// # Safety
/// `ds` must be a live handle, `spec` null or a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gte_design_new(
    ds: *const GteDataset,
    spec: *const c_char,
    out: *mut *mut GteDesign,
) -> GteStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ds = &obj(ds, "dataset")?.0;
        let dm = if spec.is_null() {
            lib(default_design(ds))?
        } else {
            let spec = lib(ExpansionSpec::parse(str_arg(spec, "spec")?))?;
            lib(expand_features(ds, &spec))?
        };
        *out = Box::into_raw(Box::new(GteDesign(dm)));
        Ok(())
    })
}

/// # Safety
/// `dm` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gte_design_free(dm: *mut GteDesign) {
    if !dm.is_null() {
        drop(Box::from_raw(dm));
    }
}

/// Design width including the intercept, 0 for a null handle.
///
/// # Safety
/// `dm` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gte_design_p(dm: *const GteDesign) -> usize {
    dm.as_ref().map_or(0, |d| d.0.p())
}

#[no_mangle]
pub extern "C" fn gte_fit_options_default() -> GteFitOptions {
    let cfg = PipelineConfig::default();
    GteFitOptions {
        lambda_mode: GteLambdaMode::Iterative,
        delta_d: cfg.penalty.delta_d,
        delta_y: cfg.penalty.delta_y,
        u_max: 0.0,
        cv_folds: cfg.penalty.cv_folds as u32,
        seed: cfg.penalty.seed,
        floor: cfg.floor,
        use_union: cfg.use_union,
    }
}

fn pipeline_config(o: &GteFitOptions) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.penalty.mode = match o.lambda_mode {
        GteLambdaMode::Formula => LambdaMode::Formula,
        GteLambdaMode::Iterative => LambdaMode::Iterative,
        GteLambdaMode::CrossValidation => LambdaMode::CrossValidation,
    };
    cfg.penalty.delta_d = o.delta_d;
    cfg.penalty.delta_y = o.delta_y;
    cfg.penalty.u_max = (o.u_max > 0.0).then_some(o.u_max);
    cfg.penalty.cv_folds = o.cv_folds as usize;
    cfg.penalty.seed = o.seed;
    cfg.floor = o.floor;
    cfg.use_union = o.use_union;
    cfg
}

/// Fit both nuisance models. `options` may be null for the defaults.
///
/// # Safety
/// `ds` and `dm` must be live handles built from the same data, `options`
/// null or readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gte_fit_nuisances(
    ds: *const GteDataset,
    dm: *const GteDesign,
    options: *const GteFitOptions,
    out: *mut *mut GteNuisance,
) -> GteStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ds = &obj(ds, "dataset")?.0;
        let dm = &obj(dm, "design")?.0;
        let opts = options.as_ref().copied().unwrap_or_else(|| gte_fit_options_default());
        let fit = lib(fit_nuisances(ds, dm, &pipeline_config(&opts)))?;
        *out = Box::into_raw(Box::new(GteNuisance(fit)));
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gte_nuisance_free(fit: *mut GteNuisance) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Penalty levels and selection sizes of a fit. Any output pointer may be null.
///
/// # Safety
/// `fit` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gte_nuisance_summary(
    fit: *const GteNuisance,
    lambda_d: *mut f64,
    lambda_y: *mut f64,
    selected_d: *mut usize,
    selected_y: *mut usize,
    converged: *mut bool,
) -> GteStatus {
    guard(|| {
        let f = &obj(fit, "fit")?.0;
        if let Some(v) = lambda_d.as_mut() {
            *v = f.penalty.lambda_d;
        }
        if let Some(v) = lambda_y.as_mut() {
            *v = f.penalty.lambda_y;
        }
        if let Some(v) = selected_d.as_mut() {
            *v = f.logistic.selected.len();
        }
        if let Some(v) = selected_y.as_mut() {
            *v = f.linear.selected.len();
        }
        if let Some(v) = converged.as_mut() {
            *v = f.converged();
        }
        Ok(())
    })
}

fn levels_match(ds: &Dataset, f: &NuisanceFit) -> Result<(), (GteStatus, String)> {
    if f.nuisances.n() != ds.n() || f.nuisances.n_levels() != ds.n_levels() {
        return Err(invalid("fit was not produced from this dataset"));
    }
    Ok(())
}

fn dose(ds: &Dataset, f: &NuisanceFit) -> Result<EffectEstimate, (GteStatus, String)> {
    lib(dose_response(ds, &f.nuisances))
}

/// Doubly-robust dose-response means; writes `T + 1` values to `mu`.
///
/// # Safety
/// Handles must be live; `mu` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gte_dose_response(
    ds: *const GteDataset,
    fit: *const GteNuisance,
    mu: *mut f64,
    len: usize,
) -> GteStatus {
    guard(|| {
        let ds = &obj(ds, "dataset")?.0;
        let f = &obj(fit, "fit")?.0;
        levels_match(ds, f)?;
        if mu.is_null() {
            return Err(null("mu"));
        }
        if len < ds.n_levels() {
            return Err((GteStatus::BufferTooSmall, format!("need {} values, got {len}", ds.n_levels())));
        }
        let est = dose(ds, f)?;
        ptr::copy_nonoverlapping(est.mu_hat.as_ptr(), mu, est.mu_hat.len());
        Ok(())
    })
}

/// Confidence interval for a dose-response contrast such as `mu1-mu0`
/// (`att == false`) or an effect-on-treated contrast such as `tau1`
/// (`att == true`).
///
/// # Safety
/// Handles must be live, `contrast` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gte_effect_interval(
    ds: *const GteDataset,
    fit: *const GteNuisance,
    contrast: *const c_char,
    att: bool,
    alpha: f64,
    out: *mut GteInterval,
) -> GteStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = &obj(ds, "dataset")?.0;
        let f = &obj(fit, "fit")?.0;
        levels_match(ds, f)?;
        let c = lib(Contrast::parse(str_arg(contrast, "contrast")?))?;
        let iv = if att {
            let tot = lib(effects_on_treated(ds, &f.nuisances))?;
            lib(ci_tau(&tot, &c, alpha))?
        } else {
            lib(ci_mu(&dose(ds, f)?, &c, alpha))?
        };
        *out = GteInterval {
            estimate: iv.estimate,
            std_error: iv.std_error,
            lower: iv.lower,
            upper: iv.upper,
        };
        Ok(())
    })
}
