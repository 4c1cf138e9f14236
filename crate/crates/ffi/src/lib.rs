//! C interface to `jarzmle`.
//!
//! All functions return a [`JarzmleStatus`]; results come back through out
//! pointers. Models and fits are opaque heap handles released with their
//! `_free` functions. After a failure, `jarzmle_last_error` describes it for
//! the calling thread. Matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use jarzmle::engine::JalaEm;
use jarzmle::jarzynski;
use jarzmle::model::LatentModel;
use jarzmle::models::{BayesianLogistic, ConjugateGaussian, GaussianLinReg};
use jarzmle::nalgebra::{DMatrix, DVector};
use jarzmle::selection::gaussian_evidence;
use jarzmle::{Error, FitResult, OptimizerSpec, RunConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JarzmleStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParticleDiverged = 3,
    WeightDegeneracy = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JarzmleOptimizer {
    Sgd = 0,
    Adam = 1,
}

/// Settings of a JALA-EM run. `theta_init` points to `theta_len` values.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct JarzmleRunConfig {
    pub n_particles: usize,
    pub n_iterations: usize,
    pub langevin_step: f64,
    pub optimizer: JarzmleOptimizer,
    pub gamma: f64,
    /// Resample when ESS/N falls below this fraction; 0 disables resampling.
    pub ess_threshold_fraction: f64,
    pub seed: u64,
    pub theta_init: *const f64,
    pub theta_len: usize,
}

/// Opaque model handle.
pub struct JarzmleModel {
    inner: Box<dyn LatentModel>,
}

/// Opaque result of a fit.
pub struct JarzmleFit {
    inner: FitResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> JarzmleStatus {
    match e.root() {
        Error::ParticleDiverged => JarzmleStatus::ParticleDiverged,
        Error::WeightDegeneracy => JarzmleStatus::WeightDegeneracy,
        Error::InvalidConfig(_) | Error::DimensionMismatch(_) | Error::Data { .. } | Error::Dataset(_) => {
            JarzmleStatus::InvalidArgument
        }
        _ => JarzmleStatus::Numerical,
    }
}

struct Fail(JarzmleStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(JarzmleStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, converting errors and panics into a status and the thread's last error.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> JarzmleStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            JarzmleStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            JarzmleStatus::Panic
        }
    }
}

fn check_ptr<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(JarzmleStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be valid for `len` reads when non-null.
unsafe fn input<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    check_ptr(p, name)?;
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be valid for `len` writes when non-null.
unsafe fn output<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    check_ptr(p, name)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Fail> {
    if dst.len() < src.len() {
        return Err(Fail(
            JarzmleStatus::BufferTooSmall,
            format!("buffer holds {} values, {} needed", dst.len(), src.len()),
        ));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

/// Message of the calling thread's most recent failure; empty after success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn jarzmle_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn jarzmle_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn boxed_model<M: LatentModel + 'static>(m: M, out: *mut *mut JarzmleModel) -> Result<(), Fail> {
    let handle = Box::new(JarzmleModel { inner: Box::new(m) });
    // SAFETY: callers check `out` for null first.
    unsafe { *out = Box::into_raw(handle) };
    Ok(())
}

/// Latent `x ~ N(θ, 1)`, observation `y ~ N(x, 1)`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_model_conjugate_new(y: f64, out: *mut *mut JarzmleModel) -> JarzmleStatus {
    guard(|| {
        check_ptr(out, "out")?;
        if !y.is_finite() {
            return Err(invalid("y must be finite"));
        }
        boxed_model(ConjugateGaussian::new(y), out)
    })
}

/// Bayesian linear regression with `θ = (log σ², log α)`. `x` is `rows × cols`.
///
/// # Safety
/// `x` must hold `rows * cols` values, `y` `rows` values, `out` a handle slot.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_model_linreg_new(
    x: *const f64,
    rows: usize,
    cols: usize,
    y: *const f64,
    out: *mut *mut JarzmleModel,
) -> JarzmleStatus {
    guard(|| {
        check_ptr(out, "out")?;
        let xs = input(x, rows * cols, "x")?;
        let ys = input(y, rows, "y")?;
        let m = GaussianLinReg::new(DMatrix::from_row_slice(rows, cols, xs), DVector::from_column_slice(ys))?;
        boxed_model(m, out)
    })
}

/// Bayesian logistic regression with prior `N(θ·1, σ0² I)`. Labels are 0 or 1.
///
/// # Safety
/// `x` must hold `rows * cols` values, `labels` `rows` values, `out` a handle slot.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_model_logistic_new(
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *const f64,
    prior_variance: f64,
    out: *mut *mut JarzmleModel,
) -> JarzmleStatus {
    guard(|| {
        check_ptr(out, "out")?;
        let xs = input(x, rows * cols, "x")?;
        let ys = input(labels, rows, "labels")?;
        let m = BayesianLogistic::new(
            DMatrix::from_row_slice(rows, cols, xs),
            DVector::from_column_slice(ys),
            prior_variance,
        )?;
        boxed_model(m, out)
    })
}

/// # Safety
/// `model` must come from a `jarzmle_model_*_new` call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_model_free(model: *mut JarzmleModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Latent and parameter dimensions of a model.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_model_dims(
    model: *const JarzmleModel,
    dim_x: *mut usize,
    dim_theta: *mut usize,
) -> JarzmleStatus {
    guard(|| {
        check_ptr(model, "model")?;
        check_ptr(dim_x, "dim_x")?;
        check_ptr(dim_theta, "dim_theta")?;
        let m = &(*model).inner;
        *dim_x = m.dim_x();
        *dim_theta = m.dim_theta();
        Ok(())
    })
}

/// Runs JALA-EM. `log_z0` is the log-evidence at the initial parameter (0 if unknown).
///
/// # Safety
/// `model` must be a live handle, `config` valid, `config.theta_init` valid for
/// `config.theta_len` reads, and `out` a handle slot.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_fit_jala_em(
    model: *const JarzmleModel,
    config: *const JarzmleRunConfig,
    log_z0: f64,
    out: *mut *mut JarzmleFit,
) -> JarzmleStatus {
    guard(|| {
        check_ptr(model, "model")?;
        check_ptr(config, "config")?;
        check_ptr(out, "out")?;
        let c = *config;
        let theta = input(c.theta_init, c.theta_len, "theta_init")?.to_vec();
        let m = &(*model).inner;
        if theta.len() != m.dim_theta() {
            return Err(invalid(&format!("theta_init has {} values, model expects {}", theta.len(), m.dim_theta())));
        }
        let optimizer = match c.optimizer {
            JarzmleOptimizer::Sgd => OptimizerSpec::sgd(c.gamma),
            JarzmleOptimizer::Adam => OptimizerSpec::adam(c.gamma),
        };
        let cfg = RunConfig::new(c.n_particles, c.n_iterations, c.langevin_step, optimizer, theta)
            .with_ess_threshold(c.ess_threshold_fraction)
            .with_seed(c.seed);
        cfg.validate()?;
        let fit = JalaEm::new(m.as_ref(), cfg, log_z0).run()?;
        *out = Box::into_raw(Box::new(JarzmleFit { inner: fit }));
        Ok(())
    })
}

/// # Safety
/// `fit` must come from `jarzmle_fit_jala_em` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_fit_free(fit: *mut JarzmleFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Scalar summaries of a fit. Any out pointer may be null.
///
/// # Safety
/// `fit` must be a live handle; non-null out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_fit_summary(
    fit: *const JarzmleFit,
    log_evidence: *mut f64,
    iterations_run: *mut usize,
    n_particles: *mut usize,
    resample_count: *mut usize,
) -> JarzmleStatus {
    guard(|| {
        check_ptr(fit, "fit")?;
        let f = &(*fit).inner;
        if !log_evidence.is_null() {
            *log_evidence = f.log_evidence_final;
        }
        if !iterations_run.is_null() {
            *iterations_run = f.iterations_run;
        }
        if !n_particles.is_null() {
            *n_particles = f.cloud.particle_count();
        }
        if !resample_count.is_null() {
            *resample_count = f.trajectory.resample_count();
        }
        Ok(())
    })
}

/// Copies the final parameter into `out` (capacity `len`).
///
/// # Safety
/// `fit` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_fit_theta(fit: *const JarzmleFit, out: *mut f64, len: usize) -> JarzmleStatus {
    guard(|| {
        check_ptr(fit, "fit")?;
        copy_out(&(*fit).inner.theta_final, output(out, len, "out")?)
    })
}

/// Copies the normalized final weights into `out` (capacity `len`).
///
/// # Safety
/// `fit` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_fit_weights(fit: *const JarzmleFit, out: *mut f64, len: usize) -> JarzmleStatus {
    guard(|| {
        check_ptr(fit, "fit")?;
        copy_out(&(*fit).inner.weights_final, output(out, len, "out")?)
    })
}

/// Copies the final particle positions (row-major `N × dim_x`) into `out`.
///
/// # Safety
/// `fit` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_fit_positions(fit: *const JarzmleFit, out: *mut f64, len: usize) -> JarzmleStatus {
    guard(|| {
        check_ptr(fit, "fit")?;
        copy_out((*fit).inner.cloud.positions(), output(out, len, "out")?)
    })
}

/// Copies the parameter trajectory (row-major `(K+1) × dim_theta`) into `out`.
///
/// # Safety
/// `fit` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_fit_theta_trajectory(
    fit: *const JarzmleFit,
    out: *mut f64,
    len: usize,
) -> JarzmleStatus {
    guard(|| {
        check_ptr(fit, "fit")?;
        let flat: Vec<f64> = (*fit).inner.trajectory.thetas().flatten().copied().collect();
        copy_out(&flat, output(out, len, "out")?)
    })
}

/// `log((1/n) Σ exp(values_i))`, stable for large magnitudes.
///
/// # Safety
/// `values` must hold `n` values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_log_mean_exp(values: *const f64, n: usize, out: *mut f64) -> JarzmleStatus {
    guard(|| {
        check_ptr(out, "out")?;
        let v = input(values, n, "values")?;
        if v.is_empty() {
            return Err(invalid("values is empty"));
        }
        *out = jarzynski::log_mean_exp(v);
        Ok(())
    })
}

/// Softmax of log-weights into `out` (length `n`).
///
/// # Safety
/// `log_weights` must hold `n` values and `out` be valid for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_normalized_weights(log_weights: *const f64, n: usize, out: *mut f64) -> JarzmleStatus {
    guard(|| {
        let w = jarzynski::normalized_weights(input(log_weights, n, "log_weights")?)?;
        copy_out(&w, output(out, n, "out")?)
    })
}

/// Effective sample size `1 / Σ w_i²` of normalized weights.
///
/// # Safety
/// `weights` must hold `n` values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_ess(weights: *const f64, n: usize, out: *mut f64) -> JarzmleStatus {
    guard(|| {
        check_ptr(out, "out")?;
        let w = input(weights, n, "weights")?;
        let sum: f64 = w.iter().sum();
        if w.is_empty() || (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(&format!("weights must be non-empty and sum to 1 (sum = {sum})")));
        }
        *out = jarzynski::ess(w);
        Ok(())
    })
}

/// Systematic resampling with offset `u ∈ [0, 1)`; writes `n` ancestor indices.
///
/// # Safety
/// `weights` must hold `n` values and `ancestors` be valid for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_systematic_resample(
    weights: *const f64,
    n: usize,
    u: f64,
    ancestors: *mut usize,
) -> JarzmleStatus {
    guard(|| {
        let w = input(weights, n, "weights")?;
        if !(0.0..1.0).contains(&u) {
            return Err(invalid("u must lie in [0, 1)"));
        }
        let idx = jarzynski::systematic_resample(w, u)?;
        if n > 0 {
            check_ptr(ancestors, "ancestors")?;
            slice::from_raw_parts_mut(ancestors, n).copy_from_slice(&idx);
        }
        Ok(())
    })
}

/// Closed-form log marginal likelihood of Bayesian linear regression with
/// noise variance `sigma_sq` and prior precision `alpha`.
///
/// # Safety
/// `x` must hold `rows * cols` values, `y` `rows` values, `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn jarzmle_gaussian_evidence(
    x: *const f64,
    rows: usize,
    cols: usize,
    y: *const f64,
    sigma_sq: f64,
    alpha: f64,
    out: *mut f64,
) -> JarzmleStatus {
    guard(|| {
        check_ptr(out, "out")?;
        let xs = input(x, rows * cols, "x")?;
        let ys = input(y, rows, "y")?;
        *out = gaussian_evidence(
            &DMatrix::from_row_slice(rows, cols, xs),
            &DVector::from_column_slice(ys),
            sigma_sq,
            alpha,
        )?;
        Ok(())
    })
}
