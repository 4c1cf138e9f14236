//! Evidence computation and model selection.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::engine::run_jala_em;
use crate::error::{Error, Result};
use crate::jarzynski::log_mean_exp;
use crate::model::LatentModel;
use crate::models::{polynomial_design, PolynomialReg, StudentTLinReg};
use crate::rng::fill_standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMethod {
    Analytic,
    ImportanceSampling,
    Jarzynski,
}

/// Evidence summary for one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub model: String,
    pub method: EvidenceMethod,
    pub log_z0: f64,
    pub log_z_trajectory: Vec<f64>,
    pub log_z_final: f64,
    pub theta_final: Vec<f64>,
    pub selected: bool,
}

fn cholesky_or_report(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => {
            let min = SymmetricEigen::new(m).eigenvalues.min();
            Err(Error::NotPositiveDefinite(format!("{what}: smallest eigenvalue {min:e}")))
        }
    }
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `log N(y; 0, σ² I + X Xᵀ/α)` via a Cholesky factor of the `d_y × d_y` covariance.
pub fn gaussian_evidence(x: &DMatrix<f64>, y: &DVector<f64>, sigma_sq: f64, alpha: f64) -> Result<f64> {
    check_scales(sigma_sq, alpha)?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} rows but {} targets", x.nrows(), y.len())));
    }
    let n = y.len();
    let cov = x * x.transpose() / alpha + DMatrix::identity(n, n) * sigma_sq;
    let chol = cholesky_or_report(cov, "marginal covariance")?;
    let quad = y.dot(&chol.solve(y));
    Ok(-0.5 * (n as f64 * (2.0 * PI).ln() + log_det(&chol) + quad))
}

/// Sufficient statistics `(XᵀX, Xᵀy, yᵀy, d_y)` for evidence evaluations.
#[derive(Debug, Clone)]
pub struct GramStats {
    pub gram: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n_obs: usize,
}

impl GramStats {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        Self {
            gram: x.tr_mul(x),
            xty: x.tr_mul(y),
            yty: y.dot(y),
            n_obs: y.len(),
        }
    }

    /// Same value as [`gaussian_evidence`], through the determinant lemma and the
    /// `d_x × d_x` matrix `ασ² I + XᵀX`.
    pub fn log_evidence(&self, sigma_sq: f64, alpha: f64) -> Result<f64> {
        check_scales(sigma_sq, alpha)?;
        let d = self.gram.nrows();
        let s = alpha * sigma_sq;
        let m = &self.gram + DMatrix::identity(d, d) * s;
        let chol = cholesky_or_report(m, "regularized Gram matrix")?;
        let n = self.n_obs as f64;
        let logdet = n * sigma_sq.ln() + log_det(&chol) - d as f64 * s.ln();
        let quad = (self.yty - self.xty.dot(&chol.solve(&self.xty))) / sigma_sq;
        Ok(-0.5 * (n * (2.0 * PI).ln() + logdet + quad))
    }
}

fn check_scales(sigma_sq: f64, alpha: f64) -> Result<()> {
    if !(sigma_sq > 0.0) || !(alpha > 0.0) || !sigma_sq.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise variance and prior precision must be positive, got {sigma_sq} and {alpha}"
        )));
    }
    Ok(())
}

/// Posterior mean and the Cholesky factor of the posterior precision
/// `XᵀX/σ² + αI`.
pub fn posterior_precision_factor(
    gram: &DMatrix<f64>,
    xty: &DVector<f64>,
    sigma_sq: f64,
    alpha: f64,
) -> Result<(DVector<f64>, Cholesky<f64, Dyn>)> {
    check_scales(sigma_sq, alpha)?;
    let d = gram.nrows();
    let precision = gram / sigma_sq + DMatrix::identity(d, d) * alpha;
    let chol = cholesky_or_report(precision, "posterior precision")?;
    let mean = chol.solve(&(xty / sigma_sq));
    Ok((mean, chol))
}

/// Posterior `N(μ, Σ)` of the weights: `Σ = (XᵀX/σ² + αI)⁻¹`, `μ = Σ Xᵀy/σ²`.
pub fn gaussian_posterior(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_sq: f64,
    alpha: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mean, chol) = posterior_precision_factor(&x.tr_mul(x), &x.tr_mul(y), sigma_sq, alpha)?;
    Ok((mean, chol.inverse()))
}

/// Importance-sampling estimate of a log normalizing constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsEstimate {
    pub log_z: f64,
    /// Standard error of `Ẑ` divided by `Ẑ`.
    pub relative_se: f64,
}

/// `log (1/S) Σ_s e^{log_target(w_s)} / q(w_s)` with `q = N(mean, precision⁻¹)`.
pub fn importance_sampling<F, R>(
    mean: &DVector<f64>,
    precision: &Cholesky<f64, Dyn>,
    log_target: F,
    samples: usize,
    rng: &mut R,
) -> Result<IsEstimate>
where
    F: Fn(&[f64]) -> f64,
    R: RngCore + ?Sized,
{
    if samples == 0 {
        return Err(Error::InvalidConfig("importance sampling needs at least one sample".into()));
    }
    let d = mean.len();
    let lt = precision.l().transpose();
    let half_logdet = 0.5 * log_det(precision);
    let mut z = vec![0.0; d];
    let mut log_ratios = Vec::with_capacity(samples);
    for _ in 0..samples {
        fill_standard_normal(rng, &mut z);
        let zv = DVector::from_column_slice(&z);
        let v = lt
            .solve_upper_triangular(&zv)
            .ok_or_else(|| Error::NotPositiveDefinite("proposal precision factor is singular".into()))?;
        let w: Vec<f64> = (0..d).map(|j| mean[j] + v[j]).collect();
        let log_q = -0.5 * d as f64 * (2.0 * PI).ln() + half_logdet - 0.5 * zv.norm_squared();
        let lr = log_target(&w) - log_q;
        log_ratios.push(if lr.is_nan() { f64::NEG_INFINITY } else { lr });
    }
    let log_z = log_mean_exp(&log_ratios);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::ProposalDegenerate);
    }
    let s = samples as f64;
    let m2 = log_mean_exp(&log_ratios.iter().map(|l| 2.0 * l).collect::<Vec<_>>());
    let rel_var = ((m2 - 2.0 * log_z).exp() - 1.0).max(0.0) / s;
    Ok(IsEstimate {
        log_z,
        relative_se: rel_var.sqrt(),
    })
}

/// Evidence of the Student-t model at θ0 (without the ν prior), with the Gaussian
/// posterior at `(σ0², α0)` as proposal.
pub fn is_evidence_student_t<R: RngCore + ?Sized>(
    model: &StudentTLinReg,
    theta0: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<IsEstimate> {
    let (x, y) = (model.design(), model.targets());
    let (mean, chol) = posterior_precision_factor(&x.tr_mul(x), &x.tr_mul(y), theta0[0].exp(), theta0[1].exp())?;
    importance_sampling(
        &mean,
        &chol,
        |w| model.log_likelihood(theta0, w) - model.neg_log_w_prior(theta0[1], w),
        samples,
        rng,
    )
}

/// `log Z_A − log Z_B`; positive favors A.
pub fn bayes_factor(log_z_a: f64, log_z_b: f64) -> f64 {
    log_z_a - log_z_b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlIiStatus {
    /// Gradient norm fell below the tolerance.
    Converged,
    /// Line search could not decrease the objective further; the finite-difference
    /// gradient is at its noise floor.
    Stalled,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlIiResult {
    pub phi: [f64; 2],
    pub log_evidence: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub status: MlIiStatus,
}

/// Maximizes the Gaussian evidence over `(log σ², log α)` by gradient descent
/// with backtracking, using central finite differences.
pub fn ml_ii_fit(x: &DMatrix<f64>, y: &DVector<f64>, init: [f64; 2]) -> Result<MlIiResult> {
    const FD_STEP: f64 = 1e-6;
    const TOL: f64 = 1e-8;
    const MAX_ITERS: usize = 10_000;
    let stats = GramStats::new(x, y);
    let f = |p: [f64; 2]| -> f64 {
        match stats.log_evidence(p[0].exp(), p[1].exp()) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let grad = |p: [f64; 2]| -> [f64; 2] {
        let mut g = [0.0; 2];
        for j in 0..2 {
            let (mut a, mut b) = (p, p);
            a[j] += FD_STEP;
            b[j] -= FD_STEP;
            g[j] = (f(a) - f(b)) / (2.0 * FD_STEP);
        }
        g
    };

    let mut p = init;
    let mut fp = f(p);
    if !fp.is_finite() {
        return Err(Error::NonFinite("evidence at ML-II start"));
    }
    let mut t: f64 = 1.0;
    let mut iterations = 0;
    let mut status = MlIiStatus::IterationCap;
    let mut gn;
    loop {
        let g = grad(p);
        gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if gn < TOL {
            status = MlIiStatus::Converged;
            break;
        }
        if iterations == MAX_ITERS {
            break;
        }
        iterations += 1;
        t = (t * 2.0).min(1e6);
        let mut accepted = false;
        while t > 1e-20 {
            let q = [p[0] - t * g[0], p[1] - t * g[1]];
            let fq = f(q);
            if fq <= fp - 1e-4 * t * gn * gn {
                p = q;
                fp = fq;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            status = MlIiStatus::Stalled;
            break;
        }
    }
    Ok(MlIiResult {
        phi: p,
        log_evidence: -fp,
        iterations,
        grad_norm: gn,
        status,
    })
}

/// Least squares via QR; returns `(ŵ, ‖y − Xŵ‖²/d_y)`.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} rows but {} targets", x.nrows(), y.len())));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::RankDeficient(0.0));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let diag = r.diagonal().map(f64::abs);
    let (min, max) = (diag.min(), diag.max());
    if !(min > 1e-12 * max) {
        return Err(Error::RankDeficient(min));
    }
    let qty = qr.q().tr_mul(y);
    let w = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient(min))?;
    let resid = y - x * &w;
    Ok((w, resid.norm_squared() / y.len() as f64))
}

/// Gaussian log-likelihood at the MLE variance: `−(d_y/2)(log 2πσ̂² + 1)`.
pub fn gaussian_mle_log_likelihood(sigma_sq_mle: f64, n_obs: usize) -> f64 {
    -0.5 * n_obs as f64 * ((2.0 * PI * sigma_sq_mle).ln() + 1.0)
}

/// `(p + 2) log d_y − 2 log L`.
pub fn bic(order: usize, n_obs: usize, log_lik: f64) -> f64 {
    (order as f64 + 2.0) * (n_obs as f64).ln() - 2.0 * log_lik
}

/// Order minimizing the BIC of OLS polynomial fits; ties go to the smaller order.
pub fn select_order_bic(x: &[f64], y: &DVector<f64>, orders: &[usize]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &p in orders {
        let (_, s2) = ols_fit(&polynomial_design(x, p), y).map_err(|e| at_order(e, p))?;
        let b = bic(p, y.len(), gaussian_mle_log_likelihood(s2, y.len()));
        if best.is_none_or(|(bp, bb)| b < bb || (b == bb && p < bp)) {
            best = Some((p, b));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::InvalidConfig("no candidate orders".into()))
}

fn at_order(e: Error, order: usize) -> Error {
    Error::AtOrder {
        order,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub selected: usize,
    pub reports: Vec<EvidenceReport>,
}

/// Fraction of `1/λ_max` used to cap the Langevin step of each candidate order.
pub const STABLE_STEP_FRACTION: f64 = 0.99;

/// Fits every candidate order with JALA-EM (analytic evidence at θ0) and picks
/// the largest final log-evidence; ties go to the smaller order.
///
/// Raw polynomial features make the latent curvature grow by orders of magnitude
/// with `p`, so each candidate runs with `h_p = min(h, 0.99/λ_max(θ0))`.
pub fn select_order_jala(x: &[f64], y: &DVector<f64>, orders: &[usize], config: &RunConfig) -> Result<OrderSelection> {
    if orders.is_empty() {
        return Err(Error::InvalidConfig("no candidate orders".into()));
    }
    let mut reports = Vec::with_capacity(orders.len());
    for &p in orders {
        let model = PolynomialReg::new(x, y.clone(), p).map_err(|e| at_order(e, p))?;
        let theta0 = &config.theta_init;
        let log_z0 = model
            .linear()
            .log_evidence(theta0)
            .map_err(|e| at_order(e, p))?;
        let mut cfg = config.clone();
        cfg.langevin_step = cfg.langevin_step.min(STABLE_STEP_FRACTION / model.linear().max_curvature(theta0));
        cfg.seed = crate::rng::derive_seed(config.seed, crate::rng::tag::PARTICLE, p as u64, 0);
        let fit = run_jala_em(&model, cfg, log_z0).map_err(|e| at_order(e, p))?;
        reports.push(EvidenceReport {
            model: format!("poly{p}"),
            method: EvidenceMethod::Jarzynski,
            log_z0,
            log_z_trajectory: fit.trajectory.rows.iter().filter_map(|r| r.log_evidence).collect(),
            log_z_final: fit.log_evidence_final,
            theta_final: fit.theta_final,
            selected: false,
        });
    }
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.log_z_final > reports[best].log_z_final {
            best = i;
        }
    }
    reports[best].selected = true;
    Ok(OrderSelection {
        selected: orders[best],
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorModel {
    Gaussian,
    StudentT,
}

/// Settings for the Gaussian vs Student-t comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorModelSettings {
    pub n_particles: usize,
    pub n_iterations: usize,
    pub langevin_step: f64,
    pub optimizer: crate::optim::OptimizerSpec,
    pub ess_threshold_fraction: f64,
    pub theta_init_gaussian: Vec<f64>,
    pub theta_init_student_t: Vec<f64>,
    pub is_samples: usize,
}

impl Default for ErrorModelSettings {
    fn default() -> Self {
        Self {
            n_particles: 50,
            n_iterations: 250,
            langevin_step: 5e-5,
            optimizer: crate::optim::OptimizerSpec::adam(5e-3),
            ess_threshold_fraction: 0.0,
            theta_init_gaussian: vec![1.0, 1.0],
            theta_init_student_t: vec![1.0, 1.0, 5f64.ln()],
            is_samples: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelSelection {
    pub gaussian: EvidenceReport,
    pub student_t: EvidenceReport,
    /// `log Ẑ_G − log Ẑ_T`.
    pub log_bayes_factor: f64,
    pub decision: ErrorModel,
    pub is_relative_se: f64,
}

/// Fits both error models with JALA-EM and picks the larger final evidence.
pub fn select_error_model(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    settings: &ErrorModelSettings,
    seed: u64,
) -> Result<ErrorModelSelection> {
    use crate::models::GaussianLinReg;
    use crate::rng::{derive_seed, substream, tag};

    let run_config = |theta: &[f64], stream: u64| {
        let mut cfg = RunConfig::new(
            settings.n_particles,
            settings.n_iterations,
            settings.langevin_step,
            settings.optimizer.clone(),
            theta.to_vec(),
        )
        .with_ess_threshold(settings.ess_threshold_fraction);
        cfg.seed = derive_seed(seed, tag::PARTICLE, stream, 0);
        cfg
    };
    let report = |name: &str, method, log_z0, fit: crate::engine::FitResult| EvidenceReport {
        model: name.into(),
        method,
        log_z0,
        log_z_trajectory: fit.trajectory.rows.iter().filter_map(|r| r.log_evidence).collect(),
        log_z_final: fit.log_evidence_final,
        theta_final: fit.theta_final,
        selected: false,
    };

    let gauss = GaussianLinReg::new(x.clone(), y.clone())?;
    check_theta(&gauss, &settings.theta_init_gaussian)?;
    let log_z0_g = gauss.log_evidence(&settings.theta_init_gaussian)?;
    let fit_g = run_jala_em(&gauss, run_config(&settings.theta_init_gaussian, 0), log_z0_g)?;
    let mut rep_g = report("gaussian", EvidenceMethod::Analytic, log_z0_g, fit_g);

    let student = StudentTLinReg::new(x.clone(), y.clone())?;
    check_theta(&student, &settings.theta_init_student_t)?;
    let mut theta_t = settings.theta_init_student_t.clone();
    student.project_theta(&mut theta_t);
    let is = is_evidence_student_t(&student, &theta_t, settings.is_samples, &mut substream(seed, tag::IMPORTANCE, 0, 0))?;
    let fit_t = run_jala_em(&student, run_config(&theta_t, 1), is.log_z)?;
    let mut rep_t = report("student_t", EvidenceMethod::ImportanceSampling, is.log_z, fit_t);

    let log_bf = bayes_factor(rep_g.log_z_final, rep_t.log_z_final);
    let decision = if log_bf >= 0.0 { ErrorModel::Gaussian } else { ErrorModel::StudentT };
    match decision {
        ErrorModel::Gaussian => rep_g.selected = true,
        ErrorModel::StudentT => rep_t.selected = true,
    }
    Ok(ErrorModelSelection {
        gaussian: rep_g,
        student_t: rep_t,
        log_bayes_factor: log_bf,
        decision,
        is_relative_se: is.relative_se,
    })
}

/// Dimension-check helper used by model constructors that take θ0.
pub fn check_theta<M: LatentModel + ?Sized>(model: &M, theta: &[f64]) -> Result<()> {
    if theta.len() == model.dim_theta() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "θ has {} entries, model expects {}",
            theta.len(),
            model.dim_theta()
        )))
    }
}
