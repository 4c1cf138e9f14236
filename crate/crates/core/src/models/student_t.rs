use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use super::special::{digamma, ln_gamma};
use crate::error::{Error, Result};
use crate::model::LatentModel;
use crate::optim::l2_norm;
use crate::rng::fill_standard_normal;

/// `log t_ν(r; 0, σ²)`.
pub fn student_t_logpdf(r: f64, sigma_sq: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (PI * nu * sigma_sq).ln()
        - 0.5 * (nu + 1.0) * (r * r / (nu * sigma_sq)).ln_1p()
}

/// Settings of the short per-particle ULA runs used to initialize particles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmStart {
    pub steps: usize,
    pub initial_step: f64,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self {
            steps: 200,
            initial_step: 1e-3,
        }
    }
}

/// Linear regression with Student-t errors, θ = (log σ², log α, log ν) and an
/// exponential prior on ν. `log ν` is kept inside `[log 0.2, log 5]`.
#[derive(Debug, Clone)]
pub struct StudentTLinReg {
    x: DMatrix<f64>,
    y: DVector<f64>,
    pub nu_rate: f64,
    pub log_nu_bounds: (f64, f64),
    pub warm_start: WarmStart,
}

pub const DEFAULT_NU_RATE: f64 = 0.1;

impl StudentTLinReg {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} rows but {} targets", x.nrows(), y.len())));
        }
        Ok(Self {
            x,
            y,
            nu_rate: DEFAULT_NU_RATE,
            log_nu_bounds: (0.2f64.ln(), 5.0f64.ln()),
            warm_start: WarmStart::default(),
        })
    }

    /// Replaces the ν bounds; used to compare against the Gaussian limit.
    pub fn with_log_nu_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.log_nu_bounds = (lo, hi);
        self
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    /// `Σ_i log t_ν(y_i − x_iᵀw; 0, σ²)`.
    pub fn log_likelihood(&self, theta: &[f64], w: &[f64]) -> f64 {
        let (s2, nu) = (theta[0].exp(), theta[2].exp());
        self.residuals(w).iter().map(|r| student_t_logpdf(*r, s2, nu)).sum()
    }

    /// `−log Exp(ν; λ)`.
    pub fn neg_log_nu_prior(&self, nu: f64) -> f64 {
        -self.nu_rate.ln() + self.nu_rate * nu
    }

    /// `−log N(w; 0, α⁻¹ I)`.
    pub fn neg_log_w_prior(&self, log_alpha: f64, w: &[f64]) -> f64 {
        let ww: f64 = w.iter().map(|v| v * v).sum();
        0.5 * w.len() as f64 * ((2.0 * PI).ln() - log_alpha) + 0.5 * log_alpha.exp() * ww
    }

    fn residuals(&self, w: &[f64]) -> DVector<f64> {
        &self.y - &self.x * DVector::from_column_slice(w)
    }

    /// ULA on `w` at fixed θ0 with a per-chain step that shrinks on large
    /// gradients and grows on small ones.
    pub fn warm_start_chain(&self, theta0: &[f64], start: &mut [f64], rng: &mut dyn RngCore) -> f64 {
        let d = start.len() as f64;
        let mut eps = self.warm_start.initial_step;
        let mut g = vec![0.0; start.len()];
        let mut noise = vec![0.0; start.len()];
        for _ in 0..self.warm_start.steps {
            self.grad_x(theta0, start, &mut g);
            let norm = l2_norm(&g);
            if norm > 1000.0 * d && eps > 1e-6 {
                eps *= 0.9;
            } else if norm < 10.0 * d && eps < 0.1 {
                eps *= 1.05;
            }
            fill_standard_normal(rng, &mut noise);
            let s = (2.0 * eps).sqrt();
            for j in 0..start.len() {
                start[j] += -eps * g[j] + s * noise[j];
            }
        }
        eps
    }
}

impl LatentModel for StudentTLinReg {
    fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    fn dim_theta(&self) -> usize {
        3
    }

    fn potential(&self, theta: &[f64], w: &[f64]) -> f64 {
        -self.log_likelihood(theta, w) + self.neg_log_w_prior(theta[1], w) + self.neg_log_nu_prior(theta[2].exp())
    }

    fn grad_x(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        let mut gt = [0.0; 3];
        self.evaluate(theta, w, out, &mut gt);
    }

    fn grad_theta(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        let mut gx = vec![0.0; w.len()];
        self.evaluate(theta, w, &mut gx, out);
    }

    fn evaluate(&self, theta: &[f64], w: &[f64], gx: &mut [f64], gt: &mut [f64]) -> f64 {
        let s2 = theta[0].exp();
        let alpha = theta[1].exp();
        let nu = theta[2].exp();
        let r = self.residuals(w);
        let n = r.len() as f64;
        let half_nu1 = 0.5 * (nu + 1.0);
        let nus2 = nu * s2;

        let mut sum_log1p = 0.0;
        let mut sum_frac = 0.0;
        let mut coef = DVector::zeros(r.len());
        for (i, ri) in r.iter().enumerate() {
            let r2 = ri * ri;
            let denom = nus2 + r2;
            sum_log1p += (r2 / nus2).ln_1p();
            sum_frac += r2 / denom;
            coef[i] = (nu + 1.0) * ri / denom;
        }
        let const_per = ln_gamma(half_nu1) - ln_gamma(0.5 * nu) - 0.5 * (PI * nus2).ln();
        let loglik = n * const_per - half_nu1 * sum_log1p;

        let gl = self.x.tr_mul(&coef);
        for j in 0..w.len() {
            gx[j] = -gl[j] + alpha * w[j];
        }
        let ww: f64 = w.iter().map(|v| v * v).sum();
        gt[0] = 0.5 * n - half_nu1 * sum_frac;
        gt[1] = -0.5 * w.len() as f64 + 0.5 * alpha * ww;
        let dnu = n * (-0.5 * digamma(half_nu1) + 0.5 * digamma(0.5 * nu) + 0.5 / nu) + 0.5 * sum_log1p
            - half_nu1 * sum_frac / nu
            + self.nu_rate;
        gt[2] = nu * dnu;

        -loglik + self.neg_log_w_prior(theta[1], w) + self.neg_log_nu_prior(nu)
    }

    /// Prior draws for `w`, each refined by a short adaptive ULA run at θ0.
    fn init_particles(&self, theta0: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let d = self.dim_x();
        let mut out = vec![0.0; n * d];
        fill_standard_normal(rng, &mut out);
        let sd = (-theta0[1]).exp().sqrt();
        out.iter_mut().for_each(|v| *v *= sd);
        for chain in out.chunks_mut(d) {
            self.warm_start_chain(theta0, chain, rng);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::ParticleDiverged);
        }
        Ok(out)
    }

    fn project_theta(&self, theta: &mut [f64]) -> bool {
        let (lo, hi) = self.log_nu_bounds;
        let clipped = theta[2].clamp(lo, hi);
        let changed = clipped != theta[2];
        theta[2] = clipped;
        changed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_gradients;
    use crate::rng::{standard_normal_vec, substream, tag};

    fn random_model(seed: u64, n: usize, d: usize) -> StudentTLinReg {
        let mut rng = substream(seed, tag::DATA, 0, 0);
        let x = DMatrix::from_vec(n, d, standard_normal_vec(&mut rng, n * d));
        let y = DVector::from_vec(standard_normal_vec(&mut rng, n)) * 1.5;
        StudentTLinReg::new(x, y).unwrap()
    }

    #[test]
    fn finite_difference_checks() {
        let m = random_model(0, 25, 3);
        let mut rng = substream(1, tag::PROBE, 0, 0);
        for _ in 0..100 {
            let w = standard_normal_vec(&mut rng, 3);
            let mut t = standard_normal_vec(&mut rng, 3);
            t[2] = t[2].clamp(0.2f64.ln() + 1e-3, 5f64.ln() - 1e-3);
            let r = check_gradients(&m, &t, &w, 1e-5).unwrap();
            assert!(r.max() < 1e-4, "{r:?} at θ={t:?}");
        }
    }

    #[test]
    fn zero_residual_scale_gradient() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, -1.0, 0.5]);
        let y = &x * DVector::from_element(1, 0.7);
        let m = StudentTLinReg::new(x, y).unwrap();
        let mut gt = [0.0; 3];
        m.grad_theta(&[0.3, 0.0, 1.0], &[0.7], &mut gt);
        assert!((gt[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn large_nu_approaches_gaussian() {
        let mut rng = substream(2, tag::PROBE, 0, 0);
        for _ in 0..50 {
            let v = standard_normal_vec(&mut rng, 2);
            let (r, s2) = (2.0 * v[0], (0.5 * v[1]).exp());
            let gauss = -0.5 * (2.0 * PI * s2).ln() - r * r / (2.0 * s2);
            assert!((student_t_logpdf(r, s2, 1e6) - gauss).abs() < 1e-3);
        }
    }

    #[test]
    fn log_nu_is_clipped() {
        let m = random_model(3, 5, 2);
        let mut t = [0.0, 0.0, 4.0f64.ln() + 1.0];
        assert!(m.project_theta(&mut t));
        assert_eq!(t[2], 5f64.ln());
        let mut t = [0.0, 0.0, 1.0];
        assert!(!m.project_theta(&mut t));
    }

    #[test]
    fn warm_start_gradients_stay_bounded() {
        let m = random_model(4, 200, 4);
        let theta0 = [0.0, 0.0, 5f64.ln()];
        let xs = m.init_particles(&theta0, 20, &mut substream(5, tag::INIT, 0, 0)).unwrap();
        let mut g = vec![0.0; 4];
        for chain in xs.chunks(4) {
            m.grad_x(&theta0, chain, &mut g);
            assert!(l2_norm(&g) < 1000.0 * 4.0);
        }
    }
}
