use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::LatentModel;
use crate::rng::fill_standard_normal;
use crate::selection::{gaussian_evidence, posterior_precision_factor};

/// Linear regression `y = Xw + N(0, σ² I)` with prior `w ~ N(0, α⁻¹ I)` and
/// θ = (log σ², log α).
///
/// The potential keeps every normalizer, so `e^{−U}` is the joint density of
/// `(y, w)`. Evaluation uses the precomputed Gram matrix and costs `O(d_x²)`.
#[derive(Debug, Clone)]
pub struct GaussianLinReg {
    x: DMatrix<f64>,
    y: DVector<f64>,
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
}

impl GaussianLinReg {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} rows but {} targets", x.nrows(), y.len())));
        }
        if x.ncols() == 0 {
            return Err(Error::DimensionMismatch("design matrix has no columns".into()));
        }
        let gram = x.tr_mul(&x);
        let xty = x.tr_mul(&y);
        let yty = y.dot(&y);
        Ok(Self { x, y, gram, xty, yty })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Analytic `log p(y | σ², α)` at θ = (log σ², log α).
    pub fn log_evidence(&self, theta: &[f64]) -> Result<f64> {
        gaussian_evidence(&self.x, &self.y, theta[0].exp(), theta[1].exp())
    }

    /// Largest eigenvalue of `∇²_w U = XᵀX/σ² + αI` at θ.
    pub fn max_curvature(&self, theta: &[f64]) -> f64 {
        let top = nalgebra::SymmetricEigen::new(self.gram.clone()).eigenvalues.max();
        top.max(0.0) * (-theta[0]).exp() + theta[1].exp()
    }

    /// `‖y − Xw‖²` via the Gram form.
    pub fn rss(&self, w: &[f64]) -> f64 {
        let w = DVector::from_column_slice(w);
        self.yty - 2.0 * w.dot(&self.xty) + w.dot(&(&self.gram * &w))
    }

    fn parts(&self, theta: &[f64], w: &[f64]) -> (f64, DVector<f64>, f64, f64) {
        let wv = DVector::from_column_slice(w);
        let gw = &self.gram * &wv;
        let rss = self.yty - 2.0 * wv.dot(&self.xty) + wv.dot(&gw);
        let ww = wv.dot(&wv);
        let (phi1, phi2) = (theta[0], theta[1]);
        let (dy, dx) = (self.n_obs() as f64, w.len() as f64);
        let u = 0.5 * dy * (phi1 + (2.0 * PI).ln())
            + 0.5 * (-phi1).exp() * rss
            + 0.5 * dx * ((2.0 * PI).ln() - phi2)
            + 0.5 * phi2.exp() * ww;
        (u, gw, rss, ww)
    }
}

impl LatentModel for GaussianLinReg {
    fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    fn dim_theta(&self) -> usize {
        2
    }

    fn potential(&self, theta: &[f64], w: &[f64]) -> f64 {
        self.parts(theta, w).0
    }

    fn grad_x(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        let mut gt = [0.0; 2];
        self.evaluate(theta, w, out, &mut gt);
    }

    fn grad_theta(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        let mut gx = vec![0.0; w.len()];
        self.evaluate(theta, w, &mut gx, out);
    }

    fn evaluate(&self, theta: &[f64], w: &[f64], gx: &mut [f64], gt: &mut [f64]) -> f64 {
        let (u, gw, rss, ww) = self.parts(theta, w);
        let inv_var = (-theta[0]).exp();
        let alpha = theta[1].exp();
        for j in 0..w.len() {
            gx[j] = inv_var * (gw[j] - self.xty[j]) + alpha * w[j];
        }
        gt[0] = 0.5 * self.n_obs() as f64 - 0.5 * inv_var * rss;
        gt[1] = -0.5 * w.len() as f64 + 0.5 * alpha * ww;
        u
    }

    /// Exact draws from the Gaussian posterior at θ0.
    fn init_particles(&self, theta0: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let sigma_sq = theta0[0].exp();
        let alpha = theta0[1].exp();
        let (mean, chol) = posterior_precision_factor(&self.gram, &self.xty, sigma_sq, alpha)?;
        let d = self.dim_x();
        let lt = chol.l().transpose();
        let mut out = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            fill_standard_normal(rng, &mut z);
            // Precision = L Lᵀ, so Lᵀ v = z gives v ~ N(0, precision⁻¹).
            let v = lt
                .solve_upper_triangular(&DVector::from_column_slice(&z))
                .ok_or_else(|| Error::NotPositiveDefinite("posterior precision factor is singular".into()))?;
            out.extend((0..d).map(|j| mean[j] + v[j]));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_gradients;
    use crate::rng::{standard_normal_vec, substream, tag};

    pub(crate) fn random_model(seed: u64, n: usize, d: usize) -> GaussianLinReg {
        let mut rng = substream(seed, tag::DATA, 0, 0);
        let x = DMatrix::from_vec(n, d, standard_normal_vec(&mut rng, n * d));
        let y = DVector::from_vec(standard_normal_vec(&mut rng, n)) * 2.0;
        GaussianLinReg::new(x, y).unwrap()
    }

    #[test]
    fn gram_form_matches_residuals() {
        let m = random_model(0, 20, 3);
        let w = [0.5, -1.0, 2.0];
        let r = m.targets() - m.design() * DVector::from_column_slice(&w);
        assert!((m.rss(&w) - r.norm_squared()).abs() < 1e-10 * r.norm_squared());
    }

    #[test]
    fn finite_difference_checks() {
        let m = random_model(1, 30, 4);
        let mut rng = substream(2, tag::PROBE, 0, 0);
        for _ in 0..100 {
            let w = standard_normal_vec(&mut rng, 4);
            let t = standard_normal_vec(&mut rng, 2);
            let r = check_gradients(&m, &t, &w, 1e-5).unwrap();
            assert!(r.max() < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn prior_when_design_is_zero() {
        let m = GaussianLinReg::new(DMatrix::zeros(5, 2), DVector::from_element(5, 1.0)).unwrap();
        let n = 20_000;
        let alpha: f64 = 4.0;
        let xs = m.init_particles(&[0.0, alpha.ln()], n, &mut substream(3, tag::INIT, 0, 0)).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = xs.iter().skip(j).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = (1.0 / alpha).sqrt();
            assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt());
            assert!((var - 1.0 / alpha).abs() < 3.0 * (1.0 / alpha) * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn potential_integrates_to_the_evidence() {
        // One feature, three observations: ∫ e^{−U} dw by the trapezoid rule.
        let x = DMatrix::from_column_slice(3, 1, &[0.5, -1.2, 2.0]);
        let y = DVector::from_vec(vec![0.3, -0.8, 1.9]);
        let m = GaussianLinReg::new(x, y).unwrap();
        let theta = [0.7f64.ln(), 1.3f64.ln()];
        let n = 100_000;
        let (a, b) = (-10.0, 10.0);
        let dw = (b - a) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let w = a + i as f64 * dw;
            let f = (-m.potential(&theta, &[w])).exp();
            total += if i == 0 || i == n - 1 { 0.5 * f } else { f };
        }
        total *= dw;
        let exact = m.log_evidence(&theta).unwrap().exp();
        assert!((total - exact).abs() < 1e-4 * exact, "{total} vs {exact}");
    }
}
