use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::LatentModel;
use crate::rng::fill_standard_normal;

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bayesian logistic regression with prior `w ~ N(θ·1, σ0² I)`; θ is the scalar
/// prior mean and the latent variable is the weight vector.
#[derive(Debug, Clone)]
pub struct BayesianLogistic {
    x: DMatrix<f64>,
    y: DVector<f64>,
    sigma0_sq: f64,
}

pub const DEFAULT_PRIOR_VARIANCE: f64 = 5.0;

impl BayesianLogistic {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, sigma0_sq: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset("logistic labels must be 0 or 1".into()));
        }
        if !(sigma0_sq > 0.0) {
            return Err(Error::InvalidConfig(format!("prior variance must be positive, got {sigma0_sq}")));
        }
        Ok(Self { x, y, sigma0_sq })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn prior_variance(&self) -> f64 {
        self.sigma0_sq
    }

    /// `Σ_i x_i(σ(x_iᵀw) − y_i) + (w − θ·1)/σ0²`.
    pub fn grad_w(&self, theta: f64, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        self.grad_x(&[theta], w, &mut out);
        out
    }

    /// `−Σ_j (w_j − θ)/σ0²`.
    pub fn grad_theta_scalar(&self, theta: f64, w: &[f64]) -> f64 {
        -w.iter().map(|wj| wj - theta).sum::<f64>() / self.sigma0_sq
    }

    fn logits(&self, w: &[f64]) -> DVector<f64> {
        &self.x * DVector::from_column_slice(w)
    }

    fn prior_term(&self, theta: f64, w: &[f64]) -> f64 {
        w.iter().map(|wj| (wj - theta).powi(2)).sum::<f64>() / (2.0 * self.sigma0_sq)
    }
}

impl LatentModel for BayesianLogistic {
    fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    fn dim_theta(&self) -> usize {
        1
    }

    fn potential(&self, theta: &[f64], w: &[f64]) -> f64 {
        let z = self.logits(w);
        let lik: f64 = z.iter().zip(self.y.iter()).map(|(z, y)| softplus(*z) - y * z).sum();
        lik + self.prior_term(theta[0], w)
    }

    fn grad_x(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        let z = self.logits(w);
        let r = DVector::from_iterator(z.len(), z.iter().zip(self.y.iter()).map(|(z, y)| sigmoid(*z) - y));
        let g = self.x.tr_mul(&r);
        for j in 0..w.len() {
            out[j] = g[j] + (w[j] - theta[0]) / self.sigma0_sq;
        }
    }

    fn grad_theta(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = self.grad_theta_scalar(theta[0], w);
    }

    fn evaluate(&self, theta: &[f64], w: &[f64], gx: &mut [f64], gt: &mut [f64]) -> f64 {
        let z = self.logits(w);
        let mut lik = 0.0;
        let r = DVector::from_iterator(
            z.len(),
            z.iter().zip(self.y.iter()).map(|(z, y)| {
                lik += softplus(*z) - y * z;
                sigmoid(*z) - y
            }),
        );
        let g = self.x.tr_mul(&r);
        for j in 0..w.len() {
            gx[j] = g[j] + (w[j] - theta[0]) / self.sigma0_sq;
        }
        gt[0] = self.grad_theta_scalar(theta[0], w);
        lik + self.prior_term(theta[0], w)
    }

    /// Independent draws from the prior `N(θ0·1, σ0² I)`.
    fn init_particles(&self, theta0: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut out = vec![0.0; n * self.dim_x()];
        fill_standard_normal(rng, &mut out);
        let s = self.sigma0_sq.sqrt();
        out.iter_mut().for_each(|v| *v = theta0[0] + s * *v);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_gradients;
    use crate::rng::{standard_normal_vec, substream, tag};

    fn random_model(seed: u64, n: usize, d: usize) -> BayesianLogistic {
        let mut rng = substream(seed, tag::DATA, 0, 0);
        let x = DMatrix::from_vec(n, d, standard_normal_vec(&mut rng, n * d));
        let y = DVector::from_iterator(n, (0..n).map(|i| (i % 3 == 0) as u8 as f64));
        BayesianLogistic::new(x, y, 5.0).unwrap()
    }

    #[test]
    fn single_datum_gradient() {
        let m = BayesianLogistic::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0), 5.0).unwrap();
        assert!((m.grad_w(0.0, &[0.0])[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn centered_balanced_gradient_at_origin() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 2.0, -1.0, -2.0, -1.5]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let m = BayesianLogistic::new(x.clone(), y.clone(), 5.0).unwrap();
        let g = m.grad_w(0.0, &[0.0, 0.0]);
        for j in 0..2 {
            let expect: f64 = (0..4).map(|i| x[(i, j)] * (0.5 - y[i])).sum();
            assert!((g[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn theta_gradient_examples() {
        let m = random_model(0, 5, 9);
        assert_eq!(m.grad_theta_scalar(0.7, &[0.7; 9]), 0.0);
        assert!((m.grad_theta_scalar(0.0, &[1.0; 9]) + 1.8).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_checks() {
        let m = random_model(1, 40, 9);
        let r = check_gradients(&m, &[0.0], &[0.0; 9], 1e-5).unwrap();
        assert!(r.max() < 1e-4, "{r:?}");
        let mut rng = substream(2, tag::PROBE, 0, 0);
        for _ in 0..20 {
            let w = standard_normal_vec(&mut rng, 9);
            let t = standard_normal_vec(&mut rng, 1);
            let r = check_gradients(&m, &t, &w, 1e-5).unwrap();
            assert!(r.max_rel_err_x < 1e-5 && r.max_rel_err_theta < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn stable_logistic_pieces() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn evaluate_matches_parts() {
        let m = random_model(3, 30, 4);
        let w = [0.3, -0.2, 1.1, 0.0];
        let (mut gx, mut gt) = (vec![0.0; 4], vec![0.0]);
        let u = m.evaluate(&[0.4], &w, &mut gx, &mut gt);
        assert_eq!(u, m.potential(&[0.4], &w));
        assert_eq!(gx, m.grad_w(0.4, &w));
        assert_eq!(gt[0], m.grad_theta_scalar(0.4, &w));
    }
}
