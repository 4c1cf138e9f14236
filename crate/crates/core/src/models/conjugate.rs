use std::f64::consts::PI;

use rand::RngCore;

use crate::engine::MarginalOracle;
use crate::error::Result;
use crate::model::LatentModel;
use crate::rng::fill_standard_normal;

/// `U(θ, x) = ½(x − θ)² + ½(y − x)²`: latent `x ~ N(θ, 1)`, observation `y ~ N(x, 1)`.
///
/// Marginal `y ~ N(θ, 2)`, posterior `x | y ~ N((θ + y)/2, ½)`, so the marginal
/// likelihood is maximized at `θ = y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugateGaussian {
    pub y: f64,
}

impl ConjugateGaussian {
    pub fn new(y: f64) -> Self {
        Self { y }
    }

    pub fn posterior_mean(&self, theta: f64) -> f64 {
        0.5 * (theta + self.y)
    }

    pub fn posterior_variance(&self) -> f64 {
        0.5
    }

    /// `log N(y; θ, 2)`.
    pub fn log_marginal(&self, theta: f64) -> f64 {
        -0.5 * (4.0 * PI).ln() - 0.25 * (self.y - theta).powi(2)
    }
}

impl LatentModel for ConjugateGaussian {
    fn dim_x(&self) -> usize {
        1
    }

    fn dim_theta(&self) -> usize {
        1
    }

    fn potential(&self, theta: &[f64], x: &[f64]) -> f64 {
        0.5 * (x[0] - theta[0]).powi(2) + 0.5 * (self.y - x[0]).powi(2)
    }

    fn grad_x(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = (x[0] - theta[0]) + (x[0] - self.y);
    }

    fn grad_theta(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[0] - x[0];
    }

    /// Exact posterior draws.
    fn init_particles(&self, theta0: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut xs = vec![0.0; n];
        fill_standard_normal(rng, &mut xs);
        let m = self.posterior_mean(theta0[0]);
        let s = self.posterior_variance().sqrt();
        xs.iter_mut().for_each(|v| *v = m + s * *v);
        Ok(xs)
    }
}

impl MarginalOracle for ConjugateGaussian {
    fn grad_neg_log_marginal(&self, theta: &[f64]) -> Vec<f64> {
        vec![0.5 * (theta[0] - self.y)]
    }
}
