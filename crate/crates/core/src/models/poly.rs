use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use super::linreg::GaussianLinReg;
use crate::error::Result;
use crate::model::LatentModel;

/// Rows `[1, x_i, x_i², …, x_i^p]`.
pub fn polynomial_design(x: &[f64], order: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), order + 1, |i, j| x[i].powi(j as i32))
}

/// Gaussian regression on a polynomial basis expansion of scalar inputs.
#[derive(Debug, Clone)]
pub struct PolynomialReg {
    order: usize,
    inner: GaussianLinReg,
}

impl PolynomialReg {
    pub fn new(x: &[f64], y: DVector<f64>, order: usize) -> Result<Self> {
        Ok(Self {
            order,
            inner: GaussianLinReg::new(polynomial_design(x, order), y)?,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn linear(&self) -> &GaussianLinReg {
        &self.inner
    }
}

impl LatentModel for PolynomialReg {
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    fn dim_theta(&self) -> usize {
        2
    }
    fn potential(&self, theta: &[f64], w: &[f64]) -> f64 {
        self.inner.potential(theta, w)
    }
    fn grad_x(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        self.inner.grad_x(theta, w, out)
    }
    fn grad_theta(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        self.inner.grad_theta(theta, w, out)
    }
    fn evaluate(&self, theta: &[f64], w: &[f64], gx: &mut [f64], gt: &mut [f64]) -> f64 {
        self.inner.evaluate(theta, w, gx, gt)
    }
    fn init_particles(&self, theta0: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.inner.init_particles(theta0, n, rng)
    }
}
