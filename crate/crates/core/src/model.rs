//! The latent-variable model interface and a finite-difference gradient checker.

use rand::RngCore;

use crate::error::{Error, Result};

/// A joint potential `U(θ, x) = -log p_θ(x, y)` with analytic gradients.
///
/// Positions and parameters are plain slices; the engine stores particles as a
/// row-major `N × dim_x` buffer.
pub trait LatentModel: Send + Sync {
    fn dim_x(&self) -> usize;

    fn dim_theta(&self) -> usize;

    fn potential(&self, theta: &[f64], x: &[f64]) -> f64;

    fn grad_x(&self, theta: &[f64], x: &[f64], out: &mut [f64]);

    fn grad_theta(&self, theta: &[f64], x: &[f64], out: &mut [f64]);

    /// Potential together with both gradients. Models override this when the
    /// three quantities share intermediate work.
    fn evaluate(&self, theta: &[f64], x: &[f64], grad_x: &mut [f64], grad_theta: &mut [f64]) -> f64 {
        self.grad_x(theta, x, grad_x);
        self.grad_theta(theta, x, grad_theta);
        self.potential(theta, x)
    }

    /// Draws `n` initial positions as a row-major `n × dim_x` buffer.
    fn init_particles(&self, theta0: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    /// Maps θ back into its admissible set. Returns true if anything was clipped.
    fn project_theta(&self, _theta: &mut [f64]) -> bool {
        false
    }
}

impl<M: LatentModel + ?Sized> LatentModel for &M {
    fn dim_x(&self) -> usize {
        (**self).dim_x()
    }
    fn dim_theta(&self) -> usize {
        (**self).dim_theta()
    }
    fn potential(&self, theta: &[f64], x: &[f64]) -> f64 {
        (**self).potential(theta, x)
    }
    fn grad_x(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        (**self).grad_x(theta, x, out)
    }
    fn grad_theta(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        (**self).grad_theta(theta, x, out)
    }
    fn evaluate(&self, theta: &[f64], x: &[f64], gx: &mut [f64], gt: &mut [f64]) -> f64 {
        (**self).evaluate(theta, x, gx, gt)
    }
    fn init_particles(&self, theta0: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        (**self).init_particles(theta0, n, rng)
    }
    fn project_theta(&self, theta: &mut [f64]) -> bool {
        (**self).project_theta(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub max_rel_err_x: f64,
    pub max_rel_err_theta: f64,
}

impl GradientReport {
    pub fn max(&self) -> f64 {
        self.max_rel_err_x.max(self.max_rel_err_theta)
    }
}

/// Relative error with a unit floor on the scale, so components near zero are
/// compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / scale
}

/// Compares analytic gradients with central finite differences of the potential.
pub fn check_gradients<M: LatentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    x: &[f64],
    fd_step: f64,
) -> Result<GradientReport> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidConfig(format!("fd_step must be positive, got {fd_step}")));
    }
    if theta.len() != model.dim_theta() || x.len() != model.dim_x() {
        return Err(Error::DimensionMismatch(format!(
            "expected θ∈R^{} and x∈R^{}, got {} and {}",
            model.dim_theta(),
            model.dim_x(),
            theta.len(),
            x.len()
        )));
    }
    if theta.iter().chain(x).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient check input"));
    }

    let mut gx = vec![0.0; x.len()];
    let mut gt = vec![0.0; theta.len()];
    model.grad_x(theta, x, &mut gx);
    model.grad_theta(theta, x, &mut gt);

    let mut xp = x.to_vec();
    let mut max_x: f64 = 0.0;
    for j in 0..x.len() {
        xp[j] = x[j] + fd_step;
        let up = model.potential(theta, &xp);
        xp[j] = x[j] - fd_step;
        let um = model.potential(theta, &xp);
        xp[j] = x[j];
        if !up.is_finite() || !um.is_finite() {
            return Err(Error::PotentialUndefined);
        }
        max_x = max_x.max(relative_error(gx[j], (up - um) / (2.0 * fd_step)));
    }

    let mut tp = theta.to_vec();
    let mut max_t: f64 = 0.0;
    for j in 0..theta.len() {
        tp[j] = theta[j] + fd_step;
        let up = model.potential(&tp, x);
        tp[j] = theta[j] - fd_step;
        let um = model.potential(&tp, x);
        tp[j] = theta[j];
        if !up.is_finite() || !um.is_finite() {
            return Err(Error::PotentialUndefined);
        }
        max_t = max_t.max(relative_error(gt[j], (up - um) / (2.0 * fd_step)));
    }

    Ok(GradientReport {
        max_rel_err_x: max_x,
        max_rel_err_theta: max_t,
    })
}
