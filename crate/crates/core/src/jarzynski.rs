//! The Jarzynski-weighted ULA kernel and its resampling machinery.

use rand::RngCore;

use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};
use crate::model::LatentModel;
use crate::rng::{fill_standard_normal, uniform01};

/// Result of one weighted ULA transition.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStepRecord {
    pub new_position: Vec<f64>,
    pub new_log_weight: f64,
    pub alpha_forward: f64,
    pub alpha_backward: f64,
}

/// α from a precomputed potential value and gradient at `x_l`.
#[inline]
pub fn alpha_from_parts(u_l: f64, grad_l: &[f64], x_l: &[f64], x_r: &[f64], h: f64) -> f64 {
    let mut drift = 0.0;
    let mut sq = 0.0;
    for j in 0..x_l.len() {
        drift += (x_r[j] - x_l[j]) * grad_l[j];
        sq += grad_l[j] * grad_l[j];
    }
    u_l + 0.5 * drift + 0.25 * h * sq
}

/// `α(x_l, x_r) = U(x_l) + ½ (x_r − x_l)·∇U(x_l) + (h/4) |∇U(x_l)|²`.
pub fn alpha<M: LatentModel + ?Sized>(model: &M, theta: &[f64], x_l: &[f64], x_r: &[f64], h: f64) -> Result<f64> {
    let mut g = vec![0.0; x_l.len()];
    model.grad_x(theta, x_l, &mut g);
    let u = model.potential(theta, x_l);
    if !u.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("potential or gradient in alpha"));
    }
    let a = alpha_from_parts(u, &g, x_l, x_r, h);
    if a.is_finite() {
        Ok(a)
    } else {
        Err(Error::NonFinite("alpha"))
    }
}

/// `x − h·grad + √(2h)·noise`.
pub fn ula_step(x: &[f64], grad: &[f64], h: f64, noise: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    ula_step_in_place(&mut out, grad, h, noise);
    out
}

#[inline]
pub fn ula_step_in_place(x: &mut [f64], grad: &[f64], h: f64, noise: &[f64]) {
    let s = (2.0 * h).sqrt();
    for j in 0..x.len() {
        x[j] += -h * grad[j] + s * noise[j];
    }
}

/// Moves one particle with the drift at `theta_now` and updates its log-weight;
/// the backward α is evaluated at `theta_next`.
pub fn kernel_step_with_noise<M: LatentModel + ?Sized>(
    model: &M,
    theta_now: &[f64],
    theta_next: &[f64],
    x: &[f64],
    log_weight: f64,
    h: f64,
    noise: &[f64],
) -> Result<KernelStepRecord> {
    let d = x.len();
    let mut g = vec![0.0; d];
    model.grad_x(theta_now, x, &mut g);
    let u = model.potential(theta_now, x);
    let new_position = ula_step(x, &g, h, noise);
    if new_position.iter().any(|v| !v.is_finite()) {
        return Err(Error::ParticleDiverged);
    }
    let alpha_forward = alpha_from_parts(u, &g, x, &new_position, h);
    let alpha_backward = alpha(model, theta_next, &new_position, x, h).map_err(|_| Error::ParticleDiverged)?;
    let new_log_weight = log_weight - alpha_backward + alpha_forward;
    if !new_log_weight.is_finite() {
        return Err(Error::ParticleDiverged);
    }
    Ok(KernelStepRecord {
        new_position,
        new_log_weight,
        alpha_forward,
        alpha_backward,
    })
}

/// [`kernel_step_with_noise`] with the Gaussian noise drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn kernel_step<M: LatentModel + ?Sized, R: RngCore + ?Sized>(
    model: &M,
    theta_now: &[f64],
    theta_next: &[f64],
    x: &[f64],
    log_weight: f64,
    h: f64,
    rng: &mut R,
) -> Result<KernelStepRecord> {
    let mut noise = vec![0.0; x.len()];
    fill_standard_normal(rng, &mut noise);
    kernel_step_with_noise(model, theta_now, theta_next, x, log_weight, h, &noise)
}

/// Softmax of the log-weights with max subtraction.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::DimensionMismatch("no weights".into()));
    }
    if log_weights.iter().any(|a| a.is_nan() || *a == f64::INFINITY) {
        return Err(Error::NonFinite("log-weights"));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::WeightDegeneracy);
    }
    let mut w: Vec<f64> = log_weights.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::WeightDegeneracy);
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// `log((1/N) Σ e^{A_i})`, stable for large or very negative A.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|a| (a - max).exp()).sum();
    max + s.ln() - (values.len() as f64).ln()
}

/// Effective sample size `1/Σ w_i²` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Ancestor indices from the grid `(u + j)/N` against the cumulative weights.
pub fn systematic_resample(weights: &[f64], u: f64) -> Result<Vec<usize>> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    if n == 0 || (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::UnnormalizedWeights(total));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::InvalidConfig(format!("resampling offset {u} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(n);
    let mut cumsum = weights[0];
    let mut i = 0;
    for j in 0..n {
        let pos = (u + j as f64) / n as f64;
        while pos >= cumsum && i < n - 1 {
            i += 1;
            cumsum += weights[i];
        }
        // Rounding in the running sum can push the last grid points onto a
        // zero-weight tail.
        while weights[i] == 0.0 && i > 0 {
            i -= 1;
        }
        out.push(i);
    }
    Ok(out)
}

/// Banks `log((1/N)Σe^{A})` as a new evidence segment, replaces the particles by
/// systematically resampled ancestors and resets every log-weight to zero.
/// Returns the ancestor indices so callers can carry per-particle caches along.
pub fn resample_cloud<R: RngCore + ?Sized>(cloud: &mut ParticleCloud, rng: &mut R) -> Result<Vec<usize>> {
    let w = cloud.weights()?;
    let ancestors = systematic_resample(&w, uniform01(rng))?;
    cloud.evidence_segments.push(log_mean_exp(&cloud.log_weights));
    cloud.reindex(&ancestors);
    Ok(ancestors)
}
