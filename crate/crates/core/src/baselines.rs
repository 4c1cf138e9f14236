//! Equally weighted particle comparators: PGD, IPLA, SFLA and SOUL.
//!
//! Step functions take their Gaussian noise explicitly; the runners draw it from
//! the same sub-stream scheme as the JALA-EM engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jarzynski::ula_step_in_place;
use crate::model::LatentModel;
use crate::optim::l2_norm;
use crate::rng::{fill_standard_normal, substream, tag};
use crate::trajectory::{Trajectory, TrajectoryRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Pgd,
    Ipla,
    Sfla,
    Soul,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Shared step for PGD/IPLA/SFLA; the Langevin step for SOUL.
    pub gamma: f64,
    #[serde(default)]
    pub soul_theta_gamma: Option<f64>,
    #[serde(default)]
    pub sfla_beta: Option<f64>,
    #[serde(default)]
    pub sfla_epsilon: Option<f64>,
    /// Particle count, or inner chain length for SOUL.
    pub n_particles: usize,
    pub n_iterations: usize,
    pub theta_init: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, gamma: f64, n_particles: usize, n_iterations: usize, theta_init: Vec<f64>) -> Self {
        Self {
            kind,
            gamma,
            soul_theta_gamma: None,
            sfla_beta: None,
            sfla_epsilon: None,
            n_particles,
            n_iterations,
            theta_init,
            seed: 0,
        }
    }

    pub fn pgd(gamma: f64, n: usize, k: usize, theta: Vec<f64>) -> Self {
        Self::new(BaselineKind::Pgd, gamma, n, k, theta)
    }

    pub fn ipla(gamma: f64, n: usize, k: usize, theta: Vec<f64>) -> Self {
        Self::new(BaselineKind::Ipla, gamma, n, k, theta)
    }

    pub fn sfla(gamma: f64, beta: f64, epsilon: f64, k: usize, theta: Vec<f64>) -> Self {
        Self {
            sfla_beta: Some(beta),
            sfla_epsilon: Some(epsilon),
            ..Self::new(BaselineKind::Sfla, gamma, 1, k, theta)
        }
    }

    pub fn soul(gamma_x: f64, gamma_theta: f64, inner: usize, k: usize, theta: Vec<f64>) -> Self {
        Self {
            soul_theta_gamma: Some(gamma_theta),
            ..Self::new(BaselineKind::Soul, gamma_x, inner, k, theta)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.n_particles == 0 {
            return bad("need at least one particle or inner step".into());
        }
        match self.kind {
            BaselineKind::Sfla => {
                for (name, v) in [("sfla_beta", self.sfla_beta), ("sfla_epsilon", self.sfla_epsilon)] {
                    match v {
                        Some(v) if v > 0.0 => {}
                        _ => return bad(format!("{name} must be set and positive")),
                    }
                }
            }
            BaselineKind::Soul => match self.soul_theta_gamma {
                Some(v) if v > 0.0 && v.is_finite() => {}
                _ => return bad("soul_theta_gamma must be set and positive".into()),
            },
            _ => {}
        }
        Ok(())
    }
}

/// Outcome of a baseline run. `particles` is row-major; for SOUL it holds the
/// inner-chain states of the last outer iteration.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub theta_final: Vec<f64>,
    pub particles: Vec<f64>,
    pub dim: usize,
    pub trajectory: Trajectory,
    pub iterations_run: usize,
}

impl BaselineResult {
    pub fn particle_count(&self) -> usize {
        self.particles.len() / self.dim.max(1)
    }
}

fn mean_theta_gradient<M: LatentModel + ?Sized>(model: &M, theta: &[f64], particles: &[f64], gx: &mut [f64]) -> Vec<f64> {
    let d = model.dim_x();
    let dt = model.dim_theta();
    let n = particles.len() / d;
    let mut acc = vec![0.0; dt];
    let mut gt = vec![0.0; dt];
    for (i, x) in particles.chunks(d).enumerate() {
        model.evaluate(theta, x, &mut gx[i * d..(i + 1) * d], &mut gt);
        for j in 0..dt {
            acc[j] += gt[j];
        }
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    acc
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::ParticleDiverged)
    }
}

/// One PGD step: particles move by ULA at the old θ; returns `(θ', mean ∇_θU)`.
pub fn pgd_step<M: LatentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    particles: &mut [f64],
    gamma: f64,
    noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gx = vec![0.0; particles.len()];
    let g = mean_theta_gradient(model, theta, particles, &mut gx);
    ula_step_in_place(particles, &gx, gamma, noise);
    check_finite(particles)?;
    let next: Vec<f64> = theta.iter().zip(&g).map(|(t, g)| t - gamma * g).collect();
    check_finite(&next)?;
    Ok((next, g))
}

/// PGD plus `√(2γ/N)·ξ` on θ.
pub fn ipla_step<M: LatentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    particles: &mut [f64],
    gamma: f64,
    noise: &[f64],
    theta_noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = particles.len() / model.dim_x();
    let (mut next, g) = pgd_step(model, theta, particles, gamma, noise)?;
    let s = (2.0 * gamma / n as f64).sqrt();
    for (t, xi) in next.iter_mut().zip(theta_noise) {
        *t += s * xi;
    }
    Ok((next, g))
}

/// Two-timescale step on a single latent chain: θ moves with γ and temperature
/// 1/β, the chain with γ/ε.
#[allow(clippy::too_many_arguments)]
pub fn sfla_step<M: LatentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    x: &mut [f64],
    gamma: f64,
    beta: f64,
    epsilon: f64,
    noise: &[f64],
    theta_noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gx = vec![0.0; x.len()];
    let mut gt = vec![0.0; model.dim_theta()];
    model.evaluate(theta, x, &mut gx, &mut gt);
    ula_step_in_place(x, &gx, gamma / epsilon, noise);
    check_finite(x)?;
    let s = (2.0 * gamma / beta).sqrt();
    let next: Vec<f64> = (0..theta.len()).map(|j| theta[j] - gamma * gt[j] + s * theta_noise[j]).collect();
    check_finite(&next)?;
    Ok((next, gt))
}

/// Runs `inner.len()` ULA steps at frozen θ from `chain`, recording every
/// post-step state into `states`; θ moves against the average ∇_θU over them.
pub fn soul_step<M: LatentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    chain: &mut [f64],
    gamma_theta: f64,
    gamma_x: f64,
    inner_noise: &[Vec<f64>],
    states: &mut Vec<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if inner_noise.is_empty() {
        return Err(Error::InvalidConfig("SOUL needs at least one inner step".into()));
    }
    let d = chain.len();
    let dt = model.dim_theta();
    let mut gx = vec![0.0; d];
    let mut gt = vec![0.0; dt];
    let mut acc = vec![0.0; dt];
    states.clear();
    model.evaluate(theta, chain, &mut gx, &mut gt);
    for noise in inner_noise {
        ula_step_in_place(chain, &gx, gamma_x, noise);
        check_finite(chain)?;
        model.evaluate(theta, chain, &mut gx, &mut gt);
        for j in 0..dt {
            acc[j] += gt[j];
        }
        states.extend_from_slice(chain);
    }
    let m = inner_noise.len() as f64;
    acc.iter_mut().for_each(|v| *v /= m);
    let next: Vec<f64> = theta.iter().zip(&acc).map(|(t, g)| t - gamma_theta * g).collect();
    check_finite(&next)?;
    Ok((next, acc))
}

/// Snapshot handed to observers: iteration, θ and the current particle set.
pub struct BaselineProgress<'a> {
    pub k: usize,
    pub theta: &'a [f64],
    pub particles: &'a [f64],
}

pub fn run_baseline<M: LatentModel + ?Sized>(model: &M, config: &BaselineConfig) -> Result<BaselineResult> {
    run_baseline_observed(model, config, |_| true)
}

/// Runs the configured baseline; the observer may stop it early by returning false.
pub fn run_baseline_observed<M, F>(model: &M, config: &BaselineConfig, mut observer: F) -> Result<BaselineResult>
where
    M: LatentModel + ?Sized,
    F: FnMut(&BaselineProgress<'_>) -> bool,
{
    config.validate()?;
    let d = model.dim_x();
    let dt = model.dim_theta();
    if config.theta_init.len() != dt {
        return Err(Error::DimensionMismatch(format!(
            "theta_init has {} entries, model expects {dt}",
            config.theta_init.len()
        )));
    }
    let seed = config.seed;
    let mut theta = config.theta_init.clone();
    model.project_theta(&mut theta);
    let n_chains = match config.kind {
        BaselineKind::Pgd | BaselineKind::Ipla => config.n_particles,
        BaselineKind::Sfla | BaselineKind::Soul => 1,
    };
    let mut particles = model.init_particles(&theta, n_chains, &mut substream(seed, tag::INIT, 0, 0))?;
    let mut soul_states = particles.clone();
    let mut trajectory = Trajectory::default();
    let ess = config.n_particles as f64;
    let mut last_grad = 0.0;

    let noise_for = |k: usize, i: usize| {
        let mut z = vec![0.0; d];
        fill_standard_normal(&mut substream(seed, tag::PARTICLE, k as u64, i as u64), &mut z);
        z
    };
    let theta_noise_for = |k: usize| {
        let mut z = vec![0.0; dt];
        fill_standard_normal(&mut substream(seed, tag::THETA_NOISE, k as u64, 0), &mut z);
        z
    };

    let mut k = 0;
    loop {
        trajectory.push(TrajectoryRow {
            k,
            theta: theta.clone(),
            ess,
            log_evidence: None,
            grad_norm: last_grad,
            resampled: false,
        });
        if k == config.n_iterations {
            break;
        }
        let step = match config.kind {
            BaselineKind::Pgd | BaselineKind::Ipla => {
                let noise: Vec<f64> = (0..n_chains).flat_map(|i| noise_for(k, i)).collect();
                if config.kind == BaselineKind::Pgd {
                    pgd_step(model, &theta, &mut particles, config.gamma, &noise)
                } else {
                    ipla_step(model, &theta, &mut particles, config.gamma, &noise, &theta_noise_for(k))
                }
            }
            BaselineKind::Sfla => sfla_step(
                model,
                &theta,
                &mut particles,
                config.gamma,
                config.sfla_beta.unwrap_or(f64::INFINITY),
                config.sfla_epsilon.unwrap_or(1.0),
                &noise_for(k, 0),
                &theta_noise_for(k),
            ),
            BaselineKind::Soul => {
                let inner: Vec<Vec<f64>> = (0..config.n_particles).map(|j| noise_for(k, j)).collect();
                soul_step(
                    model,
                    &theta,
                    &mut particles,
                    config.soul_theta_gamma.unwrap_or(config.gamma),
                    config.gamma,
                    &inner,
                    &mut soul_states,
                )
            }
        };
        let (mut next, g) = step.map_err(|e| e.at_iteration(k))?;
        model.project_theta(&mut next);
        theta = next;
        last_grad = l2_norm(&g);
        k += 1;
        let current = if config.kind == BaselineKind::Soul { &soul_states } else { &particles };
        if !observer(&BaselineProgress {
            k,
            theta: &theta,
            particles: current,
        }) {
            trajectory.push(TrajectoryRow {
                k,
                theta: theta.clone(),
                ess,
                log_evidence: None,
                grad_norm: last_grad,
                resampled: false,
            });
            break;
        }
    }
    let particles = if config.kind == BaselineKind::Soul { soul_states } else { particles };
    Ok(BaselineResult {
        theta_final: theta,
        particles,
        dim: d,
        trajectory,
        iterations_run: k,
    })
}
