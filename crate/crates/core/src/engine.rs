//! The JALA-EM outer loop.

use rayon::prelude::*;

use crate::cloud::ParticleCloud;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::jarzynski::{alpha_from_parts, ess, normalized_weights, resample_cloud};
use crate::model::LatentModel;
use crate::optim::{clip_gradient, l2_norm, normalize_gradient, OptimizerSpec, ThetaState};
use crate::rng::{fill_standard_normal, substream, tag};
use crate::trajectory::{Trajectory, TrajectoryRow};

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_final: Vec<f64>,
    pub weights_final: Vec<f64>,
    pub cloud: ParticleCloud,
    pub trajectory: Trajectory,
    pub log_evidence_final: f64,
    /// Last completed iteration; below `n_iterations` when an observer stopped the run.
    pub iterations_run: usize,
}

impl FitResult {
    pub fn positions_final(&self) -> &[f64] {
        self.cloud.positions()
    }
}

/// Snapshot handed to observers after every iteration.
pub struct Progress<'a> {
    pub k: usize,
    pub theta: &'a [f64],
    pub cloud: &'a ParticleCloud,
}

/// Builder for a JALA-EM run.
pub struct JalaEm<'a, M: LatentModel + ?Sized> {
    model: &'a M,
    config: RunConfig,
    log_z0: f64,
    initial_positions: Option<Vec<f64>>,
}

/// Per-particle `(U, ∇_x U, ∇_θ U)` at the current `(θ, X)`.
struct Cache {
    u: Vec<f64>,
    gx: Vec<f64>,
    gt: Vec<f64>,
}

impl<'a, M: LatentModel + ?Sized> JalaEm<'a, M> {
    pub fn new(model: &'a M, config: RunConfig, log_z0: f64) -> Self {
        Self {
            model,
            config,
            log_z0,
            initial_positions: None,
        }
    }

    /// Starts from the given row-major positions instead of the model's initializer.
    pub fn with_initial_positions(mut self, positions: Vec<f64>) -> Self {
        self.initial_positions = Some(positions);
        self
    }

    pub fn run(self) -> Result<FitResult> {
        self.run_observed(|_| true)
    }

    /// Runs the loop, calling `observer` after each iteration; returning false stops early.
    pub fn run_observed<F: FnMut(&Progress<'_>) -> bool>(self, mut observer: F) -> Result<FitResult> {
        let model = self.model;
        let cfg = &self.config;
        cfg.validate()?;
        let dx = model.dim_x();
        let dt = model.dim_theta();
        let n = cfg.n_particles;
        if cfg.theta_init.len() != dt {
            return Err(Error::DimensionMismatch(format!(
                "theta_init has {} entries, model expects {dt}",
                cfg.theta_init.len()
            )));
        }

        let mut theta = ThetaState::new(cfg.theta_init.clone(), &cfg.optimizer);
        model.project_theta(&mut theta.theta);

        let positions = match self.initial_positions {
            Some(p) => p,
            None => {
                let mut rng = substream(cfg.seed, tag::INIT, 0, 0);
                model.init_particles(&theta.theta, n, &mut rng)?
            }
        };
        if positions.len() != n * dx {
            return Err(Error::DimensionMismatch(format!(
                "{} initial values for {n} particles of dimension {dx}",
                positions.len()
            )));
        }
        let mut cloud = ParticleCloud::new(dx, positions)?;
        let mut cache = Cache {
            u: vec![0.0; n],
            gx: vec![0.0; n * dx],
            gt: vec![0.0; n * dt],
        };
        evaluate_all(model, &theta.theta, &cloud, &mut cache).map_err(|e| e.at_iteration(0))?;

        let h = cfg.langevin_step;
        let mut trajectory = Trajectory::default();
        let mut pending_ess = n as f64;
        let mut pending_resampled = false;
        let mut k = 0;
        loop {
            let w = normalized_weights(&cloud.log_weights).map_err(|e| e.at_iteration(k))?;
            let g = weighted_gradient(&w, &cache.gt, dt);
            trajectory.push(TrajectoryRow {
                k,
                theta: theta.theta.clone(),
                ess: pending_ess,
                log_evidence: Some(cloud.log_evidence(self.log_z0)),
                grad_norm: l2_norm(&g),
                resampled: pending_resampled,
            });
            if k == cfg.n_iterations {
                break;
            }

            let mut step = g;
            if step.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameter gradient").at_iteration(k));
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_gradient(&mut step, max);
            }
            if cfg.normalize_gradient {
                normalize_gradient(&mut step);
            }
            theta.step(&step, &cfg.optimizer);
            model.project_theta(&mut theta.theta);
            if theta.theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameter update").at_iteration(k));
            }

            sweep(model, &theta.theta, h, cfg.seed, k as u64, &mut cloud, &mut cache)
                .map_err(|e| e.at_iteration(k))?;

            let w_next = normalized_weights(&cloud.log_weights).map_err(|e| e.at_iteration(k + 1))?;
            pending_ess = ess(&w_next);
            pending_resampled = pending_ess / (n as f64) < cfg.ess_threshold_fraction;
            if pending_resampled {
                let mut rng = substream(cfg.seed, tag::RESAMPLE, k as u64, 0);
                let ancestors = resample_cloud(&mut cloud, &mut rng).map_err(|e| e.at_iteration(k + 1))?;
                cache.reindex(&ancestors, dx, dt);
            }
            k += 1;

            let keep_going = observer(&Progress {
                k,
                theta: &theta.theta,
                cloud: &cloud,
            });
            if !keep_going {
                let w = normalized_weights(&cloud.log_weights).map_err(|e| e.at_iteration(k))?;
                let g = weighted_gradient(&w, &cache.gt, dt);
                trajectory.push(TrajectoryRow {
                    k,
                    theta: theta.theta.clone(),
                    ess: pending_ess,
                    log_evidence: Some(cloud.log_evidence(self.log_z0)),
                    grad_norm: l2_norm(&g),
                    resampled: pending_resampled,
                });
                break;
            }
        }

        let weights_final = normalized_weights(&cloud.log_weights)?;
        Ok(FitResult {
            theta_final: theta.theta,
            weights_final,
            log_evidence_final: cloud.log_evidence(self.log_z0),
            cloud,
            trajectory,
            iterations_run: k,
        })
    }
}

/// Convenience wrapper around [`JalaEm`].
pub fn run_jala_em<M: LatentModel + ?Sized>(model: &M, config: RunConfig, log_z0: f64) -> Result<FitResult> {
    JalaEm::new(model, config, log_z0).run()
}

impl Cache {
    fn reindex(&mut self, ancestors: &[usize], dx: usize, dt: usize) {
        let u: Vec<f64> = ancestors.iter().map(|&a| self.u[a]).collect();
        let mut gx = Vec::with_capacity(self.gx.len());
        let mut gt = Vec::with_capacity(self.gt.len());
        for &a in ancestors {
            gx.extend_from_slice(&self.gx[a * dx..(a + 1) * dx]);
            gt.extend_from_slice(&self.gt[a * dt..(a + 1) * dt]);
        }
        self.u = u;
        self.gx = gx;
        self.gt = gt;
    }
}

fn weighted_gradient(w: &[f64], gt: &[f64], dt: usize) -> Vec<f64> {
    let mut g = vec![0.0; dt];
    for (i, wi) in w.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        for j in 0..dt {
            g[j] += wi * gt[i * dt + j];
        }
    }
    g
}

fn evaluate_all<M: LatentModel + ?Sized>(model: &M, theta: &[f64], cloud: &ParticleCloud, cache: &mut Cache) -> Result<()> {
    let dx = cloud.dim();
    let dt = model.dim_theta();
    cache
        .u
        .par_iter_mut()
        .zip(cache.gx.par_chunks_mut(dx))
        .zip(cache.gt.par_chunks_mut(dt.max(1)))
        .zip(cloud.positions().par_chunks(dx))
        .try_for_each(|(((u, gx), gt), x)| {
            *u = model.evaluate(theta, x, gx, gt);
            if u.is_finite() && gx.iter().chain(gt.iter()).all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::PotentialUndefined)
            }
        })
}

/// Moves every particle with the cached drift (evaluated at the current θ),
/// updates its log-weight and refreshes the cache at `(theta_next, X_new)`.
fn sweep<M: LatentModel + ?Sized>(
    model: &M,
    theta_next: &[f64],
    h: f64,
    seed: u64,
    k: u64,
    cloud: &mut ParticleCloud,
    cache: &mut Cache,
) -> Result<()> {
    let dx = cloud.dim();
    let dt = model.dim_theta();
    let sqrt_2h = (2.0 * h).sqrt();
    let mut log_weights = std::mem::take(&mut cloud.log_weights);
    let result = cloud
        .positions_mut()
        .par_chunks_mut(dx)
        .zip(log_weights.par_iter_mut())
        .zip(cache.u.par_iter_mut())
        .zip(cache.gx.par_chunks_mut(dx))
        .zip(cache.gt.par_chunks_mut(dt.max(1)))
        .enumerate()
        .try_for_each(|(i, ((((x, a), u), gx), gt))| {
            let mut rng = substream(seed, tag::PARTICLE, k, i as u64);
            let mut x_new = vec![0.0; dx];
            fill_standard_normal(&mut rng, &mut x_new);
            for j in 0..dx {
                x_new[j] = x[j] - h * gx[j] + sqrt_2h * x_new[j];
            }
            if x_new.iter().any(|v| !v.is_finite()) {
                return Err(Error::ParticleDiverged);
            }
            let alpha_forward = alpha_from_parts(*u, gx, x, &x_new, h);
            let mut gx_new = vec![0.0; dx];
            let u_new = model.evaluate(theta_next, &x_new, &mut gx_new, gt);
            if !u_new.is_finite() || gx_new.iter().any(|v| !v.is_finite()) {
                return Err(Error::ParticleDiverged);
            }
            let alpha_backward = alpha_from_parts(u_new, &gx_new, &x_new, x, h);
            let a_new = *a - alpha_backward + alpha_forward;
            if !a_new.is_finite() {
                return Err(Error::ParticleDiverged);
            }
            *a = a_new;
            *u = u_new;
            gx.copy_from_slice(&gx_new);
            x.copy_from_slice(&x_new);
            Ok(())
        });
    cloud.log_weights = log_weights;
    result
}

/// Weighted average of `∇_θ U` over the cloud.
pub fn estimate_gradient<M: LatentModel + ?Sized>(cloud: &ParticleCloud, model: &M, theta: &[f64]) -> Result<Vec<f64>> {
    let w = cloud.weights()?;
    let dt = model.dim_theta();
    let mut g = vec![0.0; dt];
    let mut gi = vec![0.0; dt];
    for (i, wi) in w.iter().enumerate() {
        model.grad_theta(theta, cloud.particle(i), &mut gi);
        for j in 0..dt {
            g[j] += wi * gi[j];
        }
    }
    Ok(g)
}

/// Models whose marginal-likelihood gradient is known in closed form.
pub trait MarginalOracle: LatentModel {
    /// `∇_θ V(θ)` with `V(θ) = -log p_θ(y)`.
    fn grad_neg_log_marginal(&self, theta: &[f64]) -> Vec<f64>;
}

/// Frozen-θ run settings for [`mse_scaling_probe`].
#[derive(Debug, Clone, Copy)]
pub struct ProbeSettings {
    pub n_iterations: usize,
    pub langevin_step: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            n_iterations: 20,
            langevin_step: 0.1,
            seed: 0,
        }
    }
}

/// For each `N`, the mean squared error of the weighted gradient estimate
/// against `∇V(θ)` over `trials` independent frozen-θ runs.
pub fn mse_scaling_probe<M: MarginalOracle + ?Sized>(
    model: &M,
    theta: &[f64],
    ns: &[usize],
    trials: usize,
    settings: ProbeSettings,
) -> Result<Vec<(usize, f64)>> {
    let target = model.grad_neg_log_marginal(theta);
    ns.iter()
        .map(|&n| {
            let errs: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let seed = crate::rng::derive_seed(settings.seed, tag::PROBE, n as u64, t as u64);
                    let cfg = RunConfig::new(n, settings.n_iterations, settings.langevin_step, OptimizerSpec::sgd(0.0), theta.to_vec())
                        .with_seed(seed);
                    let fit = run_jala_em(model, cfg, 0.0)?;
                    let g = estimate_gradient(&fit.cloud, model, theta)?;
                    Ok(g.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                })
                .collect::<Result<_>>()?;
            Ok((n, errs.iter().sum::<f64>() / trials as f64))
        })
        .collect()
}

/// Least-squares slope of `log MSE` against `log N`.
pub fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ConjugateGaussian;

    fn oracle_config(k: usize, gamma: f64) -> RunConfig {
        RunConfig::new(100, k, 0.1, OptimizerSpec::sgd(gamma), vec![0.0])
    }

    #[test]
    fn single_particle_gradient_is_exact() {
        let m = ConjugateGaussian::new(2.0);
        let c = ParticleCloud::new(1, vec![1.3]).unwrap();
        assert_eq!(estimate_gradient(&c, &m, &[0.4]).unwrap(), vec![0.4 - 1.3]);
    }

    #[test]
    fn uniform_weights_give_the_mean() {
        let m = ConjugateGaussian::new(2.0);
        let c = ParticleCloud::new(1, vec![1.0, 2.0, 6.0]).unwrap();
        let g = estimate_gradient(&c, &m, &[0.0]).unwrap();
        assert!((g[0] + 3.0).abs() < 1e-15);
    }

    #[test]
    fn fisher_identity_on_exact_posterior() {
        let m = ConjugateGaussian::new(2.0);
        let mut rng = substream(3, tag::INIT, 0, 0);
        let n = 100_000;
        let xs = m.init_particles(&[0.0], n, &mut rng).unwrap();
        let c = ParticleCloud::new(1, xs).unwrap();
        let g = estimate_gradient(&c, &m, &[0.0]).unwrap()[0];
        assert!((g + 1.0).abs() < 3.0 * (0.5 / n as f64).sqrt(), "g = {g}");
    }

    #[test]
    fn zero_iterations_returns_the_start() {
        let m = ConjugateGaussian::new(2.0);
        let fit = run_jala_em(&m, oracle_config(0, 0.1), -1.25).unwrap();
        assert_eq!(fit.theta_final, vec![0.0]);
        assert_eq!(fit.log_evidence_final, -1.25);
        assert_eq!(fit.trajectory.len(), 1);
    }

    #[test]
    fn converges_to_the_observation() {
        let m = ConjugateGaussian::new(2.0);
        let fit = run_jala_em(&m, oracle_config(500, 0.1).with_seed(11), 0.0).unwrap();
        assert!((fit.theta_final[0] - 2.0).abs() < 0.1, "{:?}", fit.theta_final);
        assert_eq!(fit.trajectory.len(), 501);
        let ks: Vec<usize> = fit.trajectory.rows.iter().map(|r| r.k).collect();
        assert_eq!(ks, (0..=500).collect::<Vec<_>>());
        let w: f64 = fit.weights_final.iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_theta_tracks_the_marginal() {
        let m = ConjugateGaussian::new(2.0);
        let log_z0 = m.log_marginal(0.0);
        assert!((log_z0 - (-0.5 * (4.0 * std::f64::consts::PI).ln() - 1.0)).abs() < 1e-12);
        let fit = run_jala_em(&m, oracle_config(200, 0.0).with_seed(2), log_z0).unwrap();
        assert!((fit.log_evidence_final - log_z0).abs() < 0.05);
    }

    #[test]
    fn runs_are_bit_identical() {
        let m = ConjugateGaussian::new(2.0);
        let a = run_jala_em(&m, oracle_config(50, 0.1).with_seed(9), 0.0).unwrap();
        let b = run_jala_em(&m, oracle_config(50, 0.1).with_seed(9), 0.0).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.cloud, b.cloud);
        let c = run_jala_em(&m, oracle_config(50, 0.1).with_seed(10), 0.0).unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn final_evidence_decomposes() {
        let m = ConjugateGaussian::new(2.0);
        let cfg = oracle_config(100, 0.05).with_seed(4).with_ess_threshold(0.99);
        let fit = run_jala_em(&m, cfg, -0.5).unwrap();
        assert!(fit.trajectory.resample_count() > 0);
        let expected = -0.5 + fit.cloud.evidence_segments.iter().sum::<f64>() + crate::jarzynski::log_mean_exp(&fit.cloud.log_weights);
        assert_eq!(fit.log_evidence_final, expected);
        assert_eq!(fit.cloud.evidence_segments.len(), fit.trajectory.resample_count());
    }

    #[test]
    fn observer_can_stop_early() {
        let m = ConjugateGaussian::new(2.0);
        let fit = JalaEm::new(&m, oracle_config(100, 0.1), 0.0).run_observed(|p| p.k < 7).unwrap();
        assert_eq!(fit.iterations_run, 7);
        assert_eq!(fit.trajectory.len(), 8);
    }

    #[test]
    fn divergence_names_the_iteration() {
        let m = ConjugateGaussian::new(2.0);
        // Resampling would keep discarding the exploding particles.
        let mut cfg = oracle_config(1000, 0.0).with_ess_threshold(0.0);
        cfg.langevin_step = 5.0;
        let err = run_jala_em(&m, cfg, 0.0).unwrap_err();
        assert!(matches!(err, Error::AtIteration { .. }), "{err}");
        assert!(err.is_runtime_failure());
    }

    #[test]
    fn probe_single_particle_matches_definition() {
        let m = ConjugateGaussian::new(2.0);
        let settings = ProbeSettings {
            n_iterations: 0,
            ..Default::default()
        };
        let r = mse_scaling_probe(&m, &[0.5], &[1], 1, settings).unwrap();
        let seed = crate::rng::derive_seed(0, tag::PROBE, 1, 0);
        let x = m.init_particles(&[0.5], 1, &mut substream(seed, tag::INIT, 0, 0)).unwrap()[0];
        let expected = ((0.5 - x) - (0.5 - 1.25)).powi(2);
        assert!((r[0].1 - expected).abs() < 1e-15);
        let again = mse_scaling_probe(&m, &[0.5], &[1], 1, settings).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(usize, f64)> = [10, 20, 40].iter().map(|&n| (n, 3.0 / n as f64)).collect();
        assert!((log_log_slope(&pts) + 1.0).abs() < 1e-12);
    }
}
