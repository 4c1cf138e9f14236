//! Predictive metrics and cross-validated step-size tuning.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline_observed, BaselineConfig};
use crate::config::RunConfig;
use crate::data::TabularDataset;
use crate::engine::JalaEm;
use crate::error::{Error, Result};
use crate::models::blr::sigmoid;
use crate::models::{BayesianLogistic, TinyBnn};
use crate::optim::{h_euler, hessian_bound_blr, power_iteration, OptimizerSpec};
use crate::rng::{derive_seed, substream, tag};

/// Smallest predictive probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-30;

/// A model that maps one latent sample to class probabilities.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    /// `rows × classes` matrix of predictive probabilities under one particle.
    fn predict(&self, particle: &[f64], features: &DMatrix<f64>) -> DMatrix<f64>;
}

impl Classifier for BayesianLogistic {
    fn n_classes(&self) -> usize {
        2
    }

    fn predict(&self, w: &[f64], features: &DMatrix<f64>) -> DMatrix<f64> {
        let z = features * DVector::from_column_slice(w);
        DMatrix::from_fn(features.nrows(), 2, |i, c| {
            let p = sigmoid(z[i]);
            if c == 1 {
                p
            } else {
                1.0 - p
            }
        })
    }
}

impl Classifier for TinyBnn {
    fn n_classes(&self) -> usize {
        self.classes()
    }

    fn predict(&self, w: &[f64], features: &DMatrix<f64>) -> DMatrix<f64> {
        self.class_probabilities(w, features)
    }
}

/// Weighted ensemble average of the predictive distribution; uniform weights
/// when `weights` is `None`.
pub fn ensemble_probabilities<C: Classifier + ?Sized>(
    model: &C,
    particles: &[f64],
    dim: usize,
    weights: Option<&[f64]>,
    features: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = particles.len() / dim;
    let mut acc = DMatrix::zeros(features.nrows(), model.n_classes());
    let total: f64 = weights.map_or(n as f64, |w| w.iter().sum());
    for (i, p) in particles.chunks(dim).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        acc += model.predict(p, features) * (w / total);
    }
    acc
}

/// Mean log of the ensemble probability assigned to the true label, floored at
/// [`PROB_FLOOR`].
pub fn lppd<C: Classifier + ?Sized>(
    model: &C,
    particles: &[f64],
    dim: usize,
    weights: Option<&[f64]>,
    features: &DMatrix<f64>,
    labels: &[usize],
) -> f64 {
    let probs = ensemble_probabilities(model, particles, dim, weights, features);
    lppd_from_probabilities(&probs, labels)
}

pub fn lppd_from_probabilities(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs[(i, y)].max(PROB_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

/// Fraction of rows whose argmax ensemble class differs from the label.
pub fn test_error<C: Classifier + ?Sized>(
    model: &C,
    particles: &[f64],
    dim: usize,
    weights: Option<&[f64]>,
    features: &DMatrix<f64>,
    labels: &[usize],
) -> f64 {
    let probs = ensemble_probabilities(model, particles, dim, weights, features);
    error_from_probabilities(&probs, labels)
}

pub fn error_from_probabilities(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = probs.row(*i);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best != y
        })
        .count();
    wrong as f64 / labels.len() as f64
}

/// Mean absolute error of selected orders against the truth.
pub fn order_mae(selected: &[usize], truth: usize) -> f64 {
    selected.iter().map(|&p| (p as f64 - truth as f64).abs()).sum::<f64>() / selected.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneAlgorithm {
    Pgd,
    Soul,
    JalaEm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneGrid {
    pub particle_step_values: Vec<f64>,
    pub theta_step_values: Vec<f64>,
    pub folds: usize,
    pub max_iters: usize,
    pub early_stop_eps: f64,
    /// Consecutive non-improving evaluations before stopping.
    pub patience: usize,
    pub eval_every: usize,
}

impl TuneGrid {
    /// Ten particle steps spanning `[0.2, 2.0]·h_euler` and θ steps {0.05, 0.1, 0.15}.
    pub fn around(h_euler: f64) -> Self {
        Self {
            particle_step_values: linspace(0.2 * h_euler, 2.0 * h_euler, 10),
            theta_step_values: vec![0.05, 0.1, 0.15],
            folds: 3,
            max_iters: 500,
            early_stop_eps: 1e-5,
            patience: 10,
            eval_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particle_step_values.is_empty() || self.theta_step_values.is_empty() {
            return Err(Error::InvalidConfig("tuning grid is empty".into()));
        }
        if self.particle_step_values.iter().chain(&self.theta_step_values).any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("tuning steps must be positive".into()));
        }
        if self.folds < 2 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("need at least two folds and a positive evaluation spacing".into()));
        }
        Ok(())
    }

    /// Grid points for an algorithm; PGD has a single shared step.
    pub fn points(&self, algorithm: TuneAlgorithm) -> Vec<GridPoint> {
        match algorithm {
            TuneAlgorithm::Pgd => self
                .particle_step_values
                .iter()
                .map(|&h| GridPoint {
                    particle_step: h,
                    theta_step: h,
                })
                .collect(),
            _ => self
                .particle_step_values
                .iter()
                .flat_map(|&h| {
                    self.theta_step_values.iter().map(move |&t| GridPoint {
                        particle_step: h,
                        theta_step: t,
                    })
                })
                .collect(),
        }
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub particle_step: f64,
    pub theta_step: f64,
}

/// One (grid point, fold) run; `lppd` is `None` when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub point: GridPoint,
    pub fold: usize,
    pub lppd: Option<f64>,
    pub stopped_at: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub algorithm: TuneAlgorithm,
    pub chosen: GridPoint,
    pub mean_lppd: f64,
    pub records: Vec<TuneRecord>,
}

impl TuneOutcome {
    /// CSV with one row per (grid point, fold).
    pub fn write_report<W: Write>(&self, out: W, comments: &[String]) -> Result<()> {
        let mut out = out;
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["particle_step", "theta_step", "fold", "lppd", "stopped_at_iteration"])?;
        for r in &self.records {
            w.write_record([
                r.point.particle_step.to_string(),
                r.point.theta_step.to_string(),
                r.fold.to_string(),
                r.lppd.map_or(String::new(), |v| v.to_string()),
                r.stopped_at.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stratified fold labels: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut substream(seed, tag::SPLIT, 1, c as u64));
        for i in idx {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    assignment
}

/// Tracks the early-stopping rule on validation LPPD.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    best: f64,
    stale: usize,
    eps: f64,
    patience: usize,
}

impl EarlyStopper {
    pub fn new(eps: f64, patience: usize) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            stale: 0,
            eps,
            patience,
        }
    }

    /// Records an evaluation; returns false once `patience` evaluations in a row
    /// failed to beat the best value by `eps`.
    pub fn observe(&mut self, value: f64) -> bool {
        if value >= self.best + self.eps {
            self.best = value;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale < self.patience
    }
}

/// Everything `cv_tune` needs besides the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BlrTuneSpec {
    pub algorithm: TuneAlgorithm,
    pub n_particles: usize,
    pub sigma0_sq: f64,
    pub theta_init: f64,
    pub ess_threshold_fraction: f64,
}

impl BlrTuneSpec {
    pub fn new(algorithm: TuneAlgorithm, n_particles: usize) -> Self {
        Self {
            algorithm,
            n_particles,
            sigma0_sq: crate::models::blr::DEFAULT_PRIOR_VARIANCE,
            theta_init: 0.0,
            ess_threshold_fraction: 1.0 / 1.05,
        }
    }
}

/// Outcome of a full BLR fit: θ trajectory and the terminal ensemble.
#[derive(Debug, Clone)]
pub struct BlrFit {
    pub theta_final: f64,
    pub particles: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub trajectory: crate::trajectory::Trajectory,
    pub iterations_run: usize,
}

/// Fits BLR with one of the tuned algorithms. `observer(k, particles, weights)`
/// may stop the run.
pub fn fit_blr<F>(
    model: &BayesianLogistic,
    spec: &BlrTuneSpec,
    point: GridPoint,
    iterations: usize,
    seed: u64,
    mut observer: F,
) -> Result<BlrFit>
where
    F: FnMut(usize, &[f64], Option<&[f64]>) -> bool,
{
    match spec.algorithm {
        TuneAlgorithm::JalaEm => {
            let cfg = RunConfig::new(
                spec.n_particles,
                iterations,
                point.particle_step,
                OptimizerSpec::sgd(point.theta_step),
                vec![spec.theta_init],
            )
            .with_ess_threshold(spec.ess_threshold_fraction)
            .with_seed(seed);
            let fit = JalaEm::new(model, cfg, 0.0).run_observed(|p| {
                let w = p.cloud.weights().unwrap_or_default();
                observer(p.k, p.cloud.positions(), Some(&w))
            })?;
            Ok(BlrFit {
                theta_final: fit.theta_final[0],
                particles: fit.cloud.positions().to_vec(),
                weights: Some(fit.weights_final),
                trajectory: fit.trajectory,
                iterations_run: fit.iterations_run,
            })
        }
        TuneAlgorithm::Pgd | TuneAlgorithm::Soul => {
            let cfg = if spec.algorithm == TuneAlgorithm::Pgd {
                BaselineConfig::pgd(point.particle_step, spec.n_particles, iterations, vec![spec.theta_init])
            } else {
                BaselineConfig::soul(
                    point.particle_step,
                    point.theta_step,
                    spec.n_particles,
                    iterations,
                    vec![spec.theta_init],
                )
            }
            .with_seed(seed);
            let r = run_baseline_observed(model, &cfg, |p| observer(p.k, p.particles, None))?;
            Ok(BlrFit {
                theta_final: r.theta_final[0],
                particles: r.particles,
                weights: None,
                trajectory: r.trajectory,
                iterations_run: r.iterations_run,
            })
        }
    }
}

/// `0.99/λ_max` of the logistic Hessian bound, via power iteration.
pub fn blr_h_euler(features: &DMatrix<f64>, sigma0_sq: f64, seed: u64) -> Result<f64> {
    let op = hessian_bound_blr(features, sigma0_sq)?;
    let pi = power_iteration(&op, 10_000, 1e-12, &mut substream(seed, tag::POWER, 0, 0))?;
    h_euler(pi.eigenvalue)
}

/// K-fold cross-validated grid search maximizing mean validation LPPD.
pub fn cv_tune(spec: &BlrTuneSpec, data: &TabularDataset, grid: &TuneGrid, seed: u64) -> Result<TuneOutcome> {
    grid.validate()?;
    let labels = data.class_labels();
    let folds = stratified_folds(&labels, grid.folds, seed);
    let points = grid.points(spec.algorithm);
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..grid.folds).map(move |f| (p, f))).collect();

    let records: Vec<TuneRecord> = jobs
        .par_iter()
        .map(|&(p, f)| {
            let point = points[p];
            let tr: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != f).collect();
            let va: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == f).collect();
            let train = data.rows(&tr);
            let valid = data.rows(&va);
            let valid_labels = valid.class_labels();
            let run = || -> Result<(f64, usize)> {
                let model = BayesianLogistic::new(train.features.clone(), train.targets.clone(), spec.sigma0_sq)?;
                let d = model.features().ncols();
                let mut stopper = EarlyStopper::new(grid.early_stop_eps, grid.patience);
                let fit = fit_blr(
                    &model,
                    spec,
                    point,
                    grid.max_iters,
                    derive_seed(seed, tag::PARTICLE, f as u64, 0),
                    |k, particles, weights| {
                        if k % grid.eval_every != 0 {
                            return true;
                        }
                        let v = lppd(&model, particles, d, weights, &valid.features, &valid_labels);
                        v.is_finite() && stopper.observe(v)
                    },
                )?;
                let v = lppd(&model, &fit.particles, d, fit.weights.as_deref(), &valid.features, &valid_labels);
                if !v.is_finite() {
                    return Err(Error::NonFinite("validation LPPD"));
                }
                Ok((v, fit.iterations_run))
            };
            match run() {
                Ok((v, k)) => TuneRecord {
                    point,
                    fold: f,
                    lppd: Some(v),
                    stopped_at: k,
                    error: None,
                },
                Err(e) => TuneRecord {
                    point,
                    fold: f,
                    lppd: None,
                    stopped_at: 0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut best: Option<(GridPoint, f64)> = None;
    for (p, point) in points.iter().enumerate() {
        let scores: Vec<f64> = records[p * grid.folds..(p + 1) * grid.folds].iter().filter_map(|r| r.lppd).collect();
        if scores.len() != grid.folds {
            continue;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((*point, mean));
        }
    }
    match best {
        Some((chosen, mean_lppd)) => Ok(TuneOutcome {
            algorithm: spec.algorithm,
            chosen,
            mean_lppd,
            records,
        }),
        None => {
            let failed: Vec<String> = points
                .iter()
                .map(|p| format!("(particle_step={}, theta_step={})", p.particle_step, p.theta_step))
                .collect();
            Err(Error::AllGridPointsFailed(failed.join(", ")))
        }
    }
}
