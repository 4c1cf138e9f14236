use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerSpec;

/// Tunables of a JALA-EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_particles: usize,
    pub n_iterations: usize,
    pub langevin_step: f64,
    pub optimizer: OptimizerSpec,
    /// Resample when `ESS / N` drops below this fraction.
    #[serde(default = "default_ess_fraction")]
    pub ess_threshold_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub theta_init: Vec<f64>,
    /// Rescale the θ-gradient to unit norm before each optimizer step.
    #[serde(default)]
    pub normalize_gradient: bool,
    /// Upper bound on the θ-gradient norm; `None` disables clipping.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: Option<f64>,
}

fn default_ess_fraction() -> f64 {
    1.0 / 1.05
}

fn default_max_grad_norm() -> Option<f64> {
    Some(1e4)
}

impl RunConfig {
    pub fn new(n_particles: usize, n_iterations: usize, langevin_step: f64, optimizer: OptimizerSpec, theta_init: Vec<f64>) -> Self {
        Self {
            n_particles,
            n_iterations,
            langevin_step,
            optimizer,
            ess_threshold_fraction: default_ess_fraction(),
            seed: 0,
            theta_init,
            normalize_gradient: false,
            max_grad_norm: default_max_grad_norm(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ess_threshold(mut self, fraction: f64) -> Self {
        self.ess_threshold_fraction = fraction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidConfig("n_particles must be at least 1".into()));
        }
        if !(self.langevin_step > 0.0) || !self.langevin_step.is_finite() {
            return Err(Error::InvalidConfig(format!("langevin_step must be positive, got {}", self.langevin_step)));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold_fraction) {
            return Err(Error::InvalidConfig(format!(
                "ess_threshold_fraction must lie in [0, 1], got {}",
                self.ess_threshold_fraction
            )));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return Err(Error::InvalidConfig(format!("max_grad_norm must be positive, got {m}")));
            }
        }
        if self.theta_init.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("theta_init must be finite".into()));
        }
        self.optimizer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_defaults_and_rejections() {
        let c: RunConfig = serde_json::from_str(
            r#"{"n_particles":10,"n_iterations":5,"langevin_step":0.1,
                "optimizer":{"kind":"sgd","gamma":0.1},"theta_init":[0.0]}"#,
        )
        .unwrap();
        assert_eq!(c.max_grad_norm, Some(1e4));
        assert!((c.ess_threshold_fraction - 1.0 / 1.05).abs() < 1e-15);
        c.validate().unwrap();
        assert!(serde_json::from_str::<RunConfig>(
            r#"{"n_particles":10,"n_iterations":5,"langevin_step":0.1,"bogus":1,
                "optimizer":{"kind":"sgd","gamma":0.1},"theta_init":[0.0]}"#
        )
        .is_err());
    }

    #[test]
    fn validation() {
        let base = RunConfig::new(10, 5, 0.1, OptimizerSpec::sgd(0.1), vec![0.0]);
        base.validate().unwrap();
        let mut c = base.clone();
        c.n_particles = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.langevin_step = 0.0;
        assert!(c.validate().is_err());
        assert!(base.clone().with_ess_threshold(1.5).validate().is_err());
    }
}
