//! Parameter optimizers and the step-size heuristics used for Langevin moves.

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fill_standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        gamma: f64,
    },
    Adam {
        gamma: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn sgd(gamma: f64) -> Self {
        OptimizerSpec::Sgd { gamma }
    }

    pub fn adam(gamma: f64) -> Self {
        OptimizerSpec::Adam {
            gamma,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }

    pub fn gamma(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { gamma } | OptimizerSpec::Adam { gamma, .. } => gamma,
        }
    }

    /// A zero step size is allowed: it freezes θ.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerSpec::Sgd { gamma } => gamma >= 0.0 && gamma.is_finite(),
            OptimizerSpec::Adam {
                gamma,
                beta1,
                beta2,
                epsilon,
            } => {
                gamma >= 0.0
                    && gamma.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && epsilon > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

/// θ together with the optimizer's accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaState {
    pub theta: Vec<f64>,
    pub optimizer_state: OptimizerState,
    pub iteration: usize,
}

impl ThetaState {
    pub fn new(theta: Vec<f64>, spec: &OptimizerSpec) -> Self {
        let d = theta.len();
        let optimizer_state = match spec {
            OptimizerSpec::Sgd { .. } => OptimizerState::Sgd,
            OptimizerSpec::Adam { .. } => OptimizerState::Adam {
                m: vec![0.0; d],
                v: vec![0.0; d],
                t: 0,
            },
        };
        Self {
            theta,
            optimizer_state,
            iteration: 0,
        }
    }

    /// Applies one optimizer step in place.
    pub fn step(&mut self, g: &[f64], spec: &OptimizerSpec) {
        match *spec {
            OptimizerSpec::Sgd { gamma } => self.theta = sgd_step(&self.theta, g, gamma),
            OptimizerSpec::Adam { .. } => adam_step(self, g, spec),
        }
        self.iteration += 1;
    }
}

pub fn sgd_step(theta: &[f64], g: &[f64], gamma: f64) -> Vec<f64> {
    theta.iter().zip(g).map(|(t, g)| t - gamma * g).collect()
}

/// Bias-corrected Adam update. Does not advance `state.iteration`.
pub fn adam_step(state: &mut ThetaState, g: &[f64], spec: &OptimizerSpec) {
    let OptimizerSpec::Adam {
        gamma,
        beta1,
        beta2,
        epsilon,
    } = *spec
    else {
        state.theta = sgd_step(&state.theta, g, spec.gamma());
        return;
    };
    if !matches!(state.optimizer_state, OptimizerState::Adam { .. }) {
        let d = state.theta.len();
        state.optimizer_state = OptimizerState::Adam {
            m: vec![0.0; d],
            v: vec![0.0; d],
            t: 0,
        };
    }
    let OptimizerState::Adam { m, v, t } = &mut state.optimizer_state else {
        unreachable!()
    };
    *t += 1;
    let bc1 = 1.0 - beta1.powi(*t as i32);
    let bc2 = 1.0 - beta2.powi(*t as i32);
    for j in 0..state.theta.len() {
        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        state.theta[j] -= gamma * m_hat / (v_hat.sqrt() + epsilon);
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` to unit norm (left alone if it is zero).
pub fn normalize_gradient(g: &mut [f64]) {
    let n = l2_norm(g);
    if n > 0.0 {
        g.iter_mut().for_each(|x| *x /= n);
    }
}

/// Rescales `g` so its norm does not exceed `max_norm`. Returns true if clipped.
pub fn clip_gradient(g: &mut [f64], max_norm: f64) -> bool {
    let n = l2_norm(g);
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|x| *x *= s);
        true
    } else {
        false
    }
}

/// A symmetric linear map applied matrix-free.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let r = self * nalgebra::DVector::from_column_slice(v);
        out.copy_from_slice(r.as_slice());
    }
}

/// `v ↦ ¼ Xᵀ(Xv) + v/σ0²`, an upper bound on the logistic-regression Hessian.
pub struct HessianBound<'a> {
    x: &'a DMatrix<f64>,
    inv_prior_var: f64,
}

pub fn hessian_bound_blr(x: &DMatrix<f64>, sigma0_sq: f64) -> Result<HessianBound<'_>> {
    if !(sigma0_sq > 0.0) {
        return Err(Error::InvalidConfig(format!("prior variance must be positive, got {sigma0_sq}")));
    }
    Ok(HessianBound {
        x,
        inv_prior_var: 1.0 / sigma0_sq,
    })
}

impl LinearOperator for HessianBound<'_> {
    fn dim(&self) -> usize {
        self.x.ncols()
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let v = nalgebra::DVector::from_column_slice(v);
        let xv = self.x * &v;
        let r = self.x.tr_mul(&xv) * 0.25 + v * self.inv_prior_var;
        out.copy_from_slice(r.as_slice());
    }
}

impl HessianBound<'_> {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.x.tr_mul(self.x) * 0.25 + DMatrix::identity(d, d) * self.inv_prior_var
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub eigenvalue: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Dominant eigenvalue by power iteration with Rayleigh-quotient stopping.
pub fn power_iteration<O: LinearOperator + ?Sized, R: RngCore + ?Sized>(
    op: &O,
    iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<PowerIteration> {
    let d = op.dim();
    let mut v = vec![0.0; d];
    let mut norm = 0.0;
    for _ in 0..3 {
        fill_standard_normal(rng, &mut v);
        norm = l2_norm(&v);
        if norm > 0.0 {
            break;
        }
    }
    if !(norm > 0.0) {
        return Err(Error::ZeroStartVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);

    let mut av = vec![0.0; d];
    let mut prev = f64::NAN;
    for it in 1..=iters {
        op.apply(&v, &mut av);
        let rq: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        let n = l2_norm(&av);
        if n == 0.0 {
            return Ok(PowerIteration {
                eigenvalue: 0.0,
                converged: true,
                iterations: it,
            });
        }
        for j in 0..d {
            v[j] = av[j] / n;
        }
        if (rq - prev).abs() <= tol * rq.abs().max(1e-300) {
            return Ok(PowerIteration {
                eigenvalue: rq,
                converged: true,
                iterations: it,
            });
        }
        prev = rq;
    }
    Ok(PowerIteration {
        eigenvalue: prev,
        converged: false,
        iterations: iters,
    })
}

/// `0.99 / λ_max`.
pub fn h_euler(lambda_max: f64) -> Result<f64> {
    if !(lambda_max > 0.0) {
        return Err(Error::NonPositiveEigenvalue(lambda_max));
    }
    Ok(0.99 / lambda_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, tag};

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_step(&[1.5], &[0.0], 0.1), vec![1.5]);
        assert!((sgd_step(&[1.0], &[2.0], 0.1)[0] - 0.8).abs() < 1e-15);
        assert_eq!(sgd_step(&[1.5], &[3.0], 0.0), vec![1.5]);
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        let spec = OptimizerSpec::adam(0.1);
        let mut s = ThetaState::new(vec![0.0, 0.0], &spec);
        s.step(&[3.0, -250.0], &spec);
        assert!((s.theta[0] + 0.1).abs() < 1e-6);
        assert!((s.theta[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_two_constant_steps() {
        let spec = OptimizerSpec::adam(0.1);
        let mut s = ThetaState::new(vec![1.0], &spec);
        s.step(&[1.0], &spec);
        assert!((s.theta[0] - 0.9).abs() < 1e-3);
        s.step(&[1.0], &spec);
        assert!((s.theta[0] - 0.8).abs() < 1e-3);
        assert_eq!(s.iteration, 2);
    }

    #[test]
    fn adam_zero_gradient_is_still() {
        let spec = OptimizerSpec::adam(0.1);
        let mut s = ThetaState::new(vec![0.3], &spec);
        for _ in 0..5 {
            s.step(&[0.0], &spec);
        }
        assert_eq!(s.theta, vec![0.3]);
    }

    #[test]
    fn optimizer_spec_json() {
        let s: OptimizerSpec = serde_json::from_str(r#"{"kind":"adam","gamma":0.005}"#).unwrap();
        assert_eq!(s, OptimizerSpec::adam(0.005));
        assert!(serde_json::from_str::<OptimizerSpec>(r#"{"kind":"sgd","gamma":1,"beta1":0.9}"#).is_err());
        assert!(OptimizerSpec::sgd(-1.0).validate().is_err());
    }

    #[test]
    fn clip_and_normalize() {
        let mut g = [3.0, 4.0];
        assert!(clip_gradient(&mut g, 1.0));
        assert!((l2_norm(&g) - 1.0).abs() < 1e-15);
        let mut g = [3.0, 4.0];
        assert!(!clip_gradient(&mut g, 10.0));
        normalize_gradient(&mut g);
        assert!((g[0] - 0.6).abs() < 1e-15);
        let mut z = [0.0, 0.0];
        normalize_gradient(&mut z);
        assert_eq!(z, [0.0, 0.0]);
    }

    #[test]
    fn hessian_bound_examples() {
        let mut rng = substream(0, tag::POWER, 0, 0);
        let zero = DMatrix::zeros(5, 3);
        let op = hessian_bound_blr(&zero, 5.0).unwrap();
        let l = power_iteration(&op, 100, 1e-12, &mut rng).unwrap().eigenvalue;
        assert!((l - 0.2).abs() < 1e-12);
        assert!((h_euler(l).unwrap() - 4.95).abs() < 1e-12);

        let eye = DMatrix::identity(4, 4);
        let op = hessian_bound_blr(&eye, 4.0).unwrap();
        let l = power_iteration(&op, 100, 1e-12, &mut rng).unwrap().eigenvalue;
        assert!((l - 0.5).abs() < 1e-12);
        assert!(hessian_bound_blr(&eye, 0.0).is_err());
    }

    #[test]
    fn power_iteration_examples() {
        let mut rng = substream(1, tag::POWER, 0, 0);
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0]));
        let r = power_iteration(&a, 1000, 1e-10, &mut rng).unwrap();
        assert!(r.converged);
        assert!((r.eigenvalue - 3.0).abs() < 1e-8);
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((power_iteration(&i, 10, 1e-12, &mut rng).unwrap().eigenvalue - 1.0).abs() < 1e-14);
        let d = DMatrix::<f64>::identity(2, 2) * 2.0;
        assert!((power_iteration(&d, 10, 1e-12, &mut rng).unwrap().eigenvalue - 2.0).abs() < 1e-14);
    }

    #[test]
    fn h_euler_examples() {
        assert!((h_euler(0.99).unwrap() - 1.0).abs() < 1e-15);
        assert!((h_euler(2.0).unwrap() - 0.495).abs() < 1e-15);
        assert!(matches!(h_euler(0.0), Err(Error::NonPositiveEigenvalue(_))));
    }
}
