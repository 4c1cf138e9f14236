use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::LatentModel;
use crate::rng::fill_standard_normal;

/// Two-layer bias-free network `softmax(W₂ tanh(W₁ f))` with priors
/// `W₁ ~ N(0, e^{2α} I)`, `W₂ ~ N(0, e^{2β} I)` and θ = (α, β).
///
/// Latent layout: `W₁` row-major (`hidden × inputs`) followed by `W₂` row-major
/// (`classes × hidden`).
#[derive(Debug, Clone)]
pub struct TinyBnn {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    hidden: usize,
    classes: usize,
}

pub const DEFAULT_HIDDEN: usize = 8;

impl TinyBnn {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, hidden: usize, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if hidden == 0 || classes < 2 {
            return Err(Error::InvalidConfig("network needs a hidden unit and at least two classes".into()));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Dataset(format!("label out of range for {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            hidden,
            classes,
        })
    }

    pub fn inputs(&self) -> usize {
        self.features.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn w1_len(&self) -> usize {
        self.hidden * self.inputs()
    }

    fn w2_len(&self) -> usize {
        self.classes * self.hidden
    }

    /// Hidden activations and class log-probabilities for one input row.
    fn forward(&self, w: &[f64], f: &[f64], hidden: &mut [f64], logp: &mut [f64]) {
        let (w1, w2) = w.split_at(self.w1_len());
        let d = f.len();
        for h in 0..self.hidden {
            let a: f64 = (0..d).map(|j| w1[h * d + j] * f[j]).sum();
            hidden[h] = a.tanh();
        }
        for c in 0..self.classes {
            logp[c] = (0..self.hidden).map(|h| w2[c * self.hidden + h] * hidden[h]).sum();
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logp.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        logp.iter_mut().for_each(|z| *z -= lse);
    }

    /// Class probabilities for every row of `features` under one weight vector.
    pub fn class_probabilities(&self, w: &[f64], features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(features.nrows(), self.classes);
        let mut hidden = vec![0.0; self.hidden];
        let mut logp = vec![0.0; self.classes];
        let mut row = vec![0.0; features.ncols()];
        for i in 0..features.nrows() {
            for j in 0..row.len() {
                row[j] = features[(i, j)];
            }
            self.forward(w, &row, &mut hidden, &mut logp);
            for c in 0..self.classes {
                out[(i, c)] = logp[c].exp();
            }
        }
        out
    }
}

impl LatentModel for TinyBnn {
    fn dim_x(&self) -> usize {
        self.w1_len() + self.w2_len()
    }

    fn dim_theta(&self) -> usize {
        2
    }

    fn potential(&self, theta: &[f64], w: &[f64]) -> f64 {
        let mut gx = vec![0.0; w.len()];
        let mut gt = [0.0; 2];
        self.evaluate(theta, w, &mut gx, &mut gt)
    }

    fn grad_x(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        let mut gt = [0.0; 2];
        self.evaluate(theta, w, out, &mut gt);
    }

    fn grad_theta(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        let mut gx = vec![0.0; w.len()];
        self.evaluate(theta, w, &mut gx, out);
    }

    fn evaluate(&self, theta: &[f64], w: &[f64], gx: &mut [f64], gt: &mut [f64]) -> f64 {
        let d = self.inputs();
        let (n1, n2) = (self.w1_len(), self.w2_len());
        let (w1, w2) = w.split_at(n1);
        gx.fill(0.0);
        let mut hidden = vec![0.0; self.hidden];
        let mut logp = vec![0.0; self.classes];
        let mut dh = vec![0.0; self.hidden];
        let mut row = vec![0.0; d];
        let mut nll = 0.0;
        for (i, &label) in self.labels.iter().enumerate() {
            for j in 0..d {
                row[j] = self.features[(i, j)];
            }
            self.forward(w, &row, &mut hidden, &mut logp);
            nll -= logp[label];
            dh.fill(0.0);
            for c in 0..self.classes {
                let dz = logp[c].exp() - if c == label { 1.0 } else { 0.0 };
                for h in 0..self.hidden {
                    gx[n1 + c * self.hidden + h] += dz * hidden[h];
                    dh[h] += dz * w2[c * self.hidden + h];
                }
            }
            for h in 0..self.hidden {
                let da = dh[h] * (1.0 - hidden[h] * hidden[h]);
                for j in 0..d {
                    gx[h * d + j] += da * row[j];
                }
            }
        }

        let (alpha, beta) = (theta[0], theta[1]);
        let (p1, p2) = ((-2.0 * alpha).exp(), (-2.0 * beta).exp());
        let sq1: f64 = w1.iter().map(|v| v * v).sum();
        let sq2: f64 = w2.iter().map(|v| v * v).sum();
        for k in 0..n1 {
            gx[k] += p1 * w1[k];
        }
        for k in 0..n2 {
            gx[n1 + k] += p2 * w2[k];
        }
        gt[0] = n1 as f64 - p1 * sq1;
        gt[1] = n2 as f64 - p2 * sq2;
        let ln2pi = (2.0 * PI).ln();
        nll + n1 as f64 * (alpha + 0.5 * ln2pi) + 0.5 * p1 * sq1 + n2 as f64 * (beta + 0.5 * ln2pi) + 0.5 * p2 * sq2
    }

    /// Prior draws at θ0.
    fn init_particles(&self, theta0: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let dim = self.dim_x();
        let n1 = self.w1_len();
        let (s1, s2) = (theta0[0].exp(), theta0[1].exp());
        let mut out = vec![0.0; n * dim];
        fill_standard_normal(rng, &mut out);
        for p in out.chunks_mut(dim) {
            p[..n1].iter_mut().for_each(|v| *v *= s1);
            p[n1..].iter_mut().for_each(|v| *v *= s2);
        }
        Ok(out)
    }
}
