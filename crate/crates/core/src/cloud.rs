//! Weighted particle ensembles.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::jarzynski::{log_mean_exp, normalized_weights};

/// `N` particles in `R^d` with cumulative log-weights and the evidence
/// contributions banked at each resampling event.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    dim: usize,
    positions: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub evidence_segments: Vec<f64>,
}

impl ParticleCloud {
    /// Builds a cloud from a row-major `N × dim` buffer with all log-weights zero.
    pub fn new(dim: usize, positions: Vec<f64>) -> Result<Self> {
        if dim == 0 || positions.is_empty() || positions.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form particles of dimension {dim}",
                positions.len()
            )));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial particle positions"));
        }
        let n = positions.len() / dim;
        Ok(Self {
            dim,
            positions,
            log_weights: vec![0.0; n],
            evidence_segments: Vec::new(),
        })
    }

    pub fn particle_count(&self) -> usize {
        self.log_weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        normalized_weights(&self.log_weights)
    }

    /// `log_z0 + Σ segments + log((1/N) Σ e^{A_i})`.
    pub fn log_evidence(&self, log_z0: f64) -> f64 {
        log_z0 + self.evidence_segments.iter().sum::<f64>() + log_mean_exp(&self.log_weights)
    }

    /// Replaces particles by the given ancestors and resets every log-weight.
    pub(crate) fn reindex(&mut self, ancestors: &[usize]) {
        let d = self.dim;
        let mut next = Vec::with_capacity(self.positions.len());
        for &a in ancestors {
            next.extend_from_slice(&self.positions[a * d..(a + 1) * d]);
        }
        self.positions = next;
        self.log_weights.iter_mut().for_each(|a| *a = 0.0);
    }

    /// Writes one row per particle (`particle, x_0.., log_weight, weight`).
    /// The banked evidence segments go into a `#` comment after `comments`.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let segs: Vec<String> = self.evidence_segments.iter().map(|s| s.to_string()).collect();
        writeln!(out, "# evidence_segments: {}", segs.join(";"))?;
        let weights = self.weights()?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["particle".to_string()];
        header.extend((0..self.dim).map(|j| format!("x_{j}")));
        header.push("log_weight".into());
        header.push("weight".into());
        w.write_record(&header)?;
        for i in 0..self.particle_count() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.particle(i).iter().map(|v| v.to_string()));
            rec.push(self.log_weights[i].to_string());
            rec.push(weights[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut segments = Vec::new();
        for line in text.lines().filter(|l| l.starts_with('#')) {
            if let Some(rest) = line.strip_prefix("# evidence_segments:") {
                segments = rest
                    .trim()
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|e| Error::Dataset(format!("bad segment {s:?}: {e}"))))
                    .collect::<Result<_>>()?;
            }
        }
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let dim = header.iter().filter(|h| h.starts_with("x_")).count();
        let lw_col = header
            .iter()
            .position(|h| h == "log_weight")
            .ok_or_else(|| Error::Dataset("particle CSV lacks a log_weight column".into()))?;
        let mut positions = Vec::new();
        let mut log_weights = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..dim {
                positions.push(parse_field(&rec, 1 + j)?);
            }
            log_weights.push(parse_field(&rec, lw_col)?);
        }
        let mut cloud = Self::new(dim, positions)?;
        cloud.log_weights = log_weights;
        cloud.evidence_segments = segments;
        Ok(cloud)
    }
}

fn parse_field(rec: &csv::StringRecord, j: usize) -> Result<f64> {
    let s = rec.get(j).unwrap_or("");
    s.parse::<f64>().map_err(|e| Error::Dataset(format!("bad float {s:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_unweighted() {
        let c = ParticleCloud::new(2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(c.particle_count(), 3);
        assert!(c.log_weights.iter().all(|&a| a == 0.0));
        assert_eq!(c.particle(1), &[2.0, 3.0]);
        assert_eq!(c.log_evidence(-1.5), -1.5);
    }

    #[test]
    fn rejects_ragged_buffers() {
        assert!(ParticleCloud::new(2, vec![0.0; 3]).is_err());
        assert!(ParticleCloud::new(1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut c = ParticleCloud::new(2, vec![0.1, -1.0 / 3.0, 1e-300, 123456.789]).unwrap();
        c.log_weights = vec![-0.7, std::f64::consts::PI];
        c.evidence_segments = vec![0.123456789012345, -2.0 / 7.0];
        let mut buf = Vec::new();
        c.write_csv(&mut buf, &["seed: 4".into()]).unwrap();
        let back = ParticleCloud::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, c);
    }
}
